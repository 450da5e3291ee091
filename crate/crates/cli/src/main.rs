use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ete_cli::analysis::{COMPARE_HEADERS, FRONTIER_HEADERS};
use ete_cli::csvio::write_csv;
use ete_cli::{compare, pareto, plotdata, run_sweep, verify, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ete", version, about = "Decoding-schedule experiments on exact oracles")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Query a remote ete-oracle/1 server instead of the suite's oracles.
    #[arg(long, global = true)]
    oracle_endpoint: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep described by a JSON config.
    Run { config: PathBuf },
    /// Check the round bound and bits-to-rounds slopes of a result set.
    Verify { dir: PathBuf },
    /// Pareto frontier of a result set.
    Pareto {
        dir: PathBuf,
        #[arg(long, default_value = "exact_match")]
        metric: String,
    },
    /// Forward-pass reduction of result set B over result set A.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
    /// Emit CSV series for plotting.
    Plotdata { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ETE_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `Ok(false)` maps to exit code 1: the command ran but found failures.
fn dispatch(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match cli.command {
        Command::Run { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let out = cli
                .out
                .or_else(|| cfg.out.clone())
                .unwrap_or_else(|| PathBuf::from("results"));
            let res = run_sweep(&cfg, &out, cli.oracle_endpoint.as_deref())?;
            println!(
                "{} runs in {} cells -> {} ({} failed)",
                res.manifest.runs,
                res.manifest.cells.len(),
                out.display(),
                res.manifest.failed.len()
            );
            for id in &res.manifest.failed {
                eprintln!("failed: {id}");
            }
            Ok(res.all_ok())
        }
        Command::Verify { dir } => {
            let summary = verify(&dir)?;
            write_json(&dir.join("verify.json"), &summary)?;
            print_json(&summary)?;
            for f in &summary.failures {
                eprintln!("bound violation: {} (f = {}, rounds {:?}): {}", f.run_id, f.f, f.rounds, f.reason);
            }
            Ok(summary.ok)
        }
        Command::Pareto { dir, metric } => {
            let front = pareto(&dir, &metric)?;
            write_csv(&cli.out.unwrap_or(dir).join("pareto.csv"), FRONTIER_HEADERS, &front)?;
            print_json(&front)?;
            Ok(true)
        }
        Command::Compare { dir_a, dir_b } => {
            let rows = compare(&dir_a, &dir_b)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                write_csv(&out.join("compare.csv"), COMPARE_HEADERS, &rows)?;
            }
            print_json(&rows)?;
            Ok(true)
        }
        Command::Plotdata { dir } => {
            for f in plotdata(&dir)? {
                println!("{}", f.display());
            }
            Ok(true)
        }
    }
}
