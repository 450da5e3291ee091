//! Sweep execution and the on-disk result set.
//!
//! Layout of an output directory:
//! `config.json`, `manifest.json`, `runs.csv`, `bounds.csv`,
//! `efficiency.csv`, `traces/<run_id>.jsonl`, `reports/<run_id>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ete_core::info::{bound_report_from, epsilon_total, BoundReport, EfficiencyReport};
use ete_core::suite::{derive_seed, Instance};
use ete_core::{
    decompose_efficiency, make_initial_state, run_block_diffusion, run_ete, vanilla_any_order_run, DecodeTrace,
    Nats, RoundKind,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Cell, ExperimentConfig, SchedulerSpec};
use crate::csvio::write_csv;

pub const MANIFEST_SCHEMA: &str = "ete-sweep/1";

pub fn run_id(cell: usize, sample: usize) -> String {
    format!("cell{cell:03}_sample{sample:04}")
}

/// One row of `runs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub cell: usize,
    pub sample: usize,
    pub family: String,
    pub scheduler: String,
    pub f: Option<f64>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    #[serde(rename = "N")]
    pub n_budget: Option<usize>,
    pub k: Option<usize>,
    pub gen_len: usize,
    pub rounds: usize,
    pub exploit_rounds: usize,
    pub implicit_rounds: usize,
    pub targeted_rounds: usize,
    pub cleanup_rounds: usize,
    pub forward_passes: u64,
    pub steps: u64,
    pub marginal_nats: f64,
    pub total_nats: Option<f64>,
    /// Exact joint nats of the exploit rounds.
    pub exploit_nats: Option<f64>,
    pub exact_match: Option<u8>,
    pub status: String,
}

pub const RUN_HEADERS: &[&str] = &[
    "run_id",
    "cell",
    "sample",
    "family",
    "scheduler",
    "f",
    "C",
    "N",
    "k",
    "gen_len",
    "rounds",
    "exploit_rounds",
    "implicit_rounds",
    "targeted_rounds",
    "cleanup_rounds",
    "forward_passes",
    "steps",
    "marginal_nats",
    "total_nats",
    "exploit_nats",
    "exact_match",
    "status",
];

/// One row of `bounds.csv`; written for dynamic-threshold runs on exact
/// oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub sample_id: String,
    pub f: f64,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub total_nats: f64,
    pub epsilon: f64,
    #[serde(rename = "R_total")]
    pub r_total: usize,
    #[serde(rename = "R_exploit")]
    pub r_exploit: usize,
    pub bound: f64,
    pub margin: f64,
    pub exploit_nats: f64,
    pub exploit_epsilon: f64,
    pub exploit_bound: f64,
    pub pass: bool,
}

pub const BOUND_HEADERS: &[&str] = &[
    "sample_id",
    "f",
    "C",
    "total_nats",
    "epsilon",
    "R_total",
    "R_exploit",
    "bound",
    "margin",
    "exploit_nats",
    "exploit_epsilon",
    "exploit_bound",
    "pass",
];

impl BoundRow {
    pub fn from_report(sample_id: &str, c: Option<f64>, b: &BoundReport) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            f: b.f,
            c,
            total_nats: b.total_nats.value(),
            epsilon: b.epsilon_total.value(),
            r_total: b.rounds_total,
            r_exploit: b.rounds_exploit,
            bound: b.bound,
            margin: b.margin,
            exploit_nats: b.exploit.nats,
            exploit_epsilon: b.exploit.epsilon,
            exploit_bound: b.exploit.terms.bound,
            pass: b.pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub cell: usize,
    pub traces: usize,
    pub traces_with_nats: usize,
    pub exploration_rounds_pct: f64,
    pub exploration_nats_pct: f64,
    pub exploration_ratio: Option<f64>,
    pub exploitation_rounds_pct: f64,
    pub exploitation_nats_pct: f64,
    pub exploitation_ratio: Option<f64>,
}

pub const EFFICIENCY_HEADERS: &[&str] = &[
    "cell",
    "traces",
    "traces_with_nats",
    "exploration_rounds_pct",
    "exploration_nats_pct",
    "exploration_ratio",
    "exploitation_rounds_pct",
    "exploitation_nats_pct",
    "exploitation_ratio",
];

impl EfficiencyRow {
    fn new(cell: usize, r: &EfficiencyReport) -> Self {
        Self {
            cell,
            traces: r.traces,
            traces_with_nats: r.traces_with_nats,
            exploration_rounds_pct: r.exploration.rounds_pct,
            exploration_nats_pct: r.exploration.nats_pct,
            exploration_ratio: r.exploration.ratio,
            exploitation_rounds_pct: r.exploitation.rounds_pct,
            exploitation_nats_pct: r.exploitation.nats_pct,
            exploitation_ratio: r.exploitation.ratio,
        }
    }
}

/// Per-run report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub exact_match: Option<bool>,
    pub bound: Option<BoundReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub name: String,
    pub family: String,
    pub seed: u64,
    pub samples: usize,
    pub cells: Vec<Cell>,
    pub runs: usize,
    pub failed: Vec<String>,
}

/// Everything one run produces.
pub struct RunOutcome {
    pub row: RunRow,
    pub trace: Option<DecodeTrace>,
    pub report: RunReport,
}

pub struct SweepResult {
    pub dir: PathBuf,
    pub runs: Vec<RunRow>,
    pub bounds: Vec<BoundRow>,
    pub manifest: Manifest,
}

impl SweepResult {
    pub fn all_ok(&self) -> bool {
        self.manifest.failed.is_empty()
    }
}

/// A failed run yields its message and the partial trace, if decoding started.
fn decode(cell: &Cell, inst: &Instance, seed: u64) -> Result<DecodeTrace, (String, Option<DecodeTrace>)> {
    let oracle = inst.oracle.as_ref();
    let state = make_initial_state(&inst.prompt, inst.gen_len, inst.block_len, oracle.vocab(), seed)
        .map_err(|e| (e.to_string(), None))?;
    let run = match cell.scheduler {
        SchedulerSpec::Vanilla { decode } => vanilla_any_order_run(oracle, state, seed, decode),
        SchedulerSpec::Alg1 { rule, decode } => run_block_diffusion(oracle, state, rule, decode),
        SchedulerSpec::Ete { ete } => run_ete(oracle, state, &ete),
    };
    run.map_err(|e| (e.to_string(), Some(*e.partial)))
}

/// Decodes one (cell, sample) pair and scores it.
pub fn execute(cell: &Cell, inst: &Instance, master: u64) -> RunOutcome {
    let id = run_id(cell.index, inst.index);
    let seed = derive_seed(master, cell.index as u64, inst.index as u64);
    let sched = cell.scheduler;
    let (ete_n, ete_k) = match sched {
        SchedulerSpec::Ete { ete } => (Some(ete.resolve(inst.block_len).n_budget), Some(ete.k)),
        _ => (None, None),
    };
    let (trace, mut error) = match decode(cell, inst, seed) {
        Ok(t) => (Some(t), None),
        Err((msg, partial)) => {
            log::warn!("{id}: {msg}");
            (partial, Some(msg))
        }
    };
    let mut bound = None;
    let mut total_nats = None;
    let mut exploit_nats = None;
    let complete = error.is_none();
    if let (Some(t), true) = (&trace, complete) {
        if inst.oracle.supports_exact_joint() {
            match epsilon_total(t, inst.oracle.as_ref()) {
                Ok(eps) => {
                    total_nats = Some(eps.total_nats.value());
                    exploit_nats = Some(
                        t.rounds
                            .iter()
                            .zip(&eps.round_joint)
                            .filter(|(r, _)| r.kind == RoundKind::Exploit)
                            .map(|(_, j)| *j)
                            .sum::<Nats>()
                            .value(),
                    );
                    // The bound presumes f <= 1; larger factors are decoded
                    // and reported without one.
                    if let Some(f) = sched.factor().filter(|&f| f <= 1.0) {
                        match bound_report_from(t, &eps, f) {
                            Ok(b) => bound = Some(b),
                            Err(e) => error = Some(format!("bound: {e}")),
                        }
                    }
                }
                Err(e) => error = Some(format!("epsilon: {e}")),
            }
        }
    }
    let exact_match = match (&trace, complete && !inst.target.is_empty()) {
        (Some(t), true) => Some(t.generated() == inst.target.as_slice()),
        _ => None,
    };
    let count = |k: RoundKind| trace.as_ref().map_or(0, |t| t.rounds.iter().filter(|r| r.kind == k).count());
    let row = RunRow {
        run_id: id.clone(),
        cell: cell.index,
        sample: inst.index,
        family: inst.family.to_string(),
        scheduler: sched.name().to_string(),
        f: sched.factor(),
        c: sched.threshold(),
        n_budget: ete_n,
        k: ete_k,
        gen_len: inst.gen_len,
        rounds: trace.as_ref().map_or(0, DecodeTrace::total_rounds),
        exploit_rounds: count(RoundKind::Exploit),
        implicit_rounds: count(RoundKind::ImplicitExplore),
        targeted_rounds: count(RoundKind::TargetedExplore),
        cleanup_rounds: count(RoundKind::Cleanup),
        forward_passes: trace.as_ref().map_or(0, DecodeTrace::forward_passes),
        steps: trace.as_ref().map_or(0, DecodeTrace::steps),
        marginal_nats: trace.as_ref().map_or(0.0, DecodeTrace::marginal_nats),
        total_nats,
        exploit_nats,
        exact_match: exact_match.map(u8::from),
        status: if error.is_none() { "ok".into() } else { "failed".into() },
    };
    RunOutcome {
        row,
        trace,
        report: RunReport {
            run_id: id,
            exact_match,
            bound,
            error,
        },
    }
}

/// Runs every (cell, sample) pair on the current rayon pool and writes the
/// result set. Aggregates are assembled in (cell, sample) order, so output
/// bytes do not depend on scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, endpoint: Option<&str>) -> Result<SweepResult> {
    let cells = cfg.cells()?;
    let instances = cfg.instances(endpoint)?;
    fs::create_dir_all(out.join("traces")).with_context(|| format!("creating {}", out.display()))?;
    fs::create_dir_all(out.join("reports"))?;
    let mut stored = cfg.clone();
    stored.out = None;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&stored)? + "\n")?;

    let jobs: Vec<(&Cell, &Instance)> = cells
        .iter()
        .flat_map(|c| instances.iter().map(move |i| (c, i)))
        .collect();
    log::info!("{} cells x {} samples", cells.len(), instances.len());
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|(c, i)| {
            let o = execute(c, i, cfg.seed);
            write_run_files(out, &o)?;
            Ok(o)
        })
        .collect::<Result<_>>()?;

    let mut runs = Vec::with_capacity(outcomes.len());
    let mut bounds = Vec::new();
    let mut failed = Vec::new();
    let mut efficiency = Vec::new();
    for cell in &cells {
        let mine: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.row.cell == cell.index).collect();
        let traces: Vec<DecodeTrace> = mine
            .iter()
            .filter(|o| o.row.status == "ok")
            .filter_map(|o| o.trace.clone())
            .collect();
        if !traces.is_empty() {
            efficiency.push(EfficiencyRow::new(cell.index, &decompose_efficiency(&traces)?));
        }
        for o in mine {
            if let Some(b) = &o.report.bound {
                bounds.push(BoundRow::from_report(&o.row.run_id, o.row.c, b));
            }
            if o.row.status != "ok" {
                failed.push(o.row.run_id.clone());
            }
            runs.push(o.row.clone());
        }
    }
    write_csv(&out.join("runs.csv"), RUN_HEADERS, &runs)?;
    write_csv(&out.join("bounds.csv"), BOUND_HEADERS, &bounds)?;
    write_csv(&out.join("efficiency.csv"), EFFICIENCY_HEADERS, &efficiency)?;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        name: cfg.name.clone(),
        family: cfg.family().into(),
        seed: cfg.seed,
        samples: cfg.samples,
        cells,
        runs: runs.len(),
        failed,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(SweepResult {
        dir: out.to_path_buf(),
        runs,
        bounds,
        manifest,
    })
}

fn write_run_files(out: &Path, o: &RunOutcome) -> Result<()> {
    if let Some(t) = &o.trace {
        let f = fs::File::create(out.join("traces").join(format!("{}.jsonl", o.row.run_id)))?;
        let mut w = std::io::BufWriter::new(f);
        t.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let report = serde_json::to_string_pretty(&o.report)? + "\n";
    fs::write(out.join("reports").join(format!("{}.json", o.row.run_id)), report)?;
    Ok(())
}
