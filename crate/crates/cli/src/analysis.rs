//! Post-hoc analysis over result directories written by [`crate::run_sweep`].

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ete_core::info::{bound_report_from, epsilon_total};
use ete_core::{DecodeTrace, Nats, RoundKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::csvio::{read_csv, write_csv};
use crate::sweep::RunRow;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0xB007_5EED;

pub fn load_runs(dir: &Path) -> Result<Vec<RunRow>> {
    read_csv(&dir.join("runs.csv"))
}

pub fn load_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&dir.join("config.json"))
}

pub fn load_trace(dir: &Path, run_id: &str) -> Result<DecodeTrace> {
    let path = dir.join("traces").join(format!("{run_id}.jsonl"));
    let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    DecodeTrace::read_jsonl(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// Ordinary least-squares slope of `y` on `x`; `None` without spread in `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 1e-12).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyFailure {
    pub run_id: String,
    pub f: f64,
    pub margin: Option<f64>,
    /// Exploit rounds whose exact nats exceed the per-round cap.
    pub rounds: Vec<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub f: f64,
    pub runs: usize,
    /// Exploit rounds per exploit nat.
    pub slope: Option<f64>,
    pub mean_nats_per_exploit_round: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub checked: usize,
    pub passed: usize,
    /// Runs with `f > 1`: decoded and regressed, not held to the bound.
    pub excluded: usize,
    pub worst_margin: Option<f64>,
    pub failures: Vec<VerifyFailure>,
    pub slopes: Vec<SlopeRow>,
    pub slopes_positive: bool,
    pub slopes_non_increasing: bool,
    pub ok: bool,
}

struct Checked {
    f: f64,
    exploit_nats: f64,
    exploit_rounds: usize,
    margin: Option<f64>,
    failure: Option<VerifyFailure>,
}

/// Re-scores every dynamic-threshold trace in `dir` against its exact
/// oracle, checks the round bound, and regresses exploit rounds on exploit
/// nats per `f`.
pub fn verify(dir: &Path) -> Result<VerifySummary> {
    let cfg = load_config(dir)?;
    let instances = cfg.instances(None)?;
    let runs = load_runs(dir)?;
    let todo: Vec<&RunRow> = runs.iter().filter(|r| r.status == "ok" && r.f.is_some()).collect();
    let checked: Vec<Checked> = todo
        .par_iter()
        .map(|row| -> Result<Checked> {
            let f = row.f.expect("filtered");
            let inst = instances
                .get(row.sample)
                .with_context(|| format!("{}: no instance {}", row.run_id, row.sample))?;
            let fail = |margin, rounds, reason: String| VerifyFailure {
                run_id: row.run_id.clone(),
                f,
                margin,
                rounds,
                reason,
            };
            let trace = load_trace(dir, &row.run_id)?;
            let eps = match epsilon_total(&trace, inst.oracle.as_ref()) {
                Ok(e) => e,
                Err(e) => {
                    return Ok(Checked {
                        f,
                        exploit_nats: 0.0,
                        exploit_rounds: 0,
                        margin: None,
                        failure: Some(fail(None, Vec::new(), format!("cannot score trace: {e}"))),
                    })
                }
            };
            let exploit_rounds = trace.rounds.iter().filter(|r| r.kind == RoundKind::Exploit).count();
            let exploit_nats = trace
                .rounds
                .iter()
                .zip(&eps.round_joint)
                .filter(|(r, _)| r.kind == RoundKind::Exploit)
                .map(|(_, j)| *j)
                .sum::<Nats>()
                .value();
            let mut out = Checked {
                f,
                exploit_nats,
                exploit_rounds,
                margin: None,
                failure: None,
            };
            if f <= 1.0 {
                let b = bound_report_from(&trace, &eps, f)?;
                out.margin = Some(b.margin);
                if !b.pass || !b.cap_violations.is_empty() {
                    let reason = if b.pass {
                        "per-round cap exceeded".to_string()
                    } else {
                        format!("{} exploit rounds below bound {:.6}", b.rounds_exploit, b.exploit.terms.bound)
                    };
                    out.failure = Some(fail(Some(b.margin), b.cap_violations.clone(), reason));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut by_f: BTreeMap<u64, Vec<&Checked>> = BTreeMap::new();
    for c in &checked {
        by_f.entry(c.f.to_bits()).or_default().push(c);
    }
    let mut slopes: Vec<SlopeRow> = by_f
        .values()
        .map(|group| {
            let pts: Vec<(f64, f64)> = group.iter().map(|c| (c.exploit_nats, c.exploit_rounds as f64)).collect();
            let per_round: Vec<f64> = group
                .iter()
                .filter(|c| c.exploit_rounds > 0)
                .map(|c| c.exploit_nats / c.exploit_rounds as f64)
                .collect();
            SlopeRow {
                f: group[0].f,
                runs: group.len(),
                slope: ols_slope(&pts),
                mean_nats_per_exploit_round: (!per_round.is_empty())
                    .then(|| per_round.iter().sum::<f64>() / per_round.len() as f64),
            }
        })
        .collect();
    slopes.sort_by(|a, b| a.f.total_cmp(&b.f));
    let defined: Vec<f64> = slopes.iter().filter_map(|s| s.slope).collect();
    let slopes_positive = defined.iter().all(|&s| s > 0.0);
    let slopes_non_increasing = defined.windows(2).all(|w| w[1] <= w[0] + 1e-12);

    let bounded: Vec<&Checked> = checked.iter().filter(|c| c.f <= 1.0).collect();
    let failures: Vec<VerifyFailure> = checked.iter().filter_map(|c| c.failure.clone()).collect();
    let worst_margin = bounded.iter().filter_map(|c| c.margin).reduce(f64::min);
    let passed = bounded.iter().filter(|c| c.failure.is_none()).count();
    Ok(VerifySummary {
        checked: bounded.len(),
        passed,
        excluded: checked.len() - bounded.len(),
        worst_margin,
        ok: failures.is_empty() && slopes_positive && slopes_non_increasing,
        failures,
        slopes,
        slopes_positive,
        slopes_non_increasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub cell: usize,
    pub metric: f64,
    pub rounds: f64,
    pub forward_passes: f64,
    pub steps: f64,
    pub runs: usize,
    pub on_frontier: bool,
}

pub const FRONTIER_HEADERS: &[&str] = &["cell", "metric", "rounds", "forward_passes", "steps", "runs", "on_frontier"];

fn check_metric(metric: &str) -> Result<()> {
    if metric != "exact_match" {
        bail!("unknown metric {metric:?}; supported: exact_match");
    }
    Ok(())
}

/// Per-cell means over completed runs that carry the metric, flagged for
/// Pareto optimality under (higher metric, fewer passes).
pub fn cell_points(runs: &[RunRow]) -> Vec<FrontierPoint> {
    let mut cells: BTreeMap<usize, Vec<&RunRow>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.status == "ok" && r.exact_match.is_some()) {
        cells.entry(r.cell).or_default().push(r);
    }
    let mut pts: Vec<FrontierPoint> = cells
        .into_iter()
        .map(|(cell, rs)| {
            let n = rs.len() as f64;
            let mean = |g: &dyn Fn(&RunRow) -> f64| rs.iter().map(|r| g(r)).sum::<f64>() / n;
            FrontierPoint {
                cell,
                metric: mean(&|r| r.exact_match.unwrap_or(0) as f64),
                rounds: mean(&|r| r.rounds as f64),
                forward_passes: mean(&|r| r.forward_passes as f64),
                steps: mean(&|r| r.steps as f64),
                runs: rs.len(),
                on_frontier: false,
            }
        })
        .collect();
    let snapshot = pts.clone();
    for p in &mut pts {
        p.on_frontier = !snapshot.iter().any(|q| {
            q.metric >= p.metric
                && q.forward_passes <= p.forward_passes
                && (q.metric > p.metric || q.forward_passes < p.forward_passes)
        });
    }
    pts.sort_by(|a, b| a.forward_passes.total_cmp(&b.forward_passes).then(a.cell.cmp(&b.cell)));
    pts
}

/// Frontier points sorted by forward passes.
pub fn pareto(dir: &Path, metric: &str) -> Result<Vec<FrontierPoint>> {
    check_metric(metric)?;
    Ok(cell_points(&load_runs(dir)?).into_iter().filter(|p| p.on_frontier).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub suite: String,
    pub cell_a: usize,
    pub cell_b: usize,
    pub metric_a: Option<f64>,
    pub metric_b: Option<f64>,
    pub passes_a: f64,
    pub passes_b: f64,
    pub rounds_a: f64,
    pub rounds_b: f64,
    pub steps_a: f64,
    pub steps_b: f64,
    pub pairs: usize,
    /// `100 (passes_a - passes_b) / passes_a`.
    pub reduction_pct: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const COMPARE_HEADERS: &[&str] = &[
    "suite",
    "cell_a",
    "cell_b",
    "metric_a",
    "metric_b",
    "passes_a",
    "passes_b",
    "rounds_a",
    "rounds_b",
    "steps_a",
    "steps_b",
    "pairs",
    "reduction_pct",
    "ci_low",
    "ci_high",
];

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn reduction(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean_of(a);
    if ma > 0.0 {
        100.0 * (ma - mean_of(b)) / ma
    } else {
        0.0
    }
}

/// Pairs each cell of `b` with the cell of `a` whose mean metric is nearest
/// (ties: nearest mean passes, then lowest index) and reports the mean
/// forward-pass reduction of `b` over `a` on the shared samples, with a
/// percentile bootstrap interval over samples.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<Vec<CompareRow>> {
    let (ca, cb) = (load_config(dir_a)?, load_config(dir_b)?);
    if ca.suite != cb.suite || ca.seed != cb.seed || ca.samples != cb.samples {
        bail!(
            "mismatched suites: {} ({}, seed {}, {} samples) vs {} ({}, seed {}, {} samples)",
            dir_a.display(),
            ca.family(),
            ca.seed,
            ca.samples,
            dir_b.display(),
            cb.family(),
            cb.seed,
            cb.samples
        );
    }
    let (ra, rb) = (load_runs(dir_a)?, load_runs(dir_b)?);
    let group = |runs: &[RunRow]| {
        let mut m: BTreeMap<usize, BTreeMap<usize, RunRow>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.status == "ok") {
            m.entry(r.cell).or_default().insert(r.sample, r.clone());
        }
        m
    };
    let (ga, gb) = (group(&ra), group(&rb));
    let metric = |rows: &BTreeMap<usize, RunRow>| -> Option<f64> {
        let v: Vec<f64> = rows.values().filter_map(|r| r.exact_match.map(f64::from)).collect();
        (!v.is_empty()).then(|| mean_of(&v))
    };
    let passes = |rows: &BTreeMap<usize, RunRow>| mean_of(&rows.values().map(|r| r.forward_passes as f64).collect::<Vec<_>>());
    let mut out = Vec::new();
    for (&cell_b, rows_b) in &gb {
        let (mb, pb) = (metric(rows_b), passes(rows_b));
        let best = ga
            .iter()
            .min_by(|(ia, x), (ib, y)| {
                let d = |rows: &BTreeMap<usize, RunRow>| match (metric(rows), mb) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    _ => 0.0,
                };
                d(x).total_cmp(&d(y))
                    .then((passes(x) - pb).abs().total_cmp(&(passes(y) - pb).abs()))
                    .then(ia.cmp(ib))
            });
        let Some((&cell_a, rows_a)) = best else {
            bail!("{} has no completed runs", dir_a.display());
        };
        let shared: Vec<usize> = rows_b.keys().filter(|s| rows_a.contains_key(s)).copied().collect();
        let col = |rows: &BTreeMap<usize, RunRow>, g: fn(&RunRow) -> f64| -> Vec<f64> {
            shared.iter().map(|s| g(&rows[s])).collect()
        };
        let (pa_v, pb_v) = (col(rows_a, |r| r.forward_passes as f64), col(rows_b, |r| r.forward_passes as f64));
        let (lo, hi) = bootstrap_ci(&pa_v, &pb_v);
        out.push(CompareRow {
            suite: ca.family().to_string(),
            cell_a,
            cell_b,
            metric_a: metric(rows_a),
            metric_b: mb,
            passes_a: mean_of(&pa_v),
            passes_b: mean_of(&pb_v),
            rounds_a: mean_of(&col(rows_a, |r| r.rounds as f64)),
            rounds_b: mean_of(&col(rows_b, |r| r.rounds as f64)),
            steps_a: mean_of(&col(rows_a, |r| r.steps as f64)),
            steps_b: mean_of(&col(rows_b, |r| r.steps as f64)),
            pairs: shared.len(),
            reduction_pct: reduction(&pa_v, &pb_v),
            ci_low: lo,
            ci_high: hi,
        });
    }
    Ok(out)
}

/// 95% percentile interval of the paired mean reduction.
pub fn bootstrap_ci(a: &[f64], b: &[f64]) -> (f64, f64) {
    if a.is_empty() {
        return (0.0, 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let n = a.len();
    let mut stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let ra: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let rb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            reduction(&ra, &rb)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((q * (stats.len() - 1) as f64).round()) as usize];
    (at(0.025), at(0.975))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub run_id: String,
    pub cell: usize,
    pub f: Option<f64>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub exploit_nats: Option<f64>,
    pub exploit_rounds: usize,
    pub total_nats: Option<f64>,
    pub rounds: usize,
    pub forward_passes: u64,
}

pub const SCATTER_HEADERS: &[&str] = &[
    "run_id",
    "cell",
    "f",
    "C",
    "exploit_nats",
    "exploit_rounds",
    "total_nats",
    "rounds",
    "forward_passes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRoundRow {
    pub f: f64,
    pub runs: usize,
    pub mean_nats_per_exploit_round: f64,
}

pub const PER_ROUND_HEADERS: &[&str] = &["f", "runs", "mean_nats_per_exploit_round"];

/// Writes `plot/rounds_vs_nats.csv` (one row per run),
/// `plot/nats_per_round_vs_f.csv` and `plot/frontier.csv`.
pub fn plotdata(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = load_runs(dir)?;
    let plot = dir.join("plot");
    fs::create_dir_all(&plot)?;
    let scatter: Vec<ScatterRow> = runs
        .iter()
        .map(|r| ScatterRow {
            run_id: r.run_id.clone(),
            cell: r.cell,
            f: r.f,
            c: r.c,
            exploit_nats: r.exploit_nats,
            exploit_rounds: r.exploit_rounds,
            total_nats: r.total_nats,
            rounds: r.rounds,
            forward_passes: r.forward_passes,
        })
        .collect();
    let mut by_f: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        if let (Some(f), Some(nats), true, true) = (r.f, r.exploit_nats, r.exploit_rounds > 0, r.status == "ok") {
            by_f.entry(f.to_bits()).or_default().push(nats / r.exploit_rounds as f64);
        }
    }
    let mut per_round: Vec<PerRoundRow> = by_f
        .into_iter()
        .map(|(bits, v)| PerRoundRow {
            f: f64::from_bits(bits),
            runs: v.len(),
            mean_nats_per_exploit_round: mean_of(&v),
        })
        .collect();
    per_round.sort_by(|a, b| a.f.total_cmp(&b.f));
    let files = vec![
        plot.join("rounds_vs_nats.csv"),
        plot.join("nats_per_round_vs_f.csv"),
        plot.join("frontier.csv"),
    ];
    write_csv(&files[0], SCATTER_HEADERS, &scatter)?;
    write_csv(&files[1], PER_ROUND_HEADERS, &per_round)?;
    write_csv(&files[2], FRONTIER_HEADERS, &cell_points(&runs))?;
    Ok(files)
}
