//! Explore-then-exploit decoding.
//!
//! Fast block diffusion (a per-block step budget, with earlier blocks staying
//! decodable) plus two kinds of exploration: one implicit token per stalled
//! block, and a batched look-ahead over medium-confidence candidates in the
//! active block that commits the hypothesis unlocking the most confident
//! tokens.
//!
//! Block offsets in the trigger and candidate scores are 1-based and
//! relative to the start of the generation window.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::baseline::{by_confidence, most_confident};
use crate::error::{ConfigError, DecodeError, OracleError};
use crate::oracle::{BatchQuery, MarginalReport, OracleModel, Prediction};
use crate::sequence::DecodeState;
use crate::trace::{Commit, DecodeTrace, Recorder, RoundKind};

/// Floor inside the log of the induced-confidence term.
pub const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EteConfig {
    /// Exploit threshold.
    #[serde(rename = "C")]
    pub c: f64,
    /// Steps per block; `None` means half the block length.
    #[serde(rename = "N")]
    pub n_budget: Option<usize>,
    pub n_f: usize,
    pub gamma: f64,
    /// Minimum masks left in the block to explore; `None` means a quarter
    /// of the block length.
    #[serde(rename = "N_e")]
    pub n_e: Option<usize>,
    pub c_info: f64,
    pub beta: f64,
    pub alpha: f64,
    pub k: usize,
    #[serde(rename = "E_max")]
    pub e_max: usize,
}

impl Default for EteConfig {
    fn default() -> Self {
        Self {
            c: 0.9,
            n_budget: None,
            n_f: 8,
            gamma: 0.5,
            n_e: None,
            c_info: 0.2,
            beta: 0.01,
            alpha: 0.5,
            k: 4,
            e_max: 4,
        }
    }
}

/// Configuration with block-length-dependent defaults filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEte {
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "N")]
    pub n_budget: usize,
    pub n_f: usize,
    pub gamma: f64,
    #[serde(rename = "N_e")]
    pub n_e: usize,
    pub c_info: f64,
    pub beta: f64,
    pub alpha: f64,
    pub k: usize,
    #[serde(rename = "E_max")]
    pub e_max: usize,
    pub block_len: usize,
}

impl EteConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                Err(ConfigError::invalid(format!("{name} = {x} must lie in (0, 1)")))
            }
        };
        unit("C", self.c)?;
        unit("c_info", self.c_info)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(ConfigError::invalid(format!("gamma = {} must lie in [0, 1)", self.gamma)));
        }
        if self.n_budget == Some(0) {
            return Err(ConfigError::invalid("N must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(ConfigError::invalid("beta must be non-negative"));
        }
        if !(self.alpha > 0.0) {
            return Err(ConfigError::invalid("alpha must be positive"));
        }
        if self.k == 0 {
            return Err(ConfigError::invalid("beam size k must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve(&self, block_len: usize) -> ResolvedEte {
        ResolvedEte {
            c: self.c,
            n_budget: self.n_budget.unwrap_or((block_len / 2).max(1)),
            n_f: self.n_f,
            gamma: self.gamma,
            n_e: self.n_e.unwrap_or(block_len / 4),
            c_info: self.c_info,
            beta: self.beta,
            alpha: self.alpha,
            k: self.k,
            e_max: self.e_max,
            block_len,
        }
    }
}

/// Masked positions in blocks `1..=active_block`.
pub fn feasible_set(state: &DecodeState) -> Vec<usize> {
    let seq = state.seq();
    let end = seq.block(state.active_block()).end;
    state.masked_set().range(seq.prompt_len()..end).copied().collect()
}

/// Result of one exploit pass: threshold commits plus every prediction
/// computed, kept for implicit exploration and the trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct Exploit {
    pub commits: Vec<Commit>,
    pub cache: Vec<Prediction>,
}

impl Exploit {
    fn confidence(&self, position: usize) -> Option<f64> {
        self.cache
            .iter()
            .find(|p| p.position == position)
            .map(|p| p.confidence)
    }
}

fn commit_of(p: &Prediction) -> Commit {
    Commit {
        position: p.position,
        token: p.token,
        confidence: p.confidence,
    }
}

/// One forward pass over `positions`; commits every confidence above `c`.
pub fn exploit(
    oracle: &dyn OracleModel,
    state: &DecodeState,
    positions: &[usize],
    c: f64,
) -> Result<Exploit, OracleError> {
    let cache = oracle.conditional_marginals(state.seq(), positions)?.predictions();
    let commits = cache.iter().filter(|p| p.confidence > c).map(commit_of).collect();
    Ok(Exploit { commits, cache })
}

/// The most confident cached token of every block `1..=up_to_block` that
/// still has masked positions and got nothing from the exploit pass. Uses
/// no forward pass.
pub fn implicit_explore(state: &DecodeState, pass: &Exploit, up_to_block: usize) -> Vec<Commit> {
    let seq = state.seq();
    let exploited: BTreeSet<usize> = pass.commits.iter().map(|c| c.position).collect();
    let mut out = Vec::new();
    for b in 1..=up_to_block.min(seq.num_blocks()) {
        let range = seq.block(b);
        if exploited.iter().any(|p| range.contains(p)) {
            continue;
        }
        let candidates: Vec<Prediction> = pass
            .cache
            .iter()
            .filter(|p| range.contains(&p.position) && state.masked_set().contains(&p.position))
            .copied()
            .collect();
        if let Some(top) = most_confident(&candidates) {
            out.push(commit_of(&top));
        }
    }
    out
}

fn relative(state: &DecodeState, position: usize) -> usize {
    position - state.seq().prompt_len() + 1
}

/// Frontier end `min(b n_b, max((b-1) n_b, last unmasked) + floor(n_b / 2))`
/// in 1-based window coordinates.
pub fn frontier_end(state: &DecodeState, b: usize) -> usize {
    let nb = state.seq().block_len();
    let seq = state.seq();
    let last = seq
        .window()
        .rev()
        .find(|&p| !seq.is_masked(p))
        .map_or(0, |p| relative(state, p));
    (b * nb).min(((b - 1) * nb).max(last) + nb / 2)
}

/// Explore when the frontier window of the active block is on average
/// below `gamma`, more than `n_e` masks remain there and the block still
/// has exploration budget.
pub fn trigger_exploration(
    state: &DecodeState,
    pass: &Exploit,
    cfg: &ResolvedEte,
    explorations_used: usize,
) -> bool {
    if explorations_used >= cfg.e_max {
        return false;
    }
    let b = state.active_block();
    let nb = state.seq().block_len();
    let lo = (b - 1) * nb;
    let hi = frontier_end(state, b);
    let window: Vec<f64> = state
        .masked_in_block(b)
        .filter(|&p| {
            let r = relative(state, p);
            r > lo && r <= hi
        })
        .filter_map(|p| pass.confidence(p))
        .collect();
    if window.is_empty() {
        return false;
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let remaining = state.masked_in_block(b).count();
    mean < cfg.gamma && remaining > cfg.n_e
}

/// Top-`k` masked positions of the active block by
/// `-|c - c_info| + beta * offset`, lower position first on ties.
pub fn explore_candidates(state: &DecodeState, pass: &Exploit, cfg: &ResolvedEte) -> Vec<Prediction> {
    let b = state.active_block();
    let base = (b - 1) * state.seq().block_len();
    let mut scored: Vec<(f64, Prediction)> = pass
        .cache
        .iter()
        .filter(|p| state.masked_set().contains(&p.position) && state.seq().block_of(p.position) == b)
        .map(|p| {
            let offset = (relative(state, p.position) - base) as f64;
            (-(p.confidence - cfg.c_info).abs() + cfg.beta * offset, *p)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.position.cmp(&b.1.position)));
    scored.into_iter().take(cfg.k).map(|(_, p)| p).collect()
}

/// `alpha ln c_j + ln max(sum of induced confidences >= C, SCORE_EPS)`.
pub fn score_hypothesis(c_j: f64, report: &MarginalReport, alpha: f64, c: f64) -> f64 {
    let induced: f64 = report
        .predictions()
        .iter()
        .filter(|p| p.confidence >= c)
        .map(|p| p.confidence)
        .sum();
    alpha * c_j.ln() + induced.max(SCORE_EPS).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub candidate: Prediction,
    pub score: f64,
    pub induced: Vec<Commit>,
}

/// Builds one hypothesis per candidate, evaluates them in one batched pass
/// and returns them with the winner first.
pub fn targeted_explore(
    oracle: &dyn OracleModel,
    state: &DecodeState,
    pass: &Exploit,
    cfg: &ResolvedEte,
) -> Result<Vec<Hypothesis>, OracleError> {
    let candidates = explore_candidates(state, pass, cfg);
    let feasible = feasible_set(state);
    let mut seqs = Vec::with_capacity(candidates.len());
    let mut queries = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let mut hyp = state.clone();
        hyp.commit(cand.position, cand.token);
        seqs.push(hyp.seq);
        queries.push(feasible.iter().copied().filter(|&p| p != cand.position).collect::<Vec<_>>());
    }
    let batch: Vec<BatchQuery<'_>> = seqs
        .iter()
        .zip(&queries)
        .map(|(seq, positions)| BatchQuery { seq, positions })
        .collect();
    let reports = oracle.batch_conditional_marginals(&batch)?;
    let mut hyps: Vec<Hypothesis> = candidates
        .iter()
        .zip(&reports)
        .map(|(cand, rep)| Hypothesis {
            candidate: *cand,
            score: score_hypothesis(cand.confidence, rep, cfg.alpha, cfg.c),
            induced: rep
                .predictions()
                .iter()
                .filter(|p| p.confidence > cfg.c)
                .map(commit_of)
                .collect(),
        })
        .collect();
    hyps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.candidate.position.cmp(&b.candidate.position))
    });
    Ok(hyps)
}

fn mixed_kind(exploit: &[Commit]) -> RoundKind {
    if exploit.is_empty() {
        RoundKind::ImplicitExplore
    } else {
        RoundKind::Exploit
    }
}

struct Run<'a> {
    oracle: &'a dyn OracleModel,
    cfg: ResolvedEte,
    rec: Recorder<'a>,
    state: DecodeState,
}

impl Run<'_> {
    /// Exploit, then either targeted or implicit exploration. Returns the
    /// step increment.
    fn iteration(&mut self, explorations: &mut usize) -> Result<u64, OracleError> {
        let b = self.state.active_block();
        let feasible = feasible_set(&self.state);
        let pass = exploit(self.oracle, &self.state, &feasible, self.cfg.c)?;
        let mut post = self.state.clone();
        for c in &pass.commits {
            post.commit(c.position, c.token);
        }
        if trigger_exploration(&post, &pass, &self.cfg, *explorations) {
            *explorations += 1;
            let implicit = implicit_explore(&self.state, &pass, b - 1);
            let kind = if pass.commits.is_empty() && implicit.is_empty() {
                RoundKind::Exploit
            } else {
                mixed_kind(&pass.commits)
            };
            let mut commits = pass.commits.clone();
            commits.extend(implicit);
            self.rec.record(&mut self.state, kind, commits, 1, 1)?;
            match targeted_explore(self.oracle, &self.state, &pass, &self.cfg) {
                Ok(hyps) => {
                    let win = &hyps[0];
                    let mut commits = vec![commit_of(&win.candidate)];
                    commits.extend(win.induced.iter().copied());
                    self.rec.record(&mut self.state, RoundKind::TargetedExplore, commits, 1, 1)?;
                }
                Err(e) => {
                    log::warn!("targeted exploration failed, falling back to implicit: {e}");
                    let remaining: Vec<Prediction> = pass
                        .cache
                        .iter()
                        .filter(|p| self.state.masked_set().contains(&p.position))
                        .copied()
                        .collect();
                    let fallback = Exploit {
                        commits: Vec::new(),
                        cache: remaining,
                    };
                    let commits = implicit_explore(&self.state, &fallback, b)
                        .into_iter()
                        .filter(|c| self.state.seq().block_of(c.position) == b)
                        .collect();
                    self.rec.record(&mut self.state, RoundKind::ImplicitExplore, commits, 1, 1)?;
                }
            }
            Ok(2)
        } else {
            let implicit = implicit_explore(&self.state, &pass, b);
            let kind = mixed_kind(&pass.commits);
            let mut commits = pass.commits;
            commits.extend(implicit);
            self.rec.record(&mut self.state, kind, commits, 1, 1)?;
            Ok(1)
        }
    }

    fn cleanup(&mut self) -> Result<(), OracleError> {
        let last = self.state.seq().num_blocks();
        self.state.set_active_block(last);
        for _ in 0..self.cfg.n_f {
            if self.state.masked_set().is_empty() {
                return Ok(());
            }
            let feasible = feasible_set(&self.state);
            let pass = exploit(self.oracle, &self.state, &feasible, self.cfg.c)?;
            let implicit = implicit_explore(&self.state, &pass, last);
            let mut commits = pass.commits;
            commits.extend(implicit);
            self.rec.record(&mut self.state, RoundKind::Cleanup, commits, 1, 1)?;
        }
        if !self.state.masked_set().is_empty() {
            let feasible = feasible_set(&self.state);
            let preds = self.oracle.conditional_marginals(self.state.seq(), &feasible)?.predictions();
            let commits = by_confidence(&preds).iter().map(commit_of).collect();
            self.rec.record(&mut self.state, RoundKind::Cleanup, commits, 1, 1)?;
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), OracleError> {
        let blocks = self.state.seq().num_blocks();
        let mut t: u64 = 0;
        for b in 1..=blocks {
            self.state.set_active_block(b);
            let t_b = t;
            let mut explorations = 0;
            while t - t_b <= self.cfg.n_budget as u64 && !self.state.masked_set().is_empty() {
                if feasible_set(&self.state).is_empty() {
                    break;
                }
                t += self.iteration(&mut explorations)?;
            }
            if self.state.masked_set().is_empty() {
                break;
            }
        }
        if !self.state.masked_set().is_empty() {
            self.cleanup()?;
        }
        Ok(())
    }
}

/// Full explore-then-exploit decode from a fresh state.
pub fn run_ete(
    oracle: &dyn OracleModel,
    state: DecodeState,
    cfg: &EteConfig,
) -> Result<DecodeTrace, DecodeError> {
    let resolved = cfg.resolve(state.seq().block_len());
    let config = serde_json::to_value(resolved).expect("config serializes");
    let rec = Recorder::new(oracle, &state, "ete", config);
    let mut run = Run {
        oracle,
        cfg: resolved,
        rec,
        state,
    };
    if resolved.k > oracle.batch_limit() {
        let e = OracleError::BatchTooLarge {
            got: resolved.k,
            limit: oracle.batch_limit(),
        };
        return Err(run.rec.fail(&run.state, e));
    }
    match run.run() {
        Ok(()) => Ok(run.rec.finish(&run.state)),
        Err(e) => Err(run.rec.fail(&run.state, e)),
    }
}
