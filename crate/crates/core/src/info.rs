//! Information accounting over decode traces: per-round nats, the parallel
//! approximation error, the confidence assumption, the rounds lower bound
//! and the explore/exploit efficiency split.
//!
//! Everything is in nats. `n` in the bound is the generated length.

use serde::{Deserialize, Serialize};

use crate::error::{InfoError, OracleError};
use crate::nats::Nats;
use crate::oracle::{argmax, OracleModel};
use crate::sequence::{MaskedSequence, TokenId};
use crate::trace::{DecodeTrace, RoundKind, RoundRecord};

/// Absolute tolerance on nats comparisons.
pub const NATS_TOL: f64 = 1e-9;

/// `sum(-ln confidence)` over the round's commits.
pub fn round_marginal_nats(round: &RoundRecord) -> Result<f64, InfoError> {
    round
        .committed
        .iter()
        .map(|c| {
            if c.confidence > 0.0 {
                Ok(-c.confidence.ln())
            } else {
                Err(InfoError::ZeroConfidence {
                    round: round.round,
                    position: c.position,
                })
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    /// `-ln p(x)` of the final sequence.
    pub total_nats: Nats,
    pub marginal_nats: f64,
    pub epsilon: Nats,
    /// Exact `-ln p(x^A | x^C)` per round, recomputed by replay.
    pub round_joint: Vec<Nats>,
    pub round_epsilon: Vec<Nats>,
    /// `epsilon <= sum of round epsilons`.
    pub triangle_holds: bool,
}

impl EpsilonReport {
    pub fn sum_round_joint(&self) -> Nats {
        self.round_joint.iter().copied().sum()
    }
}

fn abs_gap(joint: Nats, marginal: f64) -> Nats {
    if joint.is_infinite() {
        Nats::INFINITE
    } else {
        Nats((joint.value() - marginal).abs())
    }
}

/// Replays the trace against an exact oracle and measures the gap between
/// the true joint and the sum of committed marginals, in total and per round.
pub fn epsilon_total(trace: &DecodeTrace, oracle: &dyn OracleModel) -> Result<EpsilonReport, InfoError> {
    if !trace.is_complete() {
        return Err(InfoError::IncompleteTrace);
    }
    if !oracle.supports_exact_joint() {
        return Err(OracleError::Unsupported.into());
    }
    let final_seq = trace.final_seq();
    let total_nats = oracle.joint_logprob(&final_seq)?;
    let mut seq = trace.initial_seq();
    let mut round_joint = Vec::with_capacity(trace.rounds.len());
    let mut round_epsilon = Vec::with_capacity(trace.rounds.len());
    let mut marginal_nats = 0.0;
    for r in &trace.rounds {
        let m = round_marginal_nats(r)?;
        marginal_nats += m;
        let assignment: Vec<(usize, TokenId)> = r.committed.iter().map(|c| (c.position, c.token)).collect();
        let joint = if assignment.is_empty() {
            Nats::ZERO
        } else {
            oracle.conditional_joint_logprob(&seq, &assignment)?
        };
        round_joint.push(joint);
        round_epsilon.push(abs_gap(joint, m));
        let mut tokens = seq.generated().to_vec();
        for &(p, t) in &assignment {
            tokens[p - seq.prompt_len()] = t;
        }
        seq = seq.filled(&tokens);
    }
    let epsilon = abs_gap(total_nats, marginal_nats);
    let sum_eps: Nats = round_epsilon.iter().copied().sum();
    let triangle_holds = epsilon.is_infinite() || epsilon.value() <= sum_eps.value() + NATS_TOL;
    Ok(EpsilonReport {
        total_nats,
        marginal_nats,
        epsilon,
        round_joint,
        round_epsilon,
        triangle_holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Report {
    /// `Some(ok)` for checked exploit rounds, `None` for exempt rounds.
    pub per_round: Vec<Option<bool>>,
    /// Largest `(1 + |A|)(1 - p) - f` over checked rounds (negative when all
    /// comply; `-inf` when nothing was checked).
    pub max_violation: f64,
}

impl Assumption1Report {
    pub fn all_hold(&self) -> bool {
        self.per_round.iter().all(|r| r.unwrap_or(true))
    }
}

/// Largest `(1 + |A|)(1 - p_i) - f` over a round's commits.
pub fn assumption_1_slack(round: &RoundRecord, f: f64) -> f64 {
    let a = round.committed.len() as f64;
    round
        .committed
        .iter()
        .map(|c| (1.0 + a) * (1.0 - c.confidence) - f)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Checks `(1 + |A_r|)(1 - p) <= f` on exploit rounds; exploration,
/// cleanup and vanilla rounds are exempt.
pub fn check_assumption_1(trace: &DecodeTrace, f: f64) -> Assumption1Report {
    let mut max_violation = f64::NEG_INFINITY;
    let per_round = trace
        .rounds
        .iter()
        .map(|r| {
            if r.kind != RoundKind::Exploit {
                return None;
            }
            let v = assumption_1_slack(r, f);
            max_violation = max_violation.max(v);
            Some(v <= 0.0)
        })
        .collect();
    Assumption1Report {
        per_round,
        max_violation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub term_entropy: f64,
    pub term_budget: f64,
    pub bound: f64,
}

/// `max(nats / ln((n + 1) / ((1 - f) n + 1)), max(0, nats - eps) / f)`.
pub fn theorem1_bound(total_nats: f64, epsilon: f64, n: usize, f: f64) -> Result<BoundTerms, InfoError> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(InfoError::InapplicableFactor(f));
    }
    if n == 0 {
        return Err(InfoError::EmptySequence);
    }
    let n = n as f64;
    let per_round = ((n + 1.0) / ((1.0 - f) * n + 1.0)).ln();
    let term_entropy = total_nats / per_round;
    let term_budget = (total_nats - epsilon).max(0.0) / f;
    Ok(BoundTerms {
        term_entropy,
        term_budget,
        bound: term_entropy.max(term_budget),
    })
}

/// Most joint nats a round of `size` tokens can carry under the assumption.
pub fn per_round_cap(size: usize, f: f64) -> f64 {
    let a = size as f64;
    ((1.0 + a) / (1.0 + (1.0 - f) * a)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantBound {
    pub nats: f64,
    pub epsilon: f64,
    pub rounds: usize,
    #[serde(flatten)]
    pub terms: BoundTerms,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub f: f64,
    pub n: usize,
    /// `-ln p(x)`.
    pub total_nats: Nats,
    pub epsilon_total: Nats,
    pub term_entropy: f64,
    pub term_budget: f64,
    pub bound: f64,
    pub rounds_total: usize,
    pub rounds_exploit: usize,
    /// Exploit-only margin `R_exploit - bound_exploit`.
    pub margin: f64,
    pub pass: bool,
    /// All rounds against the full-sequence bound; informational, since
    /// exploration rounds are not held to the assumption.
    pub total: VariantBound,
    /// Exploit rounds only: their exact joint nats and their own epsilon.
    pub exploit: VariantBound,
    /// Exploit rounds whose joint nats exceed the per-round cap.
    pub cap_violations: Vec<usize>,
}

/// Bound check for one completed trace on an exact oracle.
///
/// Exploit nats are the total minus every non-exploit round's exact joint
/// nats; exploit epsilon is `|joint - marginal|` summed over exploit rounds
/// first. `pass` is `margin >= -1e-9` on that variant.
pub fn bound_report(trace: &DecodeTrace, oracle: &dyn OracleModel, f: f64) -> Result<BoundReport, InfoError> {
    let eps = epsilon_total(trace, oracle)?;
    bound_report_from(trace, &eps, f)
}

pub fn bound_report_from(trace: &DecodeTrace, eps: &EpsilonReport, f: f64) -> Result<BoundReport, InfoError> {
    let n = trace.gen_len;
    let total_nats = eps.total_nats;
    let totals = theorem1_bound(total_nats.value(), eps.epsilon.value(), n, f)?;
    let mut exploit_joint = 0.0;
    let mut exploit_marginal = 0.0;
    let mut rounds_exploit = 0;
    let mut cap_violations = Vec::new();
    for (i, r) in trace.rounds.iter().enumerate() {
        if r.kind != RoundKind::Exploit {
            continue;
        }
        rounds_exploit += 1;
        let j = eps.round_joint[i].value();
        exploit_joint += j;
        exploit_marginal += round_marginal_nats(r)?;
        if !r.committed.is_empty() && j > per_round_cap(r.size(), f) + NATS_TOL {
            cap_violations.push(r.round);
        }
    }
    let exploit_eps = (exploit_joint - exploit_marginal).abs();
    let ex_terms = theorem1_bound(exploit_joint, exploit_eps, n, f)?;
    let exploit = VariantBound {
        nats: exploit_joint,
        epsilon: exploit_eps,
        rounds: rounds_exploit,
        terms: ex_terms,
        margin: rounds_exploit as f64 - ex_terms.bound,
    };
    let total = VariantBound {
        nats: total_nats.value(),
        epsilon: eps.epsilon.value(),
        rounds: trace.total_rounds(),
        terms: totals,
        margin: trace.total_rounds() as f64 - totals.bound,
    };
    Ok(BoundReport {
        f,
        n,
        total_nats,
        epsilon_total: eps.epsilon,
        term_entropy: totals.term_entropy,
        term_budget: totals.term_budget,
        bound: totals.bound,
        rounds_total: trace.total_rounds(),
        rounds_exploit,
        margin: exploit.margin,
        pass: exploit.margin >= -NATS_TOL,
        total,
        exploit,
        cap_violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetRound {
    pub round: usize,
    pub size: usize,
    /// Exact `p(x^A | x^C)`.
    pub joint_prob: f64,
    /// `1 - f |A| / (1 + |A|)`.
    pub lower: f64,
    pub margin: f64,
}

/// Exact round joints against `1 - f|A|/(1 + |A|)` on exploit rounds that
/// satisfy the assumption.
pub fn frechet_round_check(
    trace: &DecodeTrace,
    oracle: &dyn OracleModel,
    f: f64,
) -> Result<Vec<FrechetRound>, InfoError> {
    let eps = epsilon_total(trace, oracle)?;
    Ok(trace
        .rounds
        .iter()
        .zip(&eps.round_joint)
        .filter(|(r, _)| r.kind == RoundKind::Exploit && !r.committed.is_empty() && assumption_1_slack(r, f) <= 0.0)
        .map(|(r, j)| {
            let a = r.size() as f64;
            let joint_prob = j.prob();
            let lower = 1.0 - f * a / (1.0 + a);
            FrechetRound {
                round: r.round,
                size: r.size(),
                joint_prob,
                lower,
                margin: joint_prob - lower,
            }
        })
        .collect())
}

/// Left-to-right chain `sum_i -ln p(x_i | x_<i)` through single-position
/// conditional queries; later window positions stay masked.
pub fn sequential_rescore(oracle: &dyn OracleModel, full: &MaskedSequence) -> Result<Nats, InfoError> {
    if !full.is_complete() {
        return Err(InfoError::IncompleteTrace);
    }
    let window = full.window();
    let mut tokens = vec![full.mask_id(); full.gen_len()];
    let mut total = Nats::ZERO;
    for (i, p) in window.enumerate() {
        let seq = full.filled(&tokens);
        let report = oracle.conditional_marginals(&seq, &[p])?;
        let tok = full.tokens()[p];
        let prob = report.get(p).expect("queried")[tok as usize];
        total = total + Nats::from_prob(prob);
        if total.is_infinite() {
            return Ok(total);
        }
        tokens[i] = tok;
    }
    Ok(total)
}

/// Greedy tokens obtained by committing `order` one position at a time.
pub fn sequential_greedy(
    oracle: &dyn OracleModel,
    seq: &MaskedSequence,
    order: &[usize],
) -> Result<Vec<TokenId>, OracleError> {
    let mut generated = seq.generated().to_vec();
    let mut out = Vec::with_capacity(order.len());
    for &p in order {
        let cur = seq.filled(&generated);
        let report = oracle.conditional_marginals(&cur, &[p])?;
        let (tok, _) = argmax(report.get(p).expect("queried"));
        generated[p - seq.prompt_len()] = tok;
        out.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub rounds_checked: usize,
    pub mismatches: usize,
}

/// For every exploit round satisfying the assumption with `f`, replays its
/// commits sequentially (ascending and descending positions) and compares
/// with the parallel greedy tokens.
pub fn greedy_replay_check(
    trace: &DecodeTrace,
    oracle: &dyn OracleModel,
    f: f64,
) -> Result<ReplayReport, OracleError> {
    let mut rep = ReplayReport::default();
    let mut seq = trace.initial_seq();
    for r in &trace.rounds {
        if r.kind == RoundKind::Exploit && r.size() > 1 && assumption_1_slack(r, f) <= 0.0 {
            rep.rounds_checked += 1;
            let mut order: Vec<usize> = r.positions().collect();
            order.sort_unstable();
            let want: Vec<TokenId> = order
                .iter()
                .map(|p| r.committed.iter().find(|c| c.position == *p).expect("present").token)
                .collect();
            let fwd = sequential_greedy(oracle, &seq, &order)?;
            order.reverse();
            let mut back = sequential_greedy(oracle, &seq, &order)?;
            back.reverse();
            if fwd != want || back != want {
                rep.mismatches += 1;
            }
        }
        let mut tokens = seq.generated().to_vec();
        for c in &r.committed {
            tokens[c.position - seq.prompt_len()] = c.token;
        }
        seq = seq.filled(&tokens);
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub rounds_pct: f64,
    pub nats_pct: f64,
    /// `nats_pct / rounds_pct`; absent when either side is undefined.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// Implicit and targeted exploration rounds.
    pub exploration: CategoryShare,
    /// Exploit, cleanup and vanilla rounds.
    pub exploitation: CategoryShare,
    pub traces: usize,
    /// Traces with positive marginal nats; only these enter the nats shares.
    pub traces_with_nats: usize,
}

/// Per-trace round and marginal-nats shares of each category, averaged over
/// traces.
pub fn decompose_efficiency(traces: &[DecodeTrace]) -> Result<EfficiencyReport, InfoError> {
    if traces.is_empty() {
        return Err(InfoError::NoTraces);
    }
    let (mut r_explore, mut r_count) = (0.0, 0usize);
    let (mut n_explore, mut n_count) = (0.0, 0usize);
    for t in traces {
        if !t.rounds.is_empty() {
            let ex = t.rounds.iter().filter(|r| r.kind.is_exploration()).count();
            r_explore += ex as f64 / t.rounds.len() as f64;
            r_count += 1;
        }
        let mut ex_nats = 0.0;
        let mut all_nats = 0.0;
        for r in &t.rounds {
            let m = round_marginal_nats(r)?;
            all_nats += m;
            if r.kind.is_exploration() {
                ex_nats += m;
            }
        }
        if all_nats > 0.0 {
            n_explore += ex_nats / all_nats;
            n_count += 1;
        }
    }
    let pct = |sum: f64, count: usize| (count > 0).then(|| 100.0 * sum / count as f64);
    let rounds_ex = pct(r_explore, r_count);
    let nats_ex = pct(n_explore, n_count);
    let share = |rounds: Option<f64>, nats: Option<f64>| CategoryShare {
        rounds_pct: rounds.unwrap_or(0.0),
        nats_pct: nats.unwrap_or(0.0),
        ratio: match (rounds, nats) {
            (Some(r), Some(n)) if r > 0.0 => Some(n / r),
            _ => None,
        },
    };
    Ok(EfficiencyReport {
        exploration: share(rounds_ex, nats_ex),
        exploitation: share(rounds_ex.map(|x| 100.0 - x), nats_ex.map(|x| 100.0 - x)),
        traces: traces.len(),
        traces_with_nats: n_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::TabularJointOracle;
    use crate::sequence::Vocabulary;
    use crate::trace::Commit;

    fn round(kind: RoundKind, confs: &[(usize, f64)]) -> RoundRecord {
        RoundRecord {
            round: 0,
            kind,
            committed: confs
                .iter()
                .map(|&(position, confidence)| Commit {
                    position,
                    token: 0,
                    confidence,
                })
                .collect(),
            forward_passes: 1,
            steps: 1,
            nats_marginal: confs.iter().map(|c| -c.1.ln()).sum(),
            nats_joint: None,
            epsilon_r: None,
        }
    }

    #[test]
    fn marginal_nats_examples() {
        assert_eq!(round_marginal_nats(&round(RoundKind::Exploit, &[(0, 1.0)])).unwrap(), 0.0);
        let two = round_marginal_nats(&round(RoundKind::Exploit, &[(0, 0.5), (1, 0.5)])).unwrap();
        assert!((two - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(round_marginal_nats(&round(RoundKind::Exploit, &[])).unwrap(), 0.0);
        assert!(round_marginal_nats(&round(RoundKind::Exploit, &[(3, 0.0)])).is_err());
    }

    #[test]
    fn assumption_examples() {
        let ok = round(RoundKind::Exploit, &[(0, 0.95), (1, 0.93)]);
        assert!((3.0f64 * 0.07 - 0.21).abs() < 1e-12);
        assert!(assumption_1_slack(&ok, 0.4) <= 0.0);
        let bad = round(RoundKind::Exploit, &[(0, 0.7)]);
        assert!(assumption_1_slack(&bad, 0.4) > 0.0);
        assert_eq!(assumption_1_slack(&round(RoundKind::Exploit, &[]), 0.4), f64::NEG_INFINITY);
    }

    #[test]
    fn bound_examples() {
        assert_eq!(theorem1_bound(0.0, 0.0, 10, 0.5).unwrap().bound, 0.0);
        let t = theorem1_bound(2.0, 0.1, 4, 0.5).unwrap();
        let te = 2.0 / (5.0f64 / 3.0).ln();
        assert!((t.term_entropy - te).abs() < 1e-12 && (te - 3.915).abs() < 1e-3);
        assert!((t.term_budget - 3.8).abs() < 1e-12);
        assert_eq!(t.bound, t.term_entropy);
        let f1 = theorem1_bound(3.0, 0.0, 7, 1.0).unwrap();
        assert!((f1.term_entropy - 3.0 / 8f64.ln()).abs() < 1e-12);
        assert!(matches!(theorem1_bound(1.0, 0.0, 4, 1.2), Err(InfoError::InapplicableFactor(_))));
        assert!(theorem1_bound(1.0, 0.0, 4, 0.0).is_err());
    }

    #[test]
    fn frechet_lower_bound_value() {
        let (a, f) = (3.0, 0.6);
        assert!((1.0f64 - f * a / (1.0 + a) - 0.55).abs() < 1e-12);
    }

    fn trace_of(rounds: Vec<RoundRecord>) -> DecodeTrace {
        DecodeTrace {
            scheduler: "test".into(),
            config: serde_json::Value::Null,
            vocab: Vocabulary::new(2).unwrap(),
            prompt: vec![],
            gen_len: 10,
            block_len: 10,
            seed: 0,
            final_tokens: vec![0; 10],
            rounds,
        }
    }

    #[test]
    fn decomposition_examples() {
        let all_exploit = trace_of(vec![round(RoundKind::Exploit, &[(0, 0.5)]); 3]);
        let rep = decompose_efficiency(&[all_exploit]).unwrap();
        assert_eq!(rep.exploitation.rounds_pct, 100.0);
        assert_eq!(rep.exploitation.nats_pct, 100.0);
        assert_eq!(rep.exploitation.ratio, Some(1.0));

        let mut rounds = vec![round(RoundKind::TargetedExplore, &[(0, 0.25)])];
        rounds.extend((1..10).map(|p| round(RoundKind::Exploit, &[(p, 1.0)])));
        let rep = decompose_efficiency(&[trace_of(rounds)]).unwrap();
        assert!((rep.exploration.ratio.unwrap() - 10.0).abs() < 1e-9);

        let zero = trace_of(vec![round(RoundKind::Exploit, &[(0, 1.0)])]);
        let rep = decompose_efficiency(&[zero]).unwrap();
        assert_eq!(rep.exploration.ratio, None);
        assert_eq!(rep.exploitation.ratio, None);
        assert!(decompose_efficiency(&[]).is_err());
    }

    #[test]
    fn parity_parallel_round_has_ln2_gap() {
        let v = Vocabulary::new(2).unwrap();
        let o = TabularJointOracle::uniform(v, vec![vec![0, 0, 0], vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]]).unwrap();
        let mut first = round(RoundKind::Exploit, &[(0, 0.5)]);
        first.committed[0].token = 0;
        let mut second = round(RoundKind::Exploit, &[(1, 0.5), (2, 0.5)]);
        second.round = 1;
        second.committed[0].token = 1;
        second.committed[1].token = 1;
        let mut t = trace_of(vec![first, second]);
        t.gen_len = 3;
        t.block_len = 3;
        t.final_tokens = vec![0, 1, 1];
        let eps = epsilon_total(&t, &o).unwrap();
        assert!((eps.round_joint[1].value() - 2f64.ln()).abs() < 1e-12);
        assert!((eps.round_epsilon[1].value() - 2f64.ln()).abs() < 1e-12);
        assert!((eps.total_nats.value() - 4f64.ln()).abs() < 1e-12);
        assert!(eps.triangle_holds);
    }
}
