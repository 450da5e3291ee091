//! Reference decoders: the one-token any-order sampler and confidence-based
//! block diffusion with the three selection rules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DecodeError, OracleError};
use crate::oracle::{argmax, MarginalReport, OracleModel, Prediction};
use crate::sequence::{DecodeState, TokenId};
use crate::trace::{Commit, DecodeTrace, Recorder, RoundKind};

/// Slack applied to the strict inequality of the dynamic rule so products
/// that equal `f` up to rounding are rejected.
pub const DYNAMIC_RULE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionRule {
    FixedK { k: usize },
    StaticThreshold { c: f64 },
    DynamicThreshold { f: f64 },
}

impl SelectionRule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            SelectionRule::FixedK { k } if k == 0 => Err(ConfigError::invalid("k must be at least 1")),
            SelectionRule::StaticThreshold { c } if !(c > 0.0 && c < 1.0) => {
                Err(ConfigError::invalid(format!("threshold C = {c} must lie in (0, 1)")))
            }
            SelectionRule::DynamicThreshold { f } if !(f > 0.0 && f <= 1.2) => {
                Err(ConfigError::invalid(format!("factor f = {f} must lie in (0, 1.2]")))
            }
            _ => Ok(()),
        }
    }

    pub fn select(&self, candidates: &[Prediction]) -> Vec<Prediction> {
        match *self {
            SelectionRule::FixedK { k } => select_fixed_k(candidates, k),
            SelectionRule::StaticThreshold { c } => select_static_threshold(candidates, c),
            SelectionRule::DynamicThreshold { f } => select_dynamic_threshold(candidates, f),
        }
    }
}

/// Token choice at a committed position.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeMode {
    #[default]
    Greedy,
    /// Samples from the tempered marginal; the recorded confidence is the
    /// untempered probability of the drawn token.
    Sample { temperature: f64 },
}

/// Descending confidence, lower position first on ties.
pub(crate) fn by_confidence(candidates: &[Prediction]) -> Vec<Prediction> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.position.cmp(&b.position))
    });
    sorted
}

pub fn select_fixed_k(candidates: &[Prediction], k: usize) -> Vec<Prediction> {
    let mut sorted = by_confidence(candidates);
    sorted.truncate(k);
    sorted
}

pub fn select_static_threshold(candidates: &[Prediction], c: f64) -> Vec<Prediction> {
    candidates.iter().filter(|p| p.confidence > c).copied().collect()
}

/// Largest `k` with `(k + 1)(1 - c_(k)) < f`; may be zero.
pub fn select_dynamic_threshold(candidates: &[Prediction], f: f64) -> Vec<Prediction> {
    let mut sorted = by_confidence(candidates);
    let k = (1..=sorted.len())
        .filter(|&k| (k as f64 + 1.0) * (1.0 - sorted[k - 1].confidence) < f - DYNAMIC_RULE_SLACK)
        .max()
        .unwrap_or(0);
    sorted.truncate(k);
    sorted
}

/// Highest-confidence prediction, lower position on ties.
pub(crate) fn most_confident(candidates: &[Prediction]) -> Option<Prediction> {
    by_confidence(candidates).into_iter().next()
}

pub(crate) fn draw(probs: &[f64], mode: DecodeMode, rng: &mut ChaCha8Rng) -> (TokenId, f64) {
    match mode {
        DecodeMode::Greedy => {
            let (t, p) = argmax(probs);
            (t, p.min(1.0))
        }
        DecodeMode::Sample { temperature } => {
            let inv = 1.0 / temperature.max(1e-6);
            let w: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { p.powf(inv) } else { 0.0 }).collect();
            let z: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * z;
            let mut pick = argmax(probs).0 as usize;
            for (i, wi) in w.iter().enumerate() {
                if *wi > 0.0 {
                    pick = i;
                    if u < *wi {
                        break;
                    }
                    u -= wi;
                }
            }
            (pick as TokenId, probs[pick].min(1.0))
        }
    }
}

fn to_commit(p: Prediction) -> Commit {
    Commit {
        position: p.position,
        token: p.token,
        confidence: p.confidence,
    }
}

/// Predictions for the selected positions, resampled when not greedy.
fn commits_for(
    report: &MarginalReport,
    chosen: &[Prediction],
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Vec<Commit> {
    chosen
        .iter()
        .map(|p| match mode {
            DecodeMode::Greedy => to_commit(*p),
            DecodeMode::Sample { .. } => {
                let (token, confidence) = draw(report.get(p.position).expect("queried"), mode, rng);
                Commit {
                    position: p.position,
                    token,
                    confidence,
                }
            }
        })
        .collect()
}

/// One token per round in a seeded uniformly random order.
pub fn vanilla_any_order_run(
    oracle: &dyn OracleModel,
    mut state: DecodeState,
    seed: u64,
    mode: DecodeMode,
) -> Result<DecodeTrace, DecodeError> {
    let config = serde_json::json!({ "decode": mode, "order_seed": seed });
    let mut rec = Recorder::new(oracle, &state, "vanilla", config);
    let mut order: Vec<usize> = state.seq().window().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for pos in order {
        let step = (|| -> Result<(), OracleError> {
            let report = oracle.conditional_marginals(state.seq(), &[pos])?;
            let (token, confidence) = draw(report.get(pos).expect("queried"), mode, &mut rng);
            let commit = Commit {
                position: pos,
                token,
                confidence,
            };
            rec.record(&mut state, RoundKind::Vanilla, vec![commit], 1, 1)
        })();
        if let Err(e) = step {
            return Err(rec.fail(&state, e));
        }
    }
    Ok(rec.finish(&state))
}

/// Confidence-based block diffusion: blocks left to right, one forward pass
/// per round over the active block, commit per `rule`, otherwise the single
/// most confident token.
pub fn run_block_diffusion(
    oracle: &dyn OracleModel,
    mut state: DecodeState,
    rule: SelectionRule,
    mode: DecodeMode,
) -> Result<DecodeTrace, DecodeError> {
    let config = serde_json::json!({ "selection": rule, "decode": mode });
    let mut rec = Recorder::new(oracle, &state, "alg1", config);
    let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed());
    for b in 1..=state.seq().num_blocks() {
        state.set_active_block(b);
        loop {
            let masked: Vec<usize> = state.masked_in_block(b).collect();
            if masked.is_empty() {
                break;
            }
            let step = (|| -> Result<(), OracleError> {
                let report = oracle.conditional_marginals(state.seq(), &masked)?;
                let preds = report.predictions();
                let chosen = rule.select(&preds);
                let (kind, chosen) = if chosen.is_empty() {
                    let top = most_confident(&preds).expect("block has masked positions");
                    (RoundKind::ImplicitExplore, vec![top])
                } else {
                    (RoundKind::Exploit, chosen)
                };
                let commits = commits_for(&report, &chosen, mode, &mut rng);
                rec.record(&mut state, kind, commits, 1, 1)
            })();
            if let Err(e) = step {
                return Err(rec.fail(&state, e));
            }
        }
    }
    Ok(rec.finish(&state))
}

/// Schedulers expect an all-masked starting state.
pub fn check_fresh(state: &DecodeState) -> Result<(), ConfigError> {
    if !state.is_fresh() {
        return Err(ConfigError::invalid("decoding must start from an all-masked state"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{build_template_oracle, TabularJointOracle};
    use crate::sequence::{make_initial_state, Vocabulary};

    fn preds(cs: &[(usize, f64)]) -> Vec<Prediction> {
        cs.iter()
            .map(|&(position, confidence)| Prediction {
                position,
                token: 0,
                confidence,
            })
            .collect()
    }

    fn positions(ps: &[Prediction]) -> Vec<usize> {
        ps.iter().map(|p| p.position).collect()
    }

    #[test]
    fn fixed_k_examples() {
        let c = preds(&[(1, 0.9), (2, 0.8), (3, 0.7)]);
        assert_eq!(positions(&select_fixed_k(&c, 2)), vec![1, 2]);
        assert_eq!(select_fixed_k(&c, 5).len(), 3);
        let tie = preds(&[(4, 0.5), (2, 0.5)]);
        assert_eq!(positions(&select_fixed_k(&tie, 1)), vec![2]);
    }

    #[test]
    fn static_threshold_examples() {
        let c = preds(&[(0, 0.95), (1, 0.85), (2, 0.91)]);
        assert_eq!(positions(&select_static_threshold(&c, 0.9)), vec![0, 2]);
        assert!(select_static_threshold(&preds(&[(0, 0.5)]), 0.9).is_empty());
        assert!(select_static_threshold(&preds(&[(0, 0.9)]), 0.9).is_empty());
    }

    #[test]
    fn dynamic_threshold_examples() {
        let c = preds(&[(0, 0.99), (1, 0.97), (2, 0.90), (3, 0.50)]);
        // independent check of the rule: largest k with (k+1)(1-c_k) < f
        let mut want = 0;
        for k in 1..=4 {
            let ck = [0.99, 0.97, 0.90, 0.50][k - 1];
            if ((k + 1) as f64) * (1.0 - ck) < 0.4 - 1e-12 {
                want = k;
            }
        }
        assert_eq!(want, 2);
        assert_eq!(positions(&select_dynamic_threshold(&c, 0.4)), vec![0, 1]);
        assert_eq!(select_dynamic_threshold(&preds(&[(0, 0.9)]), 0.4).len(), 1);
        assert!(select_dynamic_threshold(&preds(&[(0, 0.8), (1, 0.7)]), 0.4).is_empty());
    }

    #[test]
    fn rule_validation() {
        assert!(SelectionRule::FixedK { k: 0 }.validate().is_err());
        assert!(SelectionRule::StaticThreshold { c: 1.0 }.validate().is_err());
        assert!(SelectionRule::DynamicThreshold { f: 1.2 }.validate().is_ok());
        assert!(SelectionRule::DynamicThreshold { f: 1.3 }.validate().is_err());
    }

    fn point_mass(target: &[TokenId], v: u32) -> TabularJointOracle {
        TabularJointOracle::new(Vocabulary::new(v).unwrap(), target.len(), vec![(target.to_vec(), 1.0)]).unwrap()
    }

    #[test]
    fn vanilla_is_a_permutation() {
        let o = point_mass(&[1, 0, 2, 2, 1], 3);
        for seed in 0..5 {
            let s = make_initial_state(&[], 5, 5, o.vocab(), seed).unwrap();
            let t = vanilla_any_order_run(&o, s, seed, DecodeMode::Greedy).unwrap();
            assert_eq!(t.total_rounds(), 5);
            let mut order: Vec<usize> = t.rounds.iter().map(|r| r.committed[0].position).collect();
            order.sort();
            assert_eq!(order, vec![0, 1, 2, 3, 4]);
            assert_eq!(t.generated(), &[1, 0, 2, 2, 1]);
        }
        let s = make_initial_state(&[], 1, 1, o.vocab(), 0);
        assert!(s.is_ok());
    }

    #[test]
    fn point_mass_block_diffusion_one_round_per_block() {
        let o = point_mass(&[1, 0, 2, 2, 1, 0], 3);
        let s = make_initial_state(&[], 6, 2, o.vocab(), 0).unwrap();
        let t = run_block_diffusion(&o, s, SelectionRule::StaticThreshold { c: 0.5 }, DecodeMode::Greedy).unwrap();
        assert_eq!(t.total_rounds(), 3);
        assert_eq!(t.generated(), &[1, 0, 2, 2, 1, 0]);
        let s = make_initial_state(&[], 6, 6, o.vocab(), 0).unwrap();
        let t = run_block_diffusion(&o, s, SelectionRule::FixedK { k: 6 }, DecodeMode::Greedy).unwrap();
        assert_eq!(t.total_rounds(), 1);
    }

    #[test]
    fn template_takes_two_rounds() {
        let o = build_template_oracle(Vocabulary::new(4).unwrap(), vec![vec![0, 1, 2]], vec![0.25; 4], vec![]).unwrap();
        let s = make_initial_state(&[], 3, 3, o.vocab(), 0).unwrap();
        let t = run_block_diffusion(&o, s, SelectionRule::StaticThreshold { c: 0.9 }, DecodeMode::Greedy).unwrap();
        assert_eq!(t.total_rounds(), 2);
        assert_eq!(t.rounds[0].kind, RoundKind::ImplicitExplore);
        assert_eq!(t.rounds[0].committed[0].position, 0);
        assert_eq!(t.rounds[1].kind, RoundKind::Exploit);
        assert_eq!(t.rounds[1].size(), 2);
    }

    #[test]
    fn blocks_are_respected() {
        let v = Vocabulary::new(2).unwrap();
        let o = TabularJointOracle::independent(v, &vec![vec![0.7, 0.3]; 6]).unwrap();
        let s = make_initial_state(&[1], 6, 3, v, 0).unwrap();
        let t = run_block_diffusion(&o, s, SelectionRule::DynamicThreshold { f: 0.8 }, DecodeMode::Greedy).unwrap();
        let mut block = 1;
        for r in &t.rounds {
            let bs: Vec<usize> = r.positions().map(|p| (p - 1) / 3 + 1).collect();
            assert!(bs.iter().all(|&b| b == bs[0]));
            assert!(bs[0] >= block);
            block = bs[0];
        }
        assert!(t.is_complete());
    }
}
