use std::collections::HashMap;

use super::{Evidence, ExactModel, NORMALIZATION_TOL};
use crate::error::{ConfigError, OracleError};
use crate::sequence::{TokenId, Vocabulary};

/// Largest table size (`|V|^n`) accepted: 2^24 states.
pub const MAX_STATES: u64 = 1 << 24;

/// Explicit joint table over `V^n`, stored sparsely (zero rows omitted).
#[derive(Debug, Clone)]
pub struct TabularJointOracle {
    vocab: Vocabulary,
    n: usize,
    entries: Vec<(Vec<TokenId>, f64)>,
    index: HashMap<Vec<TokenId>, usize>,
    strictly_positive: bool,
}

fn state_count(vocab: Vocabulary, n: usize) -> Option<u64> {
    (vocab.size as u64).checked_pow(n as u32).filter(|&s| s <= MAX_STATES)
}

impl TabularJointOracle {
    pub fn new(
        vocab: Vocabulary,
        n: usize,
        entries: Vec<(Vec<TokenId>, f64)>,
    ) -> Result<Self, ConfigError> {
        if n == 0 {
            return Err(ConfigError::EmptyGeneration);
        }
        let states = state_count(vocab, n).ok_or_else(|| {
            ConfigError::invalid(format!(
                "table over {}^{} states exceeds the enumeration budget",
                vocab.size, n
            ))
        })?;
        let mut index = HashMap::with_capacity(entries.len());
        let mut kept = Vec::with_capacity(entries.len());
        let mut total = 0.0;
        for (tokens, p) in entries {
            if tokens.len() != n {
                return Err(ConfigError::invalid(format!(
                    "table row of length {} in a length-{n} table",
                    tokens.len()
                )));
            }
            if let Some(&t) = tokens.iter().find(|&&t| !vocab.contains(t)) {
                return Err(ConfigError::invalid(format!("token {t} outside vocabulary")));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(ConfigError::invalid(format!("probability {p} is not valid")));
            }
            total += p;
            if p == 0.0 {
                continue;
            }
            if index.insert(tokens.clone(), kept.len()).is_some() {
                return Err(ConfigError::invalid(format!("duplicate table row {tokens:?}")));
            }
            kept.push((tokens, p));
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(ConfigError::invalid(format!("table sums to {total}, expected 1")));
        }
        let strictly_positive = kept.len() as u64 == states;
        Ok(Self {
            vocab,
            n,
            entries: kept,
            index,
            strictly_positive,
        })
    }

    /// Normalizes a non-negative weight function over every sequence.
    pub fn from_fn(
        vocab: Vocabulary,
        n: usize,
        mut weight: impl FnMut(&[TokenId]) -> f64,
    ) -> Result<Self, ConfigError> {
        let states = state_count(vocab, n)
            .ok_or_else(|| ConfigError::invalid("table exceeds the enumeration budget"))?;
        let v = vocab.size as u64;
        let mut rows = Vec::new();
        let mut tokens = vec![0; n];
        for mut code in 0..states {
            for t in tokens.iter_mut() {
                *t = (code % v) as TokenId;
                code /= v;
            }
            let w = weight(&tokens);
            if w > 0.0 {
                rows.push((tokens.clone(), w));
            }
        }
        let z: f64 = rows.iter().map(|r| r.1).sum();
        if z <= 0.0 {
            return Err(ConfigError::invalid("weight function is zero everywhere"));
        }
        rows.iter_mut().for_each(|r| r.1 /= z);
        Self::new(vocab, n, rows)
    }

    /// Uniform distribution over the listed support.
    pub fn uniform(vocab: Vocabulary, support: Vec<Vec<TokenId>>) -> Result<Self, ConfigError> {
        let n = support.first().map(Vec::len).unwrap_or(0);
        let p = 1.0 / support.len() as f64;
        Self::new(vocab, n, support.into_iter().map(|s| (s, p)).collect())
    }

    /// Product of independent per-position distributions.
    pub fn independent(vocab: Vocabulary, marginals: &[Vec<f64>]) -> Result<Self, ConfigError> {
        if marginals.iter().any(|m| m.len() != vocab.len()) {
            return Err(ConfigError::invalid("marginal length differs from vocabulary size"));
        }
        Self::from_fn(vocab, marginals.len(), |x| {
            x.iter().zip(marginals).map(|(&t, m)| m[t as usize]).product()
        })
    }

    pub fn entries(&self) -> &[(Vec<TokenId>, f64)] {
        &self.entries
    }

    pub fn strictly_positive(&self) -> bool {
        self.strictly_positive
    }

    fn matching<'a>(&'a self, evidence: &'a Evidence) -> impl Iterator<Item = &'a (Vec<TokenId>, f64)> {
        self.entries.iter().filter(move |(row, _)| {
            row.iter()
                .zip(evidence)
                .all(|(t, e)| e.map_or(true, |e| e == *t))
        })
    }
}

impl ExactModel for TabularJointOracle {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn gen_len(&self) -> usize {
        self.n
    }

    fn sequence_ln_prob(&self, tokens: &[TokenId]) -> f64 {
        self.index
            .get(tokens)
            .map_or(f64::NEG_INFINITY, |&i| self.entries[i].1.ln())
    }

    fn ln_evidence(&self, evidence: &Evidence) -> f64 {
        let total: f64 = self.matching(evidence).map(|r| r.1).sum();
        total.ln()
    }

    fn posteriors(&self, evidence: &Evidence, queries: &[usize]) -> Result<Vec<Vec<f64>>, OracleError> {
        let v = self.vocab.len();
        let mut acc = vec![vec![0.0; v]; queries.len()];
        let mut total = 0.0;
        for (row, p) in self.matching(evidence) {
            total += p;
            for (qi, &q) in queries.iter().enumerate() {
                acc[qi][row[q] as usize] += p;
            }
        }
        if total <= 0.0 {
            return Err(OracleError::ImpossibleEvidence);
        }
        for dist in acc.iter_mut() {
            dist.iter_mut().for_each(|x| *x /= total);
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{enumerate_posteriors, OracleModel};
    use crate::sequence::{MaskedSequence, MASK};

    fn parity() -> TabularJointOracle {
        TabularJointOracle::uniform(
            Vocabulary::new(2).unwrap(),
            vec![vec![0, 0, 0], vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]],
        )
        .unwrap()
    }

    #[test]
    fn parity_conditional_is_forced() {
        let o = parity();
        let seq = MaskedSequence::from_generated(&[], &[0, 1, MASK], 3, o.vocab).unwrap();
        let rep = o.conditional_marginals(&seq, &[2]).unwrap();
        assert_eq!(rep.get(2).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_eight_has_ln8_surprisal() {
        let vocab = Vocabulary::new(2).unwrap();
        let support: Vec<Vec<u32>> = (0..8u32).map(|c| vec![c & 1, (c >> 1) & 1, c >> 2]).collect();
        let o = TabularJointOracle::uniform(vocab, support).unwrap();
        let seq = MaskedSequence::new(&[], 3, 1, vocab).unwrap().filled(&[1, 0, 1]);
        let nats = o.joint_logprob(&seq).unwrap();
        assert!((nats.value() - 8f64.ln()).abs() < 1e-12);
        assert!(o.strictly_positive());
    }

    #[test]
    fn zero_probability_is_infinite_not_error() {
        let o = parity();
        let seq = MaskedSequence::new(&[], 3, 1, o.vocab).unwrap().filled(&[1, 1, 1]);
        assert!(o.joint_logprob(&seq).unwrap().is_infinite());
        assert!(!o.strictly_positive());
    }

    #[test]
    fn rejects_unnormalized_and_duplicates() {
        let v = Vocabulary::new(2).unwrap();
        assert!(TabularJointOracle::new(v, 1, vec![(vec![0], 0.4)]).is_err());
        assert!(TabularJointOracle::new(v, 1, vec![(vec![0], 0.5), (vec![0], 0.5)]).is_err());
        assert!(TabularJointOracle::new(Vocabulary::new(16).unwrap(), 7, vec![]).is_err());
    }

    #[test]
    fn fast_path_matches_enumeration() {
        let v = Vocabulary::new(3).unwrap();
        let o = TabularJointOracle::from_fn(v, 4, |x| 1.0 + (x[0] * 3 + x[1] * x[2] + x[3]) as f64).unwrap();
        let ev = [Some(1), None, None, Some(2)];
        let fast = o.posteriors(&ev, &[1, 2]).unwrap();
        let slow = enumerate_posteriors(&o, &ev, &[1, 2]).unwrap();
        for (a, b) in fast.iter().flatten().zip(slow.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
