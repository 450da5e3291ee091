//! First-order Markov chain oracle with exact conditionals.
//!
//! Observed positions act as hard evidence; conditionals come from
//! scaled forward-backward message passing, so long chains do not
//! underflow.

use super::{Evidence, ExactModel, NORMALIZATION_TOL};
use crate::error::{ConfigError, OracleError};
use crate::sequence::{TokenId, Vocabulary};

#[derive(Debug, Clone)]
pub struct MarkovOracle {
    vocab: Vocabulary,
    n: usize,
    pi: Vec<f64>,
    transition: Vec<Vec<f64>>,
    ln_pi: Vec<f64>,
    ln_t: Vec<Vec<f64>>,
}

fn check_distribution(what: &str, p: &[f64], v: usize) -> Result<(), ConfigError> {
    if p.len() != v {
        return Err(ConfigError::invalid(format!("{what} has {} entries, vocabulary has {v}", p.len())));
    }
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(ConfigError::invalid(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(ConfigError::invalid(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

impl MarkovOracle {
    pub fn new(pi: Vec<f64>, transition: Vec<Vec<f64>>, n: usize) -> Result<Self, ConfigError> {
        if n == 0 {
            return Err(ConfigError::EmptyGeneration);
        }
        let vocab = Vocabulary::new(pi.len() as u32)?;
        check_distribution("initial distribution", &pi, pi.len())?;
        if transition.len() != pi.len() {
            return Err(ConfigError::invalid("transition matrix must be |V| x |V|"));
        }
        for (i, row) in transition.iter().enumerate() {
            check_distribution(&format!("transition row {i}"), row, pi.len())?;
        }
        let ln_pi = pi.iter().map(|p| p.ln()).collect();
        let ln_t = transition
            .iter()
            .map(|row| row.iter().map(|p| p.ln()).collect())
            .collect();
        Ok(Self {
            vocab,
            n,
            pi,
            transition,
            ln_pi,
            ln_t,
        })
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    #[inline]
    fn e(evidence: &Evidence, i: usize, x: usize) -> f64 {
        match evidence[i] {
            Some(o) if o as usize != x => 0.0,
            _ => 1.0,
        }
    }

    /// Scaled forward pass: each `alpha[i]` sums to one and the log
    /// normalizers accumulate into `ln p(evidence)`. `None` when the evidence
    /// has probability zero.
    fn forward(&self, evidence: &Evidence) -> Option<(Vec<Vec<f64>>, f64)> {
        let v = self.vocab.len();
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(self.n);
        let mut ln_z = 0.0;
        let mut cur: Vec<f64> = (0..v).map(|x| self.pi[x] * Self::e(evidence, 0, x)).collect();
        for i in 0..self.n {
            if i > 0 {
                let prev = &alpha[i - 1];
                cur = vec![0.0; v];
                for (x, &px) in prev.iter().enumerate() {
                    if px == 0.0 {
                        continue;
                    }
                    for (c, &t) in cur.iter_mut().zip(&self.transition[x]) {
                        *c += px * t;
                    }
                }
                for (y, c) in cur.iter_mut().enumerate() {
                    *c *= Self::e(evidence, i, y);
                }
            }
            let s: f64 = cur.iter().sum();
            if s <= 0.0 {
                return None;
            }
            cur.iter_mut().for_each(|c| *c /= s);
            ln_z += s.ln();
            alpha.push(std::mem::take(&mut cur));
        }
        Some((alpha, ln_z))
    }

    /// Backward messages, each rescaled to sum to one.
    fn backward(&self, evidence: &Evidence) -> Vec<Vec<f64>> {
        let v = self.vocab.len();
        let mut beta = vec![vec![1.0; v]; self.n];
        for i in (0..self.n.saturating_sub(1)).rev() {
            let next: Vec<f64> = (0..v).map(|y| Self::e(evidence, i + 1, y) * beta[i + 1][y]).collect();
            let row = &mut beta[i];
            for (x, b) in row.iter_mut().enumerate() {
                *b = self.transition[x].iter().zip(&next).map(|(t, n)| t * n).sum();
            }
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|b| *b /= s);
            }
        }
        beta
    }

    /// Exact `p(x^q | pinned)` per query via forward-backward.
    pub fn markov_conditionals(
        &self,
        evidence: &Evidence,
        queries: &[usize],
    ) -> Result<Vec<Vec<f64>>, OracleError> {
        if let Some(&q) = queries.iter().find(|&&q| evidence[q].is_some()) {
            return Err(OracleError::NotMasked(q));
        }
        let Some((alpha, _)) = self.forward(evidence) else {
            return Err(OracleError::ImpossibleEvidence);
        };
        let beta = self.backward(evidence);
        Ok(queries
            .iter()
            .map(|&q| {
                let mut probs: Vec<f64> = alpha[q].iter().zip(&beta[q]).map(|(a, b)| a * b).collect();
                let s: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= s);
                probs
            })
            .collect())
    }

    /// Most probable complete sequence (Viterbi), ties to lower token ids.
    pub fn map_sequence(&self) -> Vec<TokenId> {
        let v = self.vocab.len();
        let mut score = self.ln_pi.clone();
        let mut back = vec![vec![0usize; v]; self.n];
        for b in back.iter_mut().skip(1) {
            let next: Vec<f64> = (0..v)
                .map(|y| {
                    let (arg, best) = (0..v)
                        .map(|x| (x, score[x] + self.ln_t[x][y]))
                        .fold((0, f64::NEG_INFINITY), |a, c| if c.1 > a.1 { c } else { a });
                    b[y] = arg;
                    best
                })
                .collect();
            score = next;
        }
        let mut last = (0..v).fold(0, |a, x| if score[x] > score[a] { x } else { a });
        let mut out = vec![0; self.n];
        for i in (0..self.n).rev() {
            out[i] = last as TokenId;
            last = back[i][last];
        }
        out
    }
}

impl ExactModel for MarkovOracle {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn gen_len(&self) -> usize {
        self.n
    }

    fn sequence_ln_prob(&self, tokens: &[TokenId]) -> f64 {
        let mut lp = self.pi[tokens[0] as usize].ln();
        for w in tokens.windows(2) {
            lp += self.transition[w[0] as usize][w[1] as usize].ln();
        }
        lp
    }

    fn ln_evidence(&self, evidence: &Evidence) -> f64 {
        self.forward(evidence).map_or(f64::NEG_INFINITY, |(_, ln_z)| ln_z)
    }

    fn posteriors(&self, evidence: &Evidence, queries: &[usize]) -> Result<Vec<Vec<f64>>, OracleError> {
        self.markov_conditionals(evidence, queries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{enumerate_ln_evidence, enumerate_posteriors, posteriors_via_evidence, OracleModel};
    use crate::sequence::{MaskedSequence, MASK};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_chain(rng: &mut ChaCha8Rng, v: usize, n: usize) -> MarkovOracle {
        let row = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..v).map(|_| rng.gen::<f64>().powi(3)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let pi = row(rng);
        let t = (0..v).map(|_| row(rng)).collect();
        MarkovOracle::new(pi, t, n).unwrap()
    }

    #[test]
    fn no_pins_gives_chain_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_chain(&mut rng, 3, 5);
        let ev = vec![None; 5];
        let post = m.markov_conditionals(&ev, &[0, 1, 2, 3, 4]).unwrap();
        let mut marg = m.pi.clone();
        for (j, dist) in post.iter().enumerate() {
            if j > 0 {
                marg = (0..3).map(|y| (0..3).map(|x| marg[x] * m.transition[x][y]).sum()).collect();
            }
            for (a, b) in dist.iter().zip(&marg) {
                assert!((a - b).abs() < 1e-12, "position {j}");
            }
        }
    }

    #[test]
    fn identity_chain_is_deterministic() {
        let m = MarkovOracle::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 3).unwrap();
        let seq = MaskedSequence::from_generated(&[], &[0, MASK, MASK], 3, m.vocab).unwrap();
        let rep = m.conditional_marginals(&seq, &[1]).unwrap();
        assert_eq!(rep.get(1).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn both_neighbours_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_chain(&mut rng, 3, 3);
        let (l, r) = (2usize, 1usize);
        let post = m.markov_conditionals(&[Some(l as u32), None, Some(r as u32)], &[1]).unwrap();
        let w: Vec<f64> = (0..3).map(|y| m.transition[l][y] * m.transition[y][r]).collect();
        let z: f64 = w.iter().sum();
        for y in 0..3 {
            assert!((post[0][y] - w[y] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_chain_surprisal() {
        let m = MarkovOracle::new(vec![0.5, 0.5], vec![vec![0.5, 0.5]; 2], 3).unwrap();
        let seq = MaskedSequence::from_generated(&[], &[1, 0, 1], 3, m.vocab).unwrap();
        let nats = m.joint_logprob(&seq).unwrap();
        assert!((nats.value() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn impossible_evidence_is_signalled() {
        let m = MarkovOracle::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 3).unwrap();
        let err = m.markov_conditionals(&[Some(1), None, None], &[1]).unwrap_err();
        assert!(matches!(err, OracleError::ImpossibleEvidence));
    }

    #[test]
    fn long_chain_does_not_underflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_chain(&mut rng, 16, 2000);
        let mut ev = vec![None; 2000];
        for i in (0..2000).step_by(7) {
            ev[i] = Some(rng.gen_range(0..16));
        }
        let le = m.ln_evidence(&ev);
        assert!(le.is_finite() && le < -100.0);
        let post = m.markov_conditionals(&ev, &[1000]).unwrap();
        assert!((post[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_enumeration_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let v = rng.gen_range(2..=4);
            let n = rng.gen_range(1..=6);
            let m = random_chain(&mut rng, v, n);
            let ev: Vec<Option<u32>> = (0..n)
                .map(|_| rng.gen_bool(0.4).then(|| rng.gen_range(0..v as u32)))
                .collect();
            let queries: Vec<usize> = (0..n).filter(|&i| ev[i].is_none()).collect();
            let Some(slow) = enumerate_posteriors(&m, &ev, &queries) else { continue };
            let fast = m.markov_conditionals(&ev, &queries).unwrap();
            let ratio = posteriors_via_evidence(&m, &ev, &queries).unwrap();
            for ((a, b), c) in fast.iter().flatten().zip(slow.iter().flatten()).zip(ratio.iter().flatten()) {
                assert!((a - b).abs() < 1e-9 && (c - b).abs() < 1e-9);
            }
            assert!((m.ln_evidence(&ev) - enumerate_ln_evidence(&m, &ev)).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_finds_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_chain(&mut rng, 3, 5);
        let map = m.map_sequence();
        let best = m.sequence_ln_prob(&map);
        let mut tokens = vec![0u32; 5];
        for mut code in 0..243u32 {
            for t in tokens.iter_mut() {
                *t = code % 3;
                code /= 3;
            }
            assert!(m.sequence_ln_prob(&tokens) <= best + 1e-12);
        }
    }
}
