//! Weighted record tables laid out over the generation window.
//!
//! Each layout row is an independent draw of one record; field tokens land at
//! the row's positions in order. Conditionals are weighted counts over the
//! records that agree with what is already observed in that row.

use std::collections::BTreeSet;

use super::{Evidence, ExactModel, NORMALIZATION_TOL};
use crate::error::{ConfigError, OracleError};
use crate::sequence::{TokenId, Vocabulary};

#[derive(Debug, Clone)]
pub struct ProfileOracle {
    vocab: Vocabulary,
    n: usize,
    records: Vec<Vec<TokenId>>,
    weights: Vec<f64>,
    layout: Vec<Vec<usize>>,
    /// Window position -> (row, offset within record).
    slot: Vec<(usize, usize)>,
}

impl ProfileOracle {
    /// `layout[r]` lists the window positions of row `r`; together the rows
    /// must cover every position exactly once. Weights are normalized;
    /// `None` means uniform.
    pub fn new(
        vocab: Vocabulary,
        records: Vec<Vec<TokenId>>,
        weights: Option<Vec<f64>>,
        layout: Vec<Vec<usize>>,
    ) -> Result<Self, ConfigError> {
        let width = match records.first() {
            Some(r) if !r.is_empty() => r.len(),
            _ => return Err(ConfigError::invalid("record table is empty")),
        };
        if records.iter().any(|r| r.len() != width) {
            return Err(ConfigError::invalid("records have different lengths"));
        }
        if let Some(&t) = records.iter().flatten().find(|&&t| !vocab.contains(t)) {
            return Err(ConfigError::invalid(format!("token {t} outside vocabulary")));
        }
        let weights = match weights {
            None => vec![1.0 / records.len() as f64; records.len()],
            Some(w) => {
                if w.len() != records.len() {
                    return Err(ConfigError::invalid("one weight per record is required"));
                }
                if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return Err(ConfigError::invalid("record weights must be non-negative"));
                }
                let z: f64 = w.iter().sum();
                if z <= 0.0 {
                    return Err(ConfigError::invalid("record weights sum to zero"));
                }
                w.into_iter().map(|x| x / z).collect()
            }
        };
        let mut seen = BTreeSet::new();
        for row in &layout {
            if row.len() != width {
                return Err(ConfigError::invalid(format!(
                    "layout row has {} positions, records have {width} fields",
                    row.len()
                )));
            }
            for &p in row {
                if !seen.insert(p) {
                    return Err(ConfigError::DuplicatePosition(p));
                }
            }
        }
        let n = seen.len();
        if n == 0 {
            return Err(ConfigError::EmptyGeneration);
        }
        if seen.iter().next_back() != Some(&(n - 1)) {
            return Err(ConfigError::invalid("layout must cover positions 0..n without gaps"));
        }
        let mut slot = vec![(0, 0); n];
        for (r, row) in layout.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                slot[p] = (r, j);
            }
        }
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < NORMALIZATION_TOL);
        Ok(Self {
            vocab,
            n,
            records,
            weights,
            layout,
            slot,
        })
    }

    pub fn records(&self) -> &[Vec<TokenId>] {
        &self.records
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn layout(&self) -> &[Vec<usize>] {
        &self.layout
    }

    /// Window position -> (row, field offset).
    pub fn slot(&self, position: usize) -> (usize, usize) {
        self.slot[position]
    }

    fn row_matches<'a>(&'a self, evidence: &'a Evidence, row: usize) -> impl Iterator<Item = usize> + 'a {
        let positions = &self.layout[row];
        (0..self.records.len()).filter(move |&r| {
            self.weights[r] > 0.0
                && positions
                    .iter()
                    .zip(&self.records[r])
                    .all(|(&p, &t)| evidence[p].map_or(true, |e| e == t))
        })
    }

    /// Record with the largest weight, lowest index on ties.
    pub fn modal_record(&self) -> usize {
        (0..self.records.len()).fold(0, |a, r| if self.weights[r] > self.weights[a] { r } else { a })
    }
}

/// One row, contiguous layout.
pub fn build_profile_oracle(
    vocab: Vocabulary,
    records: Vec<Vec<TokenId>>,
    weights: Option<Vec<f64>>,
) -> Result<ProfileOracle, ConfigError> {
    let width = records.first().map_or(0, Vec::len);
    ProfileOracle::new(vocab, records, weights, vec![(0..width).collect()])
}

impl ExactModel for ProfileOracle {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn gen_len(&self) -> usize {
        self.n
    }

    fn sequence_ln_prob(&self, tokens: &[TokenId]) -> f64 {
        self.layout
            .iter()
            .map(|row| {
                let p: f64 = self
                    .records
                    .iter()
                    .zip(&self.weights)
                    .filter(|(rec, _)| row.iter().zip(rec.iter()).all(|(&p, &t)| tokens[p] == t))
                    .map(|(_, w)| w)
                    .sum();
                p.ln()
            })
            .sum()
    }

    fn ln_evidence(&self, evidence: &Evidence) -> f64 {
        (0..self.layout.len())
            .map(|row| self.row_matches(evidence, row).map(|r| self.weights[r]).sum::<f64>().ln())
            .sum()
    }

    fn posteriors(&self, evidence: &Evidence, queries: &[usize]) -> Result<Vec<Vec<f64>>, OracleError> {
        let v = self.vocab.len();
        let mut row_mass = vec![None; self.layout.len()];
        for row in 0..self.layout.len() {
            let m: f64 = self.row_matches(evidence, row).map(|r| self.weights[r]).sum();
            if m <= 0.0 {
                return Err(OracleError::ImpossibleEvidence);
            }
            row_mass[row] = Some(m);
        }
        queries
            .iter()
            .map(|&q| {
                if evidence[q].is_some() {
                    return Err(OracleError::NotMasked(q));
                }
                let (row, j) = self.slot[q];
                let mut probs = vec![0.0; v];
                for r in self.row_matches(evidence, row) {
                    probs[self.records[r][j] as usize] += self.weights[r];
                }
                let z = row_mass[row].unwrap_or(1.0);
                probs.iter_mut().for_each(|p| *p /= z);
                Ok(probs)
            })
            .collect()
    }
}
