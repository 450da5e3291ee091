//! Templates whose tied slots share one latent symbol.
//!
//! A tied group draws a symbol from its prior and writes it at every one of
//! its positions. Remaining positions are independent fillers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Evidence, ExactModel, NORMALIZATION_TOL};
use crate::error::{ConfigError, OracleError};
use crate::sequence::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiedGroup {
    pub positions: Vec<usize>,
    /// Distribution over the vocabulary for the shared symbol.
    pub prior: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Tied(usize),
    Filler(usize),
}

#[derive(Debug, Clone)]
pub struct TemplateOracle {
    vocab: Vocabulary,
    n: usize,
    groups: Vec<TiedGroup>,
    fillers: Vec<(usize, Vec<f64>)>,
    slots: Vec<Slot>,
}

fn check_dist(p: &[f64], v: usize) -> Result<(), ConfigError> {
    if p.len() != v {
        return Err(ConfigError::invalid("distribution length differs from vocabulary size"));
    }
    if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(ConfigError::invalid("distribution has a negative entry"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(ConfigError::invalid(format!("distribution sums to {s}, expected 1")));
    }
    Ok(())
}

impl TemplateOracle {
    pub fn new(
        vocab: Vocabulary,
        groups: Vec<TiedGroup>,
        fillers: Vec<(usize, Vec<f64>)>,
    ) -> Result<Self, ConfigError> {
        let mut seen = BTreeSet::new();
        let mut assigned = Vec::new();
        for (g, group) in groups.iter().enumerate() {
            if group.positions.is_empty() {
                return Err(ConfigError::invalid("tied group without positions"));
            }
            check_dist(&group.prior, vocab.len())?;
            for &p in &group.positions {
                if !seen.insert(p) {
                    return Err(ConfigError::DuplicatePosition(p));
                }
                assigned.push((p, Slot::Tied(g)));
            }
        }
        for (f, (p, dist)) in fillers.iter().enumerate() {
            check_dist(dist, vocab.len())?;
            if !seen.insert(*p) {
                return Err(ConfigError::DuplicatePosition(*p));
            }
            assigned.push((*p, Slot::Filler(f)));
        }
        let n = seen.len();
        if n == 0 {
            return Err(ConfigError::EmptyGeneration);
        }
        if seen.iter().next_back() != Some(&(n - 1)) {
            return Err(ConfigError::invalid("template must cover positions 0..n without gaps"));
        }
        let mut slots = vec![Slot::Filler(0); n];
        for (p, s) in assigned {
            slots[p] = s;
        }
        Ok(Self {
            vocab,
            n,
            groups,
            fillers,
            slots,
        })
    }

    pub fn groups(&self) -> &[TiedGroup] {
        &self.groups
    }

    pub fn fillers(&self) -> &[(usize, Vec<f64>)] {
        &self.fillers
    }

    /// Symbol observed in group `g`, or an error if two observations clash.
    fn group_symbol(&self, evidence: &Evidence, g: usize) -> Result<Option<TokenId>, ()> {
        let mut sym = None;
        for &p in &self.groups[g].positions {
            match (sym, evidence[p]) {
                (_, None) => {}
                (None, Some(t)) => sym = Some(t),
                (Some(s), Some(t)) if s != t => return Err(()),
                _ => {}
            }
        }
        Ok(sym)
    }

    /// Most probable instantiation, lowest ids on ties.
    pub fn map_sequence(&self) -> Vec<TokenId> {
        let mut out = vec![0; self.n];
        for g in &self.groups {
            let (s, _) = super::argmax(&g.prior);
            g.positions.iter().for_each(|&p| out[p] = s);
        }
        for (p, d) in &self.fillers {
            out[*p] = super::argmax(d).0;
        }
        out
    }
}

/// Shared symbol prior for every group; fillers as `(position, dist)`.
pub fn build_template_oracle(
    vocab: Vocabulary,
    tied: Vec<Vec<usize>>,
    prior: Vec<f64>,
    fillers: Vec<(usize, Vec<f64>)>,
) -> Result<TemplateOracle, ConfigError> {
    if prior.is_empty() {
        return Err(ConfigError::invalid("symbol prior is empty"));
    }
    let groups = tied
        .into_iter()
        .map(|positions| TiedGroup {
            positions,
            prior: prior.clone(),
        })
        .collect();
    TemplateOracle::new(vocab, groups, fillers)
}

impl ExactModel for TemplateOracle {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn gen_len(&self) -> usize {
        self.n
    }

    fn sequence_ln_prob(&self, tokens: &[TokenId]) -> f64 {
        let mut lp = 0.0;
        for g in &self.groups {
            let s = tokens[g.positions[0]];
            if g.positions.iter().any(|&p| tokens[p] != s) {
                return f64::NEG_INFINITY;
            }
            lp += g.prior[s as usize].ln();
        }
        for (p, d) in &self.fillers {
            lp += d[tokens[*p] as usize].ln();
        }
        lp
    }

    fn ln_evidence(&self, evidence: &Evidence) -> f64 {
        let mut lp = 0.0;
        for (g, group) in self.groups.iter().enumerate() {
            match self.group_symbol(evidence, g) {
                Err(()) => return f64::NEG_INFINITY,
                Ok(Some(s)) => lp += group.prior[s as usize].ln(),
                Ok(None) => {}
            }
        }
        for (p, d) in &self.fillers {
            if let Some(t) = evidence[*p] {
                lp += d[t as usize].ln();
            }
        }
        lp
    }

    fn posteriors(&self, evidence: &Evidence, queries: &[usize]) -> Result<Vec<Vec<f64>>, OracleError> {
        if self.ln_evidence(evidence) == f64::NEG_INFINITY {
            return Err(OracleError::ImpossibleEvidence);
        }
        let v = self.vocab.len();
        queries
            .iter()
            .map(|&q| {
                if evidence[q].is_some() {
                    return Err(OracleError::NotMasked(q));
                }
                Ok(match self.slots[q] {
                    Slot::Filler(f) => self.fillers[f].1.clone(),
                    Slot::Tied(g) => match self.group_symbol(evidence, g) {
                        Ok(Some(s)) => {
                            let mut d = vec![0.0; v];
                            d[s as usize] = 1.0;
                            d
                        }
                        _ => self.groups[g].prior.clone(),
                    },
                })
            })
            .collect()
    }
}
