//! Probability oracles: the stand-in for the model forward pass.
//!
//! [`OracleModel`] answers conditional-marginal queries over masked positions.
//! Exact desk-scale models implement [`ExactModel`] instead and get
//! `OracleModel` for free, including exact joint and conditional-joint
//! surprisal. Exact models condition only on the generation window; prompt
//! tokens carry no information for them.

mod markov;
mod profile;
pub mod remote;
mod spec;
mod tabular;
mod template;

use serde::{Deserialize, Serialize};

pub use markov::MarkovOracle;
pub use profile::{build_profile_oracle, ProfileOracle};
pub use remote::{RemoteOracle, PROTOCOL_HEADER, PROTOCOL_VERSION};
pub use spec::{load_oracle, OracleSpec};
pub use tabular::TabularJointOracle;
pub use template::{build_template_oracle, TemplateOracle, TiedGroup};

use crate::error::OracleError;
use crate::nats::Nats;
use crate::sequence::{MaskedSequence, TokenId, Vocabulary};

/// Per-entry tolerance for normalization checks on exact oracles.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionMarginal {
    pub position: usize,
    pub probs: Vec<f64>,
}

/// Argmax token and its probability at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

/// Conditional marginals for one query state (one forward pass).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarginalReport {
    pub entries: Vec<PositionMarginal>,
}

impl MarginalReport {
    pub fn get(&self, position: usize) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|e| e.position == position)
            .map(|e| e.probs.as_slice())
    }

    /// Greedy predictions in query order. Token ties go to the lowest id.
    pub fn predictions(&self) -> Vec<Prediction> {
        self.entries
            .iter()
            .map(|e| {
                let (token, p) = argmax(&e.probs);
                Prediction {
                    position: e.position,
                    token,
                    confidence: p.min(1.0),
                }
            })
            .collect()
    }

    /// Largest deviation of any distribution's total mass from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| (e.probs.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Index and value of the largest entry, first index on ties.
pub fn argmax(probs: &[f64]) -> (TokenId, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &p) in probs.iter().enumerate() {
        if p > best.1 {
            best = (i, p);
        }
    }
    (best.0 as TokenId, best.1)
}

/// One state of a batched query with its own position list.
#[derive(Debug, Clone, Copy)]
pub struct BatchQuery<'a> {
    pub seq: &'a MaskedSequence,
    pub positions: &'a [usize],
}

pub trait OracleModel: Send + Sync {
    fn vocab(&self) -> Vocabulary;

    fn supports_exact_joint(&self) -> bool {
        false
    }

    /// Largest batch accepted by [`OracleModel::batch_conditional_marginals`].
    fn batch_limit(&self) -> usize {
        usize::MAX
    }

    /// One distribution over the vocabulary per queried (masked) position.
    fn conditional_marginals(
        &self,
        seq: &MaskedSequence,
        positions: &[usize],
    ) -> Result<MarginalReport, OracleError>;

    /// Elementwise equal to independent single calls; charged as one
    /// forward pass by the schedulers.
    fn batch_conditional_marginals(
        &self,
        batch: &[BatchQuery<'_>],
    ) -> Result<Vec<MarginalReport>, OracleError> {
        check_batch(batch.len(), self.batch_limit())?;
        batch
            .iter()
            .map(|q| self.conditional_marginals(q.seq, q.positions))
            .collect()
    }

    /// `-ln p(x)` of a fully unmasked sequence.
    fn joint_logprob(&self, _seq: &MaskedSequence) -> Result<Nats, OracleError> {
        Err(OracleError::Unsupported)
    }

    /// `-ln p(x^A | unmasked content of seq)` for an assignment to masked
    /// positions.
    fn conditional_joint_logprob(
        &self,
        _seq: &MaskedSequence,
        _assignment: &[(usize, TokenId)],
    ) -> Result<Nats, OracleError> {
        Err(OracleError::Unsupported)
    }
}

pub(crate) fn check_batch(len: usize, limit: usize) -> Result<(), OracleError> {
    if len == 0 {
        return Err(OracleError::EmptyBatch);
    }
    if len > limit {
        return Err(OracleError::BatchTooLarge { got: len, limit });
    }
    Ok(())
}

/// Evidence over the generation window: `Some(token)` where observed.
pub type Evidence = [Option<TokenId>];

/// A distribution over `V^n` whose conditionals are computable exactly.
pub trait ExactModel: Send + Sync {
    fn vocab(&self) -> Vocabulary;

    fn gen_len(&self) -> usize;

    /// `ln p(x)` of a complete window, by direct formula.
    fn sequence_ln_prob(&self, tokens: &[TokenId]) -> f64;

    /// `ln p(evidence)`, marginalizing unobserved positions; `-inf` when
    /// the evidence is impossible.
    fn ln_evidence(&self, evidence: &Evidence) -> f64;

    /// Exact `p(x^q | evidence)` for each query (window-relative indices).
    /// The default goes through [`ExactModel::ln_evidence`]; models override
    /// it with a single-sweep computation.
    fn posteriors(
        &self,
        evidence: &Evidence,
        queries: &[usize],
    ) -> Result<Vec<Vec<f64>>, OracleError> {
        posteriors_via_evidence(self, evidence, queries)
    }
}

/// Conditionals obtained from ratios of evidence probabilities.
pub fn posteriors_via_evidence<M: ExactModel + ?Sized>(
    model: &M,
    evidence: &Evidence,
    queries: &[usize],
) -> Result<Vec<Vec<f64>>, OracleError> {
    let base = model.ln_evidence(evidence);
    if base == f64::NEG_INFINITY {
        return Err(OracleError::ImpossibleEvidence);
    }
    let v = model.vocab().len();
    let mut ev = evidence.to_vec();
    queries
        .iter()
        .map(|&q| {
            let mut probs: Vec<f64> = (0..v)
                .map(|tok| {
                    ev[q] = Some(tok as TokenId);
                    (model.ln_evidence(&ev) - base).exp()
                })
                .collect();
            ev[q] = None;
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            Ok(probs)
        })
        .collect()
}

fn evidence_of<M: ExactModel + ?Sized>(
    model: &M,
    seq: &MaskedSequence,
) -> Result<Vec<Option<TokenId>>, OracleError> {
    if seq.gen_len() != model.gen_len() {
        return Err(OracleError::Shape(format!(
            "sequence window {} vs oracle length {}",
            seq.gen_len(),
            model.gen_len()
        )));
    }
    let mask = seq.mask_id();
    Ok(seq
        .generated()
        .iter()
        .map(|&t| (t != mask).then_some(t))
        .collect())
}

fn relative(seq: &MaskedSequence, position: usize) -> Result<usize, OracleError> {
    if !seq.window().contains(&position) {
        return Err(OracleError::OutOfWindow(position));
    }
    if !seq.is_masked(position) {
        return Err(OracleError::NotMasked(position));
    }
    Ok(position - seq.prompt_len())
}

impl<M: ExactModel> OracleModel for M {
    fn vocab(&self) -> Vocabulary {
        ExactModel::vocab(self)
    }

    fn supports_exact_joint(&self) -> bool {
        true
    }

    fn conditional_marginals(
        &self,
        seq: &MaskedSequence,
        positions: &[usize],
    ) -> Result<MarginalReport, OracleError> {
        let evidence = evidence_of(self, seq)?;
        let queries = positions
            .iter()
            .map(|&p| relative(seq, p))
            .collect::<Result<Vec<_>, _>>()?;
        if queries.is_empty() {
            return Ok(MarginalReport::default());
        }
        let dists = self.posteriors(&evidence, &queries)?;
        Ok(MarginalReport {
            entries: positions
                .iter()
                .zip(dists)
                .map(|(&position, probs)| PositionMarginal { position, probs })
                .collect(),
        })
    }

    fn joint_logprob(&self, seq: &MaskedSequence) -> Result<Nats, OracleError> {
        if seq.gen_len() != self.gen_len() {
            return Err(OracleError::Shape("sequence length mismatch".into()));
        }
        if !seq.is_complete() {
            return Err(OracleError::Incomplete);
        }
        Ok(Nats::from_ln(self.sequence_ln_prob(seq.generated())))
    }

    fn conditional_joint_logprob(
        &self,
        seq: &MaskedSequence,
        assignment: &[(usize, TokenId)],
    ) -> Result<Nats, OracleError> {
        let mut evidence = evidence_of(self, seq)?;
        let base = self.ln_evidence(&evidence);
        if base == f64::NEG_INFINITY {
            return Err(OracleError::ImpossibleEvidence);
        }
        for &(p, tok) in assignment {
            let q = relative(seq, p)?;
            if evidence[q].is_some() {
                return Err(OracleError::Shape(format!("position {p} assigned twice")));
            }
            evidence[q] = Some(tok);
        }
        let joint = self.ln_evidence(&evidence);
        Ok(Nats::from_ln(joint - base).max_zero())
    }
}

impl Nats {
    /// Clamps rounding noise below zero; surprisal is never negative.
    pub(crate) fn max_zero(self) -> Nats {
        if self.0 < 0.0 {
            Nats(0.0)
        } else {
            self
        }
    }
}

/// Brute-force conditionals by enumerating every completion of the
/// evidence through [`ExactModel::sequence_ln_prob`] only. Used to check the
/// fast paths; cost is `|V|^(unobserved)`.
pub fn enumerate_posteriors<M: ExactModel + ?Sized>(
    model: &M,
    evidence: &Evidence,
    queries: &[usize],
) -> Option<Vec<Vec<f64>>> {
    let v = model.vocab().len();
    let n = model.gen_len();
    let free: Vec<usize> = (0..n).filter(|&i| evidence[i].is_none()).collect();
    let mut acc = vec![vec![0.0; v]; queries.len()];
    let mut total = 0.0;
    let mut tokens: Vec<TokenId> = evidence.iter().map(|e| e.unwrap_or(0)).collect();
    let states = (v as u64).checked_pow(free.len() as u32)?;
    for mut code in 0..states {
        for &i in &free {
            tokens[i] = (code % v as u64) as TokenId;
            code /= v as u64;
        }
        let p = model.sequence_ln_prob(&tokens).exp();
        if p == 0.0 {
            continue;
        }
        total += p;
        for (qi, &q) in queries.iter().enumerate() {
            acc[qi][tokens[q] as usize] += p;
        }
    }
    if total == 0.0 {
        return None;
    }
    acc.iter_mut()
        .for_each(|row| row.iter_mut().for_each(|x| *x /= total));
    Some(acc)
}

/// Brute-force `ln p(evidence)` by enumeration.
pub fn enumerate_ln_evidence<M: ExactModel + ?Sized>(model: &M, evidence: &Evidence) -> f64 {
    let v = model.vocab().len() as u64;
    let free: Vec<usize> = (0..model.gen_len()).filter(|&i| evidence[i].is_none()).collect();
    let mut tokens: Vec<TokenId> = evidence.iter().map(|e| e.unwrap_or(0)).collect();
    let mut total = 0.0;
    for mut code in 0..v.pow(free.len() as u32) {
        for &i in &free {
            tokens[i] = (code % v) as TokenId;
            code /= v;
        }
        total += model.sequence_ln_prob(&tokens).exp();
    }
    total.ln()
}
