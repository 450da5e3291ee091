//! Round-by-round decode traces and their canonical JSONL form.
//!
//! A trace file starts with one header object carrying `"schema":
//! "ete-trace/1"`, followed by one object per round in round order.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DecodeError, OracleError};
use crate::nats::Nats;
use crate::oracle::OracleModel;
use crate::sequence::{DecodeState, MaskedSequence, TokenId, Vocabulary};

pub const TRACE_SCHEMA: &str = "ete-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    Exploit,
    ImplicitExplore,
    TargetedExplore,
    Cleanup,
    Vanilla,
}

impl RoundKind {
    pub fn is_exploration(self) -> bool {
        matches!(self, RoundKind::ImplicitExplore | RoundKind::TargetedExplore)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoundKind::Exploit => "exploit",
            RoundKind::ImplicitExplore => "implicit_explore",
            RoundKind::TargetedExplore => "targeted_explore",
            RoundKind::Cleanup => "cleanup",
            RoundKind::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub kind: RoundKind,
    pub committed: Vec<Commit>,
    /// Oracle invocations charged to this round; a batched call counts once.
    pub forward_passes: u32,
    /// Increment of the scheduler's step counter `t`.
    pub steps: u32,
    pub nats_marginal: f64,
    pub nats_joint: Option<Nats>,
    pub epsilon_r: Option<Nats>,
}

impl RoundRecord {
    pub fn size(&self) -> usize {
        self.committed.len()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.committed.iter().map(|c| c.position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub scheduler: String,
    pub config: serde_json::Value,
    pub vocab: Vocabulary,
    pub prompt: Vec<TokenId>,
    pub gen_len: usize,
    pub block_len: usize,
    pub seed: u64,
    /// Full final sequence including the prompt; masks remain only in
    /// partial traces.
    pub final_tokens: Vec<TokenId>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    scheduler: String,
    config: serde_json::Value,
    vocab: Vocabulary,
    prompt: Vec<TokenId>,
    gen_len: usize,
    block_len: usize,
    seed: u64,
    #[serde(rename = "final")]
    final_tokens: Vec<i64>,
    total_rounds: usize,
    forward_passes: u64,
    steps: u64,
}

impl DecodeTrace {
    pub fn total_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn forward_passes(&self) -> u64 {
        self.rounds.iter().map(|r| r.forward_passes as u64).sum()
    }

    pub fn steps(&self) -> u64 {
        self.rounds.iter().map(|r| r.steps as u64).sum()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    pub fn is_complete(&self) -> bool {
        !self.generated().contains(&self.vocab.mask_id)
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.final_tokens[self.prompt.len()..]
    }

    /// The final sequence as a `MaskedSequence`.
    pub fn final_seq(&self) -> MaskedSequence {
        let base = MaskedSequence::new(&self.prompt, self.gen_len, self.block_len, self.vocab)
            .expect("trace geometry was validated at construction");
        base.filled(self.generated())
    }

    /// Fresh all-masked state matching this trace's geometry.
    pub fn initial_seq(&self) -> MaskedSequence {
        MaskedSequence::new(&self.prompt, self.gen_len, self.block_len, self.vocab)
            .expect("trace geometry was validated at construction")
    }

    pub fn marginal_nats(&self) -> f64 {
        self.rounds.iter().map(|r| r.nats_marginal).sum()
    }

    /// Checks that committed sets are disjoint, only touch the generation
    /// window, agree with the final tokens and (for complete traces) cover
    /// every generated position.
    pub fn check_partition(&self) -> Result<(), String> {
        let window = self.prompt.len()..self.prompt.len() + self.gen_len;
        let mut seen = BTreeSet::new();
        for r in &self.rounds {
            for c in &r.committed {
                if !window.contains(&c.position) {
                    return Err(format!("round {}: position {} outside window", r.round, c.position));
                }
                if !seen.insert(c.position) {
                    return Err(format!("round {}: position {} committed twice", r.round, c.position));
                }
                if self.final_tokens[c.position] != c.token {
                    return Err(format!("round {}: position {} disagrees with final", r.round, c.position));
                }
            }
        }
        if self.is_complete() && seen.len() != self.gen_len {
            return Err(format!("{} of {} positions committed", seen.len(), self.gen_len));
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mask = self.vocab.mask_id;
        let header = Header {
            schema: TRACE_SCHEMA.to_string(),
            scheduler: self.scheduler.clone(),
            config: self.config.clone(),
            vocab: self.vocab,
            prompt: self.prompt.clone(),
            gen_len: self.gen_len,
            block_len: self.block_len,
            seed: self.seed,
            final_tokens: self
                .final_tokens
                .iter()
                .map(|&t| if t == mask { -1 } else { t as i64 })
                .collect(),
            total_rounds: self.total_rounds(),
            forward_passes: self.forward_passes(),
            steps: self.steps(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.rounds {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let bad = |e: String| io::Error::new(io::ErrorKind::InvalidData, e);
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| bad("empty trace file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
        if header.schema != TRACE_SCHEMA {
            return Err(bad(format!("unsupported trace schema {:?}", header.schema)));
        }
        let mask = header.vocab.mask_id;
        let mut rounds = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rounds.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
        }
        Ok(DecodeTrace {
            scheduler: header.scheduler,
            config: header.config,
            vocab: header.vocab,
            prompt: header.prompt,
            gen_len: header.gen_len,
            block_len: header.block_len,
            seed: header.seed,
            final_tokens: header
                .final_tokens
                .into_iter()
                .map(|t| if t < 0 { mask } else { t as TokenId })
                .collect(),
            rounds,
        })
    }
}

/// Appends rounds to a trace while applying their commits to the state.
pub(crate) struct Recorder<'a> {
    oracle: &'a dyn OracleModel,
    exact: bool,
    trace: DecodeTrace,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(
        oracle: &'a dyn OracleModel,
        state: &DecodeState,
        scheduler: &str,
        config: serde_json::Value,
    ) -> Self {
        let seq = state.seq();
        let vocab = oracle.vocab();
        Recorder {
            oracle,
            exact: oracle.supports_exact_joint(),
            trace: DecodeTrace {
                scheduler: scheduler.to_string(),
                config,
                vocab: Vocabulary {
                    size: vocab.size,
                    mask_id: seq.mask_id(),
                },
                prompt: seq.tokens()[..seq.prompt_len()].to_vec(),
                gen_len: seq.gen_len(),
                block_len: seq.block_len(),
                seed: state.rng_seed(),
                final_tokens: Vec::new(),
                rounds: Vec::new(),
            },
        }
    }

    /// Records one round and applies its commits. Exact oracles also get
    /// the round's joint conditional surprisal.
    pub(crate) fn record(
        &mut self,
        state: &mut DecodeState,
        kind: RoundKind,
        committed: Vec<Commit>,
        forward_passes: u32,
        steps: u32,
    ) -> Result<(), OracleError> {
        let mut seen = BTreeSet::new();
        for c in &committed {
            if !state.masked_set().contains(&c.position) {
                return Err(OracleError::NotMasked(c.position));
            }
            assert!(seen.insert(c.position), "position {} committed twice in one round", c.position);
            if !(c.confidence > 0.0 && c.confidence <= 1.0) {
                return Err(OracleError::Protocol(format!(
                    "confidence {} at position {} is outside (0, 1]",
                    c.confidence, c.position
                )));
            }
        }
        let nats_marginal: f64 = committed.iter().map(|c| -c.confidence.ln()).sum();
        let nats_joint = if self.exact && !committed.is_empty() {
            let assignment: Vec<(usize, TokenId)> =
                committed.iter().map(|c| (c.position, c.token)).collect();
            Some(self.oracle.conditional_joint_logprob(state.seq(), &assignment)?)
        } else if self.exact {
            Some(Nats::ZERO)
        } else {
            None
        };
        let epsilon_r = nats_joint.map(|j| {
            if j.is_infinite() {
                Nats::INFINITE
            } else {
                Nats((j.value() - nats_marginal).abs())
            }
        });
        for c in &committed {
            state.commit(c.position, c.token);
        }
        state.advance(steps as u64);
        let round = self.trace.rounds.len();
        self.trace.rounds.push(RoundRecord {
            round,
            kind,
            committed,
            forward_passes,
            steps,
            nats_marginal,
            nats_joint,
            epsilon_r,
        });
        Ok(())
    }

    pub(crate) fn finish(mut self, state: &DecodeState) -> DecodeTrace {
        self.trace.final_tokens = state.seq().tokens().to_vec();
        self.trace
    }

    pub(crate) fn fail(self, state: &DecodeState, source: OracleError) -> DecodeError {
        DecodeError {
            source,
            partial: Box::new(self.finish(state)),
        }
    }
}
