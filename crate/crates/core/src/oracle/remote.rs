//! HTTP client for out-of-process oracles speaking `ete-oracle/1`.
//!
//! `POST /v1/marginals` with
//! `{"tokens": [...], "prompt_len": n0, "positions": [...], "batch": [[...], ...]}`
//! where masks are sent as `-1`. An empty `batch` evaluates `tokens` itself;
//! otherwise every variant is evaluated and `tokens` is only context. The
//! reply is `{"marginals": [[{"position": p, "probs": [...]}, ...], ...]}`,
//! one list per evaluated sequence holding the requested positions that are
//! masked in it, in request order. `GET /v1/health` answers
//! `{"protocol": "ete-oracle/1", "vocab_size": k}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_batch, BatchQuery, MarginalReport, OracleModel, PositionMarginal};
use crate::error::OracleError;
use crate::sequence::{MaskedSequence, Vocabulary};

pub const PROTOCOL_VERSION: &str = "ete-oracle/1";
pub const PROTOCOL_HEADER: &str = "X-Ete-Protocol";

/// Responses are checked against this normalization tolerance, then
/// renormalized.
const WIRE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalsRequest {
    pub tokens: Vec<i64>,
    pub prompt_len: usize,
    pub positions: Vec<usize>,
    pub batch: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalsResponse {
    pub marginals: Vec<Vec<PositionMarginal>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub protocol: String,
    pub vocab_size: u32,
}

fn wire_tokens(seq: &MaskedSequence) -> Vec<i64> {
    let mask = seq.mask_id();
    seq.tokens()
        .iter()
        .map(|&t| if t == mask { -1 } else { t as i64 })
        .collect()
}

/// Builds the request for a batch. A single query goes out with an empty
/// `batch`; larger batches send every state as a variant and the union of
/// positions.
pub fn encode_request(batch: &[BatchQuery<'_>]) -> Result<MarginalsRequest, OracleError> {
    let first = batch.first().ok_or(OracleError::EmptyBatch)?;
    for q in batch {
        for &p in q.positions {
            if !q.seq.window().contains(&p) {
                return Err(OracleError::OutOfWindow(p));
            }
            if !q.seq.is_masked(p) {
                return Err(OracleError::NotMasked(p));
            }
        }
    }
    let mut positions: Vec<usize> = Vec::new();
    for q in batch {
        for &p in q.positions {
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
    }
    if batch.len() == 1 {
        positions = first.positions.to_vec();
    }
    Ok(MarginalsRequest {
        tokens: wire_tokens(first.seq),
        prompt_len: first.seq.prompt_len(),
        positions,
        batch: if batch.len() == 1 {
            Vec::new()
        } else {
            batch.iter().map(|q| wire_tokens(q.seq)).collect()
        },
    })
}

/// Validates a response against its request and projects each evaluated
/// sequence onto the positions its query asked for.
pub fn decode_response(
    batch: &[BatchQuery<'_>],
    request: &MarginalsRequest,
    response: MarginalsResponse,
    vocab: Vocabulary,
) -> Result<Vec<MarginalReport>, OracleError> {
    if response.marginals.len() != batch.len() {
        return Err(OracleError::Protocol(format!(
            "expected {} marginal lists, got {}",
            batch.len(),
            response.marginals.len()
        )));
    }
    batch
        .iter()
        .zip(response.marginals)
        .map(|(q, list)| {
            let expected: Vec<usize> = request
                .positions
                .iter()
                .copied()
                .filter(|&p| q.seq.is_masked(p))
                .collect();
            let got: Vec<usize> = list.iter().map(|e| e.position).collect();
            if got != expected {
                return Err(OracleError::Protocol(format!(
                    "positions {got:?} do not match requested {expected:?}"
                )));
            }
            let mut entries = Vec::with_capacity(q.positions.len());
            for &p in q.positions {
                let e = list.iter().find(|e| e.position == p).expect("checked above");
                entries.push(PositionMarginal {
                    position: p,
                    probs: normalized(&e.probs, vocab, p)?,
                });
            }
            Ok(MarginalReport { entries })
        })
        .collect()
}

fn normalized(probs: &[f64], vocab: Vocabulary, position: usize) -> Result<Vec<f64>, OracleError> {
    if probs.len() != vocab.len() {
        return Err(OracleError::Protocol(format!(
            "position {position}: {} probabilities for a vocabulary of {}",
            probs.len(),
            vocab.size
        )));
    }
    if probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(OracleError::Protocol(format!("position {position}: invalid probability")));
    }
    let z: f64 = probs.iter().sum();
    if (z - 1.0).abs() > WIRE_TOL {
        return Err(OracleError::Protocol(format!("position {position}: mass {z} is not 1")));
    }
    Ok(probs.iter().map(|p| p / z).collect())
}

#[derive(Debug, Clone)]
pub struct RemoteOracle {
    endpoint: String,
    vocab: Vocabulary,
    timeout: Duration,
    batch_limit: usize,
    agent: ureq::Agent,
}

fn transport(e: ureq::Error) -> OracleError {
    match e {
        ureq::Error::Status(code, resp) if code >= 500 => {
            OracleError::Transport(format!("HTTP {code} from {}", resp.get_url()))
        }
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            OracleError::Protocol(format!("HTTP {code}: {body}"))
        }
        ureq::Error::Transport(t) => OracleError::Transport(t.to_string()),
    }
}

fn check_version(resp: &ureq::Response) -> Result<(), OracleError> {
    match resp.header(PROTOCOL_HEADER) {
        Some(v) if v != PROTOCOL_VERSION => Err(OracleError::Protocol(format!(
            "server speaks {v}, client speaks {PROTOCOL_VERSION}"
        ))),
        _ => Ok(()),
    }
}

impl RemoteOracle {
    pub fn new(endpoint: &str, vocab: Vocabulary, timeout: Duration, batch_limit: usize) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            vocab,
            timeout,
            batch_limit: batch_limit.max(1),
            agent,
        }
    }

    /// Reads the vocabulary size from the health endpoint.
    pub fn connect(endpoint: &str, timeout: Duration, batch_limit: usize) -> Result<Self, OracleError> {
        let probe = Self::new(endpoint, Vocabulary { size: 2, mask_id: u32::MAX }, timeout, batch_limit);
        let health = probe.health()?;
        let vocab = Vocabulary::new(health.vocab_size)
            .map_err(|e| OracleError::Protocol(e.to_string()))?;
        Ok(Self { vocab, ..probe })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn health(&self) -> Result<Health, OracleError> {
        let resp = self
            .agent
            .get(&format!("{}/v1/health", self.endpoint))
            .set(PROTOCOL_HEADER, PROTOCOL_VERSION)
            .call()
            .map_err(transport)?;
        check_version(&resp)?;
        let health: Health = resp
            .into_json()
            .map_err(|e| OracleError::Protocol(e.to_string()))?;
        if health.protocol != PROTOCOL_VERSION {
            return Err(OracleError::Protocol(format!("server speaks {}", health.protocol)));
        }
        Ok(health)
    }

    fn post(&self, request: &MarginalsRequest) -> Result<MarginalsResponse, OracleError> {
        log::debug!(
            "remote query: {} positions, batch {}",
            request.positions.len(),
            request.batch.len()
        );
        let resp = self
            .agent
            .post(&format!("{}/v1/marginals", self.endpoint))
            .set(PROTOCOL_HEADER, PROTOCOL_VERSION)
            .send_json(request)
            .map_err(transport)?;
        check_version(&resp)?;
        resp.into_json()
            .map_err(|e| OracleError::Protocol(format!("bad response body: {e}")))
    }
}

impl OracleModel for RemoteOracle {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn batch_limit(&self) -> usize {
        self.batch_limit
    }

    fn conditional_marginals(
        &self,
        seq: &MaskedSequence,
        positions: &[usize],
    ) -> Result<MarginalReport, OracleError> {
        if positions.is_empty() {
            return Ok(MarginalReport::default());
        }
        let batch = [BatchQuery { seq, positions }];
        let mut out = self.batch_conditional_marginals(&batch)?;
        Ok(out.remove(0))
    }

    fn batch_conditional_marginals(
        &self,
        batch: &[BatchQuery<'_>],
    ) -> Result<Vec<MarginalReport>, OracleError> {
        check_batch(batch.len(), self.batch_limit)?;
        let request = encode_request(batch)?;
        let response = self.post(&request)?;
        decode_response(batch, &request, response, self.vocab)
    }
}
