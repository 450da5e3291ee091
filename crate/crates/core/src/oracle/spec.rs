//! JSON oracle definitions.
//!
//! ```json
//! {"type": "tabular", "vocab": 2, "n": 2, "entries": [[[0, 1], 0.5], [[1, 0], 0.5]]}
//! {"type": "markov", "pi": [0.5, 0.5], "T": [[0.9, 0.1], [0.1, 0.9]], "n": 8}
//! {"type": "profile", "vocab": 40, "records": [[0, 20, 25]], "weights": null, "layout": [[0, 1, 2]]}
//! {"type": "template", "vocab": 4, "groups": [{"positions": [0, 2], "prior": [0.25, 0.25, 0.25, 0.25]}],
//!  "fillers": [[1, [0, 0, 1, 0]]]}
//! {"type": "remote", "endpoint": "http://127.0.0.1:8765", "timeout_ms": 30000, "batch_limit": 16}
//! ```
//!
//! For profiles `weights` and `layout` are optional (uniform weights, one
//! contiguous row). Remote definitions read the vocabulary from the server's
//! health endpoint.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    MarkovOracle, OracleModel, ProfileOracle, RemoteOracle, TabularJointOracle, TemplateOracle,
    TiedGroup,
};
use crate::error::ConfigError;
use crate::sequence::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Tabular {
        vocab: u32,
        n: usize,
        entries: Vec<(Vec<TokenId>, f64)>,
    },
    Markov {
        pi: Vec<f64>,
        #[serde(rename = "T")]
        transition: Vec<Vec<f64>>,
        n: usize,
    },
    Profile {
        vocab: u32,
        records: Vec<Vec<TokenId>>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
        #[serde(default)]
        layout: Option<Vec<Vec<usize>>>,
    },
    Template {
        vocab: u32,
        groups: Vec<TiedGroup>,
        #[serde(default)]
        fillers: Vec<(usize, Vec<f64>)>,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_batch_limit")]
        batch_limit: usize,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_batch_limit() -> usize {
    16
}

impl OracleSpec {
    pub fn build(&self) -> Result<Box<dyn OracleModel>, ConfigError> {
        Ok(match self {
            OracleSpec::Tabular { vocab, n, entries } => Box::new(TabularJointOracle::new(
                Vocabulary::new(*vocab)?,
                *n,
                entries.clone(),
            )?),
            OracleSpec::Markov { pi, transition, n } => {
                Box::new(MarkovOracle::new(pi.clone(), transition.clone(), *n)?)
            }
            OracleSpec::Profile {
                vocab,
                records,
                weights,
                layout,
            } => {
                let width = records.first().map_or(0, Vec::len);
                let layout = layout.clone().unwrap_or_else(|| vec![(0..width).collect()]);
                Box::new(ProfileOracle::new(
                    Vocabulary::new(*vocab)?,
                    records.clone(),
                    weights.clone(),
                    layout,
                )?)
            }
            OracleSpec::Template {
                vocab,
                groups,
                fillers,
            } => Box::new(TemplateOracle::new(
                Vocabulary::new(*vocab)?,
                groups.clone(),
                fillers.clone(),
            )?),
            OracleSpec::Remote {
                endpoint,
                timeout_ms,
                batch_limit,
            } => Box::new(
                RemoteOracle::connect(endpoint, Duration::from_millis(*timeout_ms), *batch_limit)
                    .map_err(|e| ConfigError::invalid(format!("remote oracle at {endpoint}: {e}")))?,
            ),
        })
    }
}

/// Reads and builds an oracle definition file.
pub fn load_oracle(path: &Path) -> Result<Box<dyn OracleModel>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::invalid(format!("{}: {e}", path.display())))?;
    let spec: OracleSpec = serde_json::from_str(&text)
        .map_err(|e| ConfigError::invalid(format!("{}: {e}", path.display())))?;
    spec.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_examples() {
        let docs = [
            r#"{"type": "tabular", "vocab": 2, "n": 2, "entries": [[[0, 1], 0.5], [[1, 0], 0.5]]}"#,
            r#"{"type": "markov", "pi": [0.5, 0.5], "T": [[0.9, 0.1], [0.1, 0.9]], "n": 8}"#,
            r#"{"type": "profile", "vocab": 40, "records": [[0, 20, 25], [1, 20, 26]]}"#,
            r#"{"type": "template", "vocab": 4, "groups": [{"positions": [0, 2], "prior": [0.25, 0.25, 0.25, 0.25]}],
                "fillers": [[1, [0, 0, 1, 0]]]}"#,
        ];
        for d in docs {
            let spec: OracleSpec = serde_json::from_str(d).unwrap();
            let o = spec.build().unwrap();
            assert!(o.supports_exact_joint());
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_tables() {
        assert!(serde_json::from_str::<OracleSpec>(r#"{"type": "markov", "pi": [1], "T": [[1]], "n": 1, "x": 0}"#).is_err());
        let spec: OracleSpec =
            serde_json::from_str(r#"{"type": "tabular", "vocab": 2, "n": 1, "entries": [[[0], 0.3]]}"#).unwrap();
        assert!(spec.build().is_err());
    }
}
