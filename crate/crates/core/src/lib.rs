//! Decoding schedulers for masked diffusion models, run against exact
//! probability oracles, plus the information accounting that checks how many
//! rounds a decode must take.

pub mod baseline;
pub mod error;
pub mod ete;
pub mod info;
pub mod nats;
pub mod oracle;
pub mod sequence;
pub mod suite;
pub mod trace;

pub use error::{ConfigError, DecodeError, InfoError, OracleError};
pub use nats::Nats;
pub use oracle::{
    BatchQuery, ExactModel, MarginalReport, MarkovOracle, OracleModel, PositionMarginal,
    Prediction, ProfileOracle, RemoteOracle, TabularJointOracle, TemplateOracle,
};
pub use sequence::{make_initial_state, partition_blocks, DecodeState, MaskedSequence, TokenId, Vocabulary, MASK};
pub use trace::{Commit, DecodeTrace, RoundKind, RoundRecord, TRACE_SCHEMA};
pub use baseline::{run_block_diffusion, vanilla_any_order_run, DecodeMode, SelectionRule};
pub use ete::{run_ete, EteConfig, ResolvedEte};
pub use info::{bound_report, decompose_efficiency, epsilon_total, BoundReport, EfficiencyReport};
pub use suite::{derive_seed, Instance, SuiteSpec};
