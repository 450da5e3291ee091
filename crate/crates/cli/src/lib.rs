//! Experiment runner: config-driven sweeps over schedulers and oracle
//! suites, with bound verification, Pareto frontiers, scheduler comparison
//! and plot data.

pub mod analysis;
pub mod config;
pub mod csvio;
pub mod sweep;

pub use analysis::{compare, pareto, plotdata, verify, CompareRow, FrontierPoint, VerifySummary};
pub use config::{Cell, ExperimentConfig, SchedulerSpec, SweepGrid, TaskSuite};
pub use sweep::{run_sweep, BoundRow, Manifest, RunRow, SweepResult};
