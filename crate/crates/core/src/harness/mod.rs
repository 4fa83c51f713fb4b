//! Experiment orchestration: configuration, training loops, sweeps, metrics
//! and the gradient-check suite.

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod signal;
pub mod sweep;

pub use config::{ExperimentConfig, Mode, Rule, Task, DATA_DIR_ENV};
pub use experiment::{run_experiment, run_trials, TrialOutput};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use metrics::{emit_metrics, read_metrics, MetricsRecord};
pub use sweep::{run_sweep, SweepResult};
