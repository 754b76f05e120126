//! Command-line front end: run configurations, reports and the `fit`, `compare`,
//! `recover` and `simulate` commands.
//!
//! Exit codes: 0 success, 1 a recovery check failed, 2 input or configuration
//! error, 3 a fit did not converge, 4 internal (numerical) error.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{
    cmd_compare, cmd_fit, cmd_recover, cmd_simulate, exit_code_for_error, run_compare, run_fit, run_recover,
    Outcome, Overrides,
};
pub use config::{Layout, ModelConfig, Preset, RandomEffectsChoice, RunConfig, TruthConfig};
pub use report::{ComparisonInput, FitRunReport, RecoveryReport};
