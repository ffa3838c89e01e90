//! Experiment harness: config files, training and ablation commands, and
//! the verification suites run by `sscl verify`.

pub mod commands;
pub mod config;
pub mod verify;

pub use commands::{cmd_ablate, cmd_data_gen, cmd_run, ResultRow, ResultTable, RunOptions};
pub use config::{dump_config, parse_config, parse_config_str, ConfigError, ExperimentSpec};
