//! Configuration-driven backtests: single runs, synthetic seed sweeps with
//! the KS battery, the NYSE comparison table, frictions and timing.

pub mod config;
pub mod frictions;
pub mod runner;
pub mod timing;

use std::path::PathBuf;

pub use config::RunConfig;
pub use frictions::apply_frictions;
pub use runner::{batch, execute, load_data, nyse_comparison, run};
pub use timing::timing_report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(#[source] olps_core::Error),

    #[error(transparent)]
    Engine(olps_core::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 config, 3 data, 4 bankruptcy, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Engine(olps_core::Error::Bankruptcy { .. }) => 4,
            CliError::Engine(_) | CliError::Output { .. } => 1,
        }
    }
}

impl From<olps_core::Error> for CliError {
    fn from(e: olps_core::Error) -> Self {
        CliError::Engine(e)
    }
}
