use std::path::Path;

use opgrain_core::enrich::supervised::SupervisedError;
use opgrain_core::granularity::GranularityError;
use opgrain_core::metrics::MetricsError;
use opgrain_core::records::RecordsError;
use opgrain_core::simulator::SimulatorError;
use opgrain_gateway::GatewayError;
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONSISTENCY: i32 = 4;
pub const EXIT_NETWORK: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("network error: {0}")]
    Network(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Consistency(_) => EXIT_CONSISTENCY,
            CliError::Network(_) => EXIT_NETWORK,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<RecordsError> for CliError {
    fn from(e: RecordsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GranularityError> for CliError {
    fn from(e: GranularityError) -> Self {
        match e {
            GranularityError::InvalidResolution(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimulatorError> for CliError {
    fn from(e: SimulatorError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SupervisedError> for CliError {
    fn from(e: SupervisedError) -> Self {
        match e {
            SupervisedError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidConfig(_) => CliError::Config(e.to_string()),
            GatewayError::Client(_) | GatewayError::AllFailed(_) => CliError::Network(e.to_string()),
        }
    }
}
