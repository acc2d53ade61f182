use std::path::PathBuf;

use helios_core::dataset::DatasetError;
use helios_core::metrics::MetricsError;
use helios_core::models::ModelError;
use helios_core::nowcast::NowcastError;
use helios_core::sitecube::SiteCubeError;
use helios_core::synth::SynthError;
use thiserror::Error;

use crate::svg::ChartError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            ModelError::InvalidSpec(_) | ModelError::UnknownModel(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SiteCubeError> for CliError {
    fn from(e: SiteCubeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::WindowTooSmall | DatasetError::NoSteps | DatasetError::TooFewFolds => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NowcastError> for CliError {
    fn from(e: NowcastError) -> Self {
        match e {
            NowcastError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ChartError> for CliError {
    fn from(e: ChartError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
