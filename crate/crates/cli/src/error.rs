use depthdecomp::data::DataError;
use depthdecomp::decomposition::DecompError;
use depthdecomp::metrics::MetricError;
use depthdecomp::network::NetworkError;
use depthdecomp::training::TrainError;
use depthdecomp::viz::VizError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("unreadable file {0}")]
    UnreadableFile(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decomposition(#[from] DecompError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code; one per error family. Clap uses 2 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) | CliError::UnreadableFile(_) => 4,
            CliError::Data(_) => 5,
            CliError::Decomposition(_) => 6,
            CliError::Network(_) | CliError::MissingCheckpoint(_) => 7,
            CliError::Train(TrainError::InvalidConfig(_) | TrainError::UnknownVariant(_)) => 3,
            CliError::Train(_) => 8,
            CliError::Metric(_) => 9,
            CliError::Viz(_) => 10,
        }
    }
}
