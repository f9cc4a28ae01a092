use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FedSynError {
    #[error("unknown dataset `{0}` (expected one of mnist, fashion-mnist, cifar10)")]
    UnknownDataset(String),
    #[error("dataset file {path} is missing or unreadable: {source}")]
    DatasetIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset file {path} is corrupt: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("unknown local loss `{0}`")]
    UnknownLoss(String),
    #[error("client {client} has an empty shard")]
    EmptyShard { client: usize },
    #[error("partition left a client with no examples after {attempts} attempts")]
    EmptyClient { attempts: usize },
    #[error("partition plan does not match dataset: {0}")]
    PlanMismatch(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] fedsyn_nn::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },
}

pub type Result<T> = std::result::Result<T, FedSynError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FedSynError {
    let path = path.into();
    move |source| FedSynError::Io { path, source }
}
