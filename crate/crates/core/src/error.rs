use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unsupported element `{symbol}` (atom {atom}); allowed elements are H, C, N, O, F")]
    UnknownElement {
        path: String,
        line: usize,
        atom: usize,
        symbol: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid molecule `{id}`: {reason}")]
    InvalidMolecule { id: String, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("coordinates of graph {graph} are not centered (|sum| = {offset:e})")]
    NotCentered { graph: usize, offset: f64 },

    #[error("non-finite latent produced at diffusion step {t}")]
    NonFiniteSample { t: usize },

    #[error("non-finite loss for molecule `{id}`")]
    NonFiniteLoss { id: String },

    #[error("non-finite gradient in parameter `{path}`")]
    NonFiniteGradient { path: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("bond table has no entry for the pair {0}-{1}")]
    MissingBondPair(String, String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
