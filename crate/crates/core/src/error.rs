use std::path::PathBuf;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("mask of {strategy} could only reach {reached} of {target:.1} patches")]
    MaskBudget {
        strategy: &'static str,
        reached: usize,
        target: f64,
        partial: Box<crate::mask::MaskSet>,
    },
    #[error("branch loss needs at least one masked patch")]
    EmptyMask,
    #[error("no patch overlaps the character mask by more than {threshold}")]
    EmptySelection { threshold: f64 },
    #[error("learning-rate step {step} beyond total {total}")]
    Range { step: usize, total: usize },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
