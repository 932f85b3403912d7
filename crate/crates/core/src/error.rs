use std::path::PathBuf;

use aggpose_data::{DataError, MetricsError};
use aggpose_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("load failed: {0}")]
    Load(String),
    #[error("{0}")]
    NonFiniteLoss(Box<NonFiniteDiagnostic>),
}

/// State dumped when a training step produces a non-finite loss.
#[derive(Debug, Clone)]
pub struct NonFiniteDiagnostic {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Operation that first saw a non-finite value, when the forward pass failed.
    pub op: Option<&'static str>,
    /// Gradient L2 norm per parameter name, largest first; empty when the
    /// forward pass failed.
    pub grad_norms: Vec<(String, f64)>,
}

impl std::fmt::Display for NonFiniteDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.op {
            Some(op) => writeln!(f, "non-finite value in {op} at step {} (lr {:e})", self.step, self.lr)?,
            None => writeln!(f, "non-finite loss {} at step {} (lr {:e})", self.loss, self.step, self.lr)?,
        }
        for (name, n) in self.grad_norms.iter().take(10) {
            writeln!(f, "  grad norm {name}: {n:e}")?;
        }
        Ok(())
    }
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
