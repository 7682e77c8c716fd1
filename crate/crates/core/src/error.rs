use thiserror::Error;

use crate::forge::ForgeError;
use crate::scene::SceneError;
use crate::tensor::TensorError;

/// Error type for the model, training and experiment layers.
#[derive(Debug, Error)]
pub enum HtError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type HtResult<T> = std::result::Result<T, HtError>;
