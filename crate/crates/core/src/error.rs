use std::path::PathBuf;

use plasmodium_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Unusable inputs or settings that the caller must fix.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f32 },

    #[error(
        "pretrained {backbone} weights not found at {}; place a converted snapshot \
         there (see tools/keras_snapshot.py) or point PLASMODIUM_WEIGHTS_DIR elsewhere",
        path.display()
    )]
    MissingSnapshot { backbone: String, path: PathBuf },

    #[error("exported bundle deviates from the native model by {max_abs_diff:e} (tolerance {tolerance:e})")]
    Fidelity { max_abs_diff: f32, tolerance: f32 },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
