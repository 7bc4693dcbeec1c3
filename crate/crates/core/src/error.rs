use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("form degree {degree} is out of range for dimension {dim}")]
    DegreeOutOfRange { degree: usize, dim: usize },

    #[error("incompatible shapes: {0}")]
    ShapeMismatch(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("point is off the manifold (residual {0:e})")]
    OffManifold(f64),

    #[error("field is not a projector (worst idempotence residual {0:e})")]
    NotProjector(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "frame extraction refused: Q deviation {deviation:.4e} exceeds threshold {threshold:.4e}"
    )]
    FrameRefused { deviation: f64, threshold: f64 },

    #[error("field file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
