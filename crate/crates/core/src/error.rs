use thiserror::Error;

#[derive(Debug, Error)]
pub enum BnnError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("layer {layer} node {node}: covariance not PSD (min eigenvalue {min_eig:e})")]
    NotPsd { layer: usize, node: usize, min_eig: f64 },
    #[error("unbounded tail value: {0}")]
    Unbounded(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BnnError>;

impl BnnError {
    /// Stable short tag for structured diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            BnnError::Domain(_) => "domain",
            BnnError::Dimension(_) => "dimension",
            BnnError::Parse(_) => "parse",
            BnnError::NotPsd { .. } => "not_psd",
            BnnError::Unbounded(_) => "unbounded",
            BnnError::Io(_) => "io",
            BnnError::Json(_) => "json",
        }
    }
}
