use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("latitude {0} outside the UTM band [-84, 84]")]
    OutsideUtm(f64),
    #[error("ray {ray}: endpoint ({x:.3}, {y:.3}) km lies outside the cell grid")]
    RayOutsideGrid { ray: usize, x: f64, y: f64 },
    #[error("covariance factorization failed after jitter escalation: {0}")]
    Factorization(String),
    #[error("{0}")]
    Convergence(String),
    #[error("frequency {freq} Hz not fitted; available: {available:?}")]
    MissingFrequency { freq: f64, available: Vec<f64> },
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    /// True for errors that signal a failed convergence gate rather than bad input.
    pub fn is_convergence(&self) -> bool {
        match self {
            Error::Convergence(_) => true,
            Error::Stage { source, .. } => source.is_convergence(),
            _ => false,
        }
    }
}
