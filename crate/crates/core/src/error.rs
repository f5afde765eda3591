use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: got {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate reaction coordinate: smallest eigenvalue of Φ is {0:e}")]
    DegenerateCoordinate(f64),

    #[error("near-singular matrix: eigenvalue {0:e} is below the floor")]
    NearSingular(f64),

    #[error("asymmetric input: ‖M − Mᵀ‖_F = {0:e}")]
    Asymmetric(f64),

    #[error("divergence at step {step}{}", replica.map(|r| format!(" (replica {r})")).unwrap_or_default())]
    Divergence { replica: Option<usize>, step: usize },

    #[error("fiber projection failed after {iterations} iterations (residual {residual:e})")]
    Projection { iterations: usize, residual: f64 },

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("quadrature did not converge (achieved error {achieved:e})")]
    Quadrature { achieved: f64 },

    #[error("bound query error: {0}")]
    Query(String),

    #[error("regime error: {0}")]
    Regime(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("model file error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches a replica index to a divergence error; other variants pass through.
    pub fn with_replica(self, replica: usize) -> Self {
        match self {
            Error::Divergence { step, .. } => Error::Divergence {
                replica: Some(replica),
                step,
            },
            other => other,
        }
    }
}
