use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian: max asymmetry {asymmetry:.3e}")]
    NotHermitian { asymmetry: f64 },

    #[error("matrix is ill-conditioned: condition number {condition:.3e}")]
    IllConditioned { condition: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("rank deficient: numerical rank {rank}, need {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("device {device} is orthogonal to the receive beamformer (|c^H f| = {gain:.3e})")]
    OrthogonalDevice { device: usize, gain: f64 },

    #[error("active device set is empty")]
    EmptyActiveSet,

    #[error("downlink SNR floor {requested:.4e} is unreachable (max attainable {max_attainable:.4e})")]
    InfeasibleSnrFloor { requested: f64, max_attainable: f64 },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(vec![msg.into()])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
