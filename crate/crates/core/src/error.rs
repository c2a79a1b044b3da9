use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not Hermitian (asymmetry {asymmetry:.3e}): {what}")]
    NonHermitianInput { what: String, asymmetry: f64 },

    #[error("classical probability {weight:.3e} at {location} is below the zero threshold")]
    ZeroProbability { location: String, weight: f64 },

    #[error("total jump rate is zero; no jump can be sampled")]
    ZeroTotalRate,

    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },

    #[error("symplectic structure needs an even classical dimension, got {0}")]
    OddDimension(usize),

    #[error("generators are linearly dependent (Gram rank {rank} < {expected})")]
    DependentGenerators { rank: usize, expected: usize },

    #[error(
        "requested dxi-dxi correlation is infeasible: joint covariance has eigenvalue {min_eig:.3e}; offending minor {minor:?} has determinant {minor_det:.3e}"
    )]
    InfeasibleNoiseChoice {
        min_eig: f64,
        minor: (usize, usize),
        minor_det: f64,
    },

    #[error("monitoring condition D_Q = G^+ D_C^- G violated (residual {residual:.3e})")]
    MonitoringInfeasible { residual: f64 },

    #[error("minimum-noise diffusion does not exist for this decoherence matrix: {0}")]
    RankDeficiency(String),

    #[error("backaction matrix varies over the lattice (max deviation {0:.3e}); fit it to a constant frame first")]
    UnsupportedXDependence(f64),

    #[error("axis {axis} has {len} nodes; central stencils need at least 3")]
    BoundaryUnderflow { axis: usize, len: usize },

    #[error("time step {dt:.3e} exceeds the diffusive stability bound {bound:.3e}")]
    CflViolation { dt: f64, bound: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model is not admissible: {0}")]
    Inadmissible(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
