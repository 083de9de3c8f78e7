use thiserror::Error;

/// Errors produced by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("site {site} out of range for a chain of {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("system of {n_sites} sites exceeds the dense budget of {max_sites} sites")]
    SizeBudget { n_sites: usize, max_sites: usize },

    #[error("not a valid density matrix: {0}")]
    InvalidState(String),

    #[error("dissipation matrix is not Hermitian: {0}")]
    NonHermitianDissipation(String),

    #[error("steady state is degenerate: smallest |eigenvalues| {smallest:e} and {second:e}")]
    DegenerateSteadyState { smallest: f64, second: f64 },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("observable missing from measurement record: {0}")]
    MissingObservable(String),

    #[error("constraint entry has imaginary residue {residue:e} (observable {observable})")]
    ImaginaryResidue { residue: f64, observable: String },

    #[error("zero-norm coefficient vector")]
    ZeroNorm,

    #[error("degenerate spectrum: eigenvalue {index} is {value:e}")]
    DegenerateSpectrum { index: usize, value: f64 },

    #[error("shared block between patches {left} and {right} has norm {norm:e}")]
    SharedBlockTooSmall {
        left: usize,
        right: usize,
        norm: f64,
    },

    #[error("sign of patch {patch} is ambiguous: reference coefficient {coefficient:e} vs error {error:e}")]
    SignAmbiguous {
        patch: usize,
        coefficient: f64,
        error: f64,
    },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad user input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Parse(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::SizeBudget { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
