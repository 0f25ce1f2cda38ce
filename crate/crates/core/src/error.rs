use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    /// A truncated operation discarded more probability mass than allowed.
    #[error("truncation error in {op}: discarded mass {lost:.3e} exceeds budget {budget:.3e}")]
    Truncation {
        op: &'static str,
        lost: f64,
        budget: f64,
    },

    /// Invalid input or configuration; the message carries the field path.
    #[error("{0}")]
    Invalid(String),

    /// The exact detector model only enumerates up to a configured photon cap.
    #[error(
        "exact detector model supports at most {cap} photons, got {n}; \
         use the Monte Carlo sampler for brighter inputs"
    )]
    PhotonCap { n: usize, cap: usize },

    /// Probe set cannot identify the requested number of Fock components.
    #[error(
        "response estimation is ill-conditioned: smallest singular value {sv:.3e} \
         is below {cutoff:.3e} of the largest"
    )]
    IllConditioned { sv: f64, cutoff: f64 },

    /// Pattern-subset fit kept failing after resampling.
    #[error("pattern-subset fit degenerate after {retries} resampling attempts")]
    DegenerateFit { retries: usize },

    /// Reconstruction trace fell below the accepted deficit; the response
    /// model does not explain the data and renormalizing would hide that.
    #[error("reconstruction trace {trace:.4} is below 0.98; refusing to renormalize")]
    TraceDeficit { trace: f64 },

    /// Heralding weight vanished; nothing to condition on.
    #[error("heralding weight is zero; no idler singles to condition on")]
    ZeroHeraldWeight,

    /// Displacement estimation asked to invert outside the probe envelope.
    #[error(
        "observed zero-click probability {p:.4e} lies outside the probe envelope \
         [{lo:.4e}, {hi:.4e}]"
    )]
    Extrapolation { p: f64, lo: f64, hi: f64 },

    /// A numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Text-format parse failure, pointing at the offending line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A pipeline stage is missing its inputs.
    #[error("missing input: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
