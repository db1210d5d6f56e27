use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Overlaps that no pair of weight vectors can realise.
    #[error("invalid order state: {0}")]
    InvalidState(String),

    /// A scalar argument outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration rejected during validation. `field` is a dotted path
    /// into the config, e.g. `protocol.n`.
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("non-finite weights after episode {episode}")]
    NonFinite { episode: u64 },

    #[error("protocol `{0}` has no closed-form order-parameter ODE")]
    NoClosedForm(&'static str),

    #[error("integration failed at alpha = {alpha}: {reason}")]
    IntegrationFailure { alpha: f64, reason: String },

    #[error("found {count} fixed points, at most 3 are possible")]
    TooManyFixedPoints { count: usize },

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("no phase transition for eta2 in [0, {eta2_max}]")]
    TransitionNotFound { eta2_max: f64 },

    #[error("did not reach {target} by alpha = {alpha_max} (rho = {rho_reached})")]
    Timeout {
        target: f64,
        alpha_max: f64,
        rho_reached: f64,
    },

    #[error("trajectories do not overlap in alpha")]
    DisjointRanges,

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
