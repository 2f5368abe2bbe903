use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid function has nonzero mean (|<v,1>| = {mean:.3e}, allowed {allowed:.3e})")]
    NonZeroMean { mean: f64, allowed: f64 },

    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("argument out of domain: {0}")]
    OutOfDomain(String),

    #[error("step ratio r_{level} = {ratio} exceeds the user cap {r_user}")]
    RatioExceedsUser { level: usize, ratio: f64, r_user: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last update {update:.3e})")]
    FixedPointDiverged { iterations: usize, update: f64 },

    #[error("at time level {level}: {source}")]
    AtLevel {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate refinement: consecutive step sizes are equal ({0})")]
    DegenerateRefinement(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_level(self, level: usize) -> Self {
        match self {
            e @ Error::AtLevel { .. } => e,
            e => Error::AtLevel {
                level,
                source: Box::new(e),
            },
        }
    }

    /// The underlying error, looking through [`Error::AtLevel`].
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLevel { source, .. } => source.root(),
            e => e,
        }
    }
}
