use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OsmeeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),

    #[error("value {value} at index {index} is outside the domain of the {family} family")]
    Domain {
        family: &'static str,
        index: usize,
        value: f64,
    },

    #[error("non-finite mean for observation {observation}, sample {sample}")]
    NonFiniteMean { observation: usize, sample: usize },

    #[error("need at least {needed} distinct points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("construction points are degenerate (constant)")]
    DegenerateInput,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },
}

pub type Result<T> = std::result::Result<T, OsmeeError>;
