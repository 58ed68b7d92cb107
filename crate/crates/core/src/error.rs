use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
///
/// Variants group into three classes that the command line maps onto exit
/// codes: I/O (1), validation of inputs and arguments (2) and numerical
/// failures (3).
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {id}: invalid field `{field}`: {message}")]
    Validation {
        id: String,
        field: String,
        message: String,
    },

    #[error("profile set is empty")]
    EmptySet,

    #[error("record {id}: missing covariate `{covariate}`")]
    MissingCovariate { id: String, covariate: String },

    #[error("{0}")]
    Domain(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("penalized normal equations are singular; rank deficiency introduced by term `{term}`")]
    RankDeficient { term: String },

    #[error("effective degrees of freedom exhausted: N - tr[KG] = {dof:.6} <= 0")]
    Saturated { dof: f64 },

    #[error("model over-parameterized for the data: N - 2 tr[KG] = {denominator:.6} <= 0")]
    OverParameterized { denominator: f64 },

    #[error("conductivity n*chi vanishes or is not finite at r = {radius}")]
    SingularConductivity { radius: f64 },

    #[error("Gauss-Newton failed to converge after {iterations} iterations (objective {objective:.6e})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        /// Final parameter iterate, kept so callers can inspect or restart.
        iterate: Vec<f64>,
    },
}

impl Error {
    /// Process exit code for the command line: 1 = I/O, 2 = validation, 3 = numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::EmptySet
            | Error::MissingCovariate { .. }
            | Error::Domain(_)
            | Error::Spec(_)
            | Error::Argument(_) => 2,
            Error::RankDeficient { .. }
            | Error::Saturated { .. }
            | Error::OverParameterized { .. }
            | Error::SingularConductivity { .. }
            | Error::NonConvergence { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
