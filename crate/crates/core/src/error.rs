use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("{file}, line {line}: {message}")]
    Row {
        file: String,
        line: u64,
        message: String,
    },

    #[error("invalid cohort: {0}")]
    Cohort(String),

    #[error("covariate `{name}`: {message}")]
    Covariate { name: String, message: String },

    #[error("factor `{factor}`: unseen level `{level}`")]
    UnseenLevel { factor: String, level: String },

    #[error("trajectory diverges: growth exponent {exponent:.3e} exceeds {limit}")]
    Divergence { exponent: f64, limit: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("log density is not finite at the requested point")]
    NonFiniteDensity,

    #[error("sampler initialization failed after {attempts} attempts")]
    Initialization { attempts: usize },

    #[error("sampler failed: {divergent} of {total} post-warmup transitions diverged")]
    DivergenceRate { divergent: usize, total: usize },

    #[error("draws did not converge: {0}")]
    NotConverged(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error("malformed draws file: {0}")]
    Draws(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
