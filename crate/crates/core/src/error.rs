use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("point ({x}, {y}) lies outside the domain")]
    Location { x: f64, y: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("circulant embedding not positive semidefinite after {doublings} doublings (embed size {embed_size}, min eigenvalue {min_eigenvalue:e})")]
    NotEmbeddable {
        doublings: u32,
        embed_size: usize,
        min_eigenvalue: f64,
    },

    #[error(
        "kernel matrix is not positive semidefinite (pivot {pivot:e} below -1e-8 * {max_diag:e})"
    )]
    KernelNotPsd { pivot: f64, max_diag: f64 },

    #[error("conjugate gradients did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {sample} at level {level} failed: {source}")]
    Sample {
        sample: usize,
        level: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line tool: 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Location { .. }
            | Error::Domain(_)
            | Error::NotEmbeddable { .. }
            | Error::KernelNotPsd { .. } => 2,
            Error::NoConvergence { .. } | Error::Numeric(_) => 3,
            Error::Io { .. } => 4,
            Error::Step { source, .. } | Error::Sample { source, .. } => source.exit_code(),
        }
    }
}
