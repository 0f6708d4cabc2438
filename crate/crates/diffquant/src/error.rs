use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Precondition violation on an argument (ranges, step indices, bit
    /// grammar, stage counts, ...).
    #[error("{0}")]
    InvalidArg(String),

    /// Configuration file problems: unreadable, unparseable, unknown keys,
    /// or values that fail validation. The CLI maps these to exit code 1.
    #[error("config: {0}")]
    Config(String),

    #[error("training diverged (loss not finite) at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("weight container: {0}")]
    WeightFormat(String),
}

impl Error {
    pub fn shape(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors the CLI should report as bad configuration (exit 1)
    /// rather than runtime failure (exit 2).
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
