use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] segrobust::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CliError::Malformed {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 usage or config, 2 numerical divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigParse { .. } => 1,
            CliError::Io { .. } | CliError::Malformed { .. } => 3,
            CliError::Core(e) if e.is_divergence() => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_mapping() {
        let div = CliError::Core(segrobust::Error::Divergence {
            epoch: 3,
            detail: "loss NaN".into(),
        });
        assert_eq!(div.exit_code(), 2);
        let wrapped = CliError::Core(segrobust::Error::Subject {
            subject: "s".into(),
            source: Box::new(segrobust::Error::Divergence {
                epoch: 0,
                detail: String::new(),
            }),
        });
        assert_eq!(wrapped.exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(segrobust::Error::Config("x".into())).exit_code(), 1);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(CliError::io("p", io).exit_code(), 3);
    }
}
