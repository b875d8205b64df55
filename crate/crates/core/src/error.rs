use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("node {node} has zero degree; add self-loops before normalizing")]
    DegenerateDegree { node: usize },

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite gradient in `{param}` at flat index {index} (value {value})")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },

    #[error("backward has already been run on this tape")]
    BackwardTwice,

    #[error("backward requires a 1x1 loss tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("training interrupted at epoch {epoch}, step {step}")]
    Interrupted { epoch: usize, step: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Format { .. } | Error::Shape(_) | Error::Io { .. }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors() {
        assert!(Error::Config("x".into()).is_usage());
        assert!(Error::format("a.json", "bad").is_usage());
        assert!(Error::io("a", std::io::Error::other("gone")).is_usage());
        assert!(!Error::BackwardTwice.is_usage());
        assert!(!Error::Interrupted { epoch: 0, step: 1 }.is_usage());
    }

    #[test]
    fn messages_name_the_path() {
        let e = Error::format("data/train.jsonl", "line 3: missing label");
        assert_eq!(e.to_string(), "format error in data/train.jsonl: line 3: missing label");
    }
}
