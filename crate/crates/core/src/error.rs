use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which split-tree sizing inequality rejected a top-tree height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityRule {
    /// The top-tree must fit: `2^h_t - 1 <= S`.
    TopTree,
    /// Every sub-tree must fit: `2^(H - h_t + 1) - 1 <= S`.
    SubTree,
}

impl std::fmt::Display for CapacityRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CapacityRule::TopTree => f.write_str("rule 1 (top-tree fits: 2^h_t - 1 <= S)"),
            CapacityRule::SubTree => f.write_str("rule 2 (sub-tree fits: 2^(H - h_t + 1) - 1 <= S)"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(
        "capacity error: {rule} violated for h_t = {h_t}, H = {height}, S = {buffer_words}; \
         permissible h_t range is {}",
        range_text(*.min_ht, *.max_ht)
    )]
    Capacity {
        rule: CapacityRule,
        h_t: u32,
        height: u32,
        buffer_words: u64,
        min_ht: u32,
        max_ht: u32,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

fn range_text(min_ht: u32, max_ht: u32) -> String {
    if min_ht > max_ht {
        format!("empty ([{min_ht}, {max_ht}])")
    } else {
        format!("[{min_ht}, {max_ht}]")
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for filesystem failures; everything else is a configuration or input problem.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
