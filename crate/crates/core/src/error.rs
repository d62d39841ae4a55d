use std::fmt;

/// A validation problem attached to one input row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub id: String,
    pub reason: String,
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {} (id {}): {}", self.row, self.id, self.reason)
    }
}

fn join_issues(rows: &[RowIssue]) -> String {
    rows.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("{path}: invalid rows: {}", join_issues(.rows))]
    InvalidRows { path: String, rows: Vec<RowIssue> },

    #[error("invalid sample: {0}")]
    Sample(String),

    #[error("invalid registry summary: {0}")]
    Registry(String),

    #[error("unit {id}: post-stratum `{key}` is not present in the registry")]
    UnmatchedCell { id: String, key: String },

    #[error("post-stratum `{cell}`: {reason}")]
    EmptyCell { cell: String, reason: String },

    #[error("scale factor must lie in (0, 1), got {0}")]
    ScaleOutOfRange(f64),

    #[error("{what}: no convergence after {iterations} iterations (score sup-norm {score_norm:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        score_norm: f64,
    },

    #[error("{0}: design is rank deficient")]
    RankDeficient(&'static str),

    #[error("{what}: estimates diverge (norm {norm:.2}) while the likelihood keeps improving; separation or monotone likelihood")]
    Divergence { what: &'static str, norm: f64 },

    #[error("no events in the sample")]
    NoEvents,

    #[error("stratum {stratum} has a single PSU; variance is not estimable")]
    SinglePsu { stratum: String },

    #[error("PAR baseline undefined at t = {t}: {reason}")]
    ParSupport { t: f64, reason: String },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{failed} of {total} replicates failed (limit 1%); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
