use serde_json::json;

/// Configuration problems exit with 2, estimation failures with 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Module(riskcal::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<riskcal::Error> for CliError {
    fn from(e: riskcal::Error) -> Self {
        CliError::Module(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Module(riskcal::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Module(riskcal::Error::Json(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Module(riskcal::Error::Csv(e))
    }
}

pub fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Module(_) => 1,
        }
    }

    pub fn report(&self) -> serde_json::Value {
        match self {
            CliError::Config(m) => json!({ "error": "config", "message": m }),
            CliError::Module(e) => json!({ "error": kind(e), "message": e.to_string() }),
        }
    }
}

fn kind(e: &riskcal::Error) -> &'static str {
    use riskcal::Error::*;
    match e {
        MissingColumn { .. } => "missing_column",
        InvalidRows { .. } => "invalid_rows",
        Sample(_) => "sample",
        Registry(_) => "registry",
        UnmatchedCell { .. } => "unmatched_cell",
        EmptyCell { .. } => "empty_cell",
        ScaleOutOfRange(_) => "scale_out_of_range",
        NoConvergence { .. } => "no_convergence",
        RankDeficient(_) => "rank_deficient",
        Divergence { .. } => "divergence",
        NoEvents => "no_events",
        SinglePsu { .. } => "single_psu",
        ParSupport { .. } => "par_support",
        Singular(_) => "singular",
        InvalidArgument(_) => "invalid_argument",
        TooManyFailures { .. } => "too_many_failures",
        Csv(_) => "csv",
        Json(_) => "json",
        Io(_) => "io",
    }
}
