use thiserror::Error;

/// Errors raised by the estimation pipeline.
///
/// Variants are grouped by the class of failure so callers (the CLI in
/// particular) can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum MltaError {
    // configuration / schema problems
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rule for item `{item}` references absent column `{column}`")]
    MissingColumn { item: String, column: String },
    #[error("item `{item}`, respondent `{id}`: unknown level label `{label}`")]
    UnknownLevel {
        item: String,
        id: String,
        label: String,
    },
    #[error("covariate `{variable}`, respondent `{id}`: unseen category `{label}`")]
    UnseenCategory {
        variable: String,
        id: String,
        label: String,
    },

    // data problems
    #[error("data error: {0}")]
    Data(String),
    #[error("no complete cases remain after filtering ({dropped} rows dropped)")]
    NoCompleteCases { dropped: usize },
    #[error("design matrix is rank deficient; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    // numerical problems
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("all {} starts failed: {}", .diagnostics.len(), .diagnostics.join("; "))]
    AllStartsFailed { diagnostics: Vec<String> },
    #[error("all grid cells failed")]
    AllCellsFailed,
    #[error("{failed} of {total} bootstrap replicates failed (limit is 20%)")]
    TooManyFailedReplicates { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl MltaError {
    pub fn class(&self) -> ErrorClass {
        use MltaError::*;
        match self {
            Config(_) | MissingColumn { .. } | Json(_) => ErrorClass::Config,
            UnknownLevel { .. }
            | UnseenCategory { .. }
            | Data(_)
            | NoCompleteCases { .. }
            | RankDeficient { .. }
            | Dimension(_)
            | Io(_)
            | Csv(_) => ErrorClass::Data,
            Numerical(_)
            | AllStartsFailed { .. }
            | AllCellsFailed
            | TooManyFailedReplicates { .. } => ErrorClass::Numerical,
        }
    }

    /// Short module-qualified code, e.g. `data/unknown-level`.
    pub fn code(&self) -> &'static str {
        use MltaError::*;
        match self {
            Config(_) => "config/invalid",
            MissingColumn { .. } => "config/missing-column",
            UnknownLevel { .. } => "data/unknown-level",
            UnseenCategory { .. } => "data/unseen-category",
            Data(_) => "data/invalid",
            NoCompleteCases { .. } => "data/no-complete-cases",
            RankDeficient { .. } => "em/rank-deficient",
            Dimension(_) => "model/dimension",
            Numerical(_) => "em/numerical",
            AllStartsFailed { .. } => "em/all-starts-failed",
            AllCellsFailed => "select/all-cells-failed",
            TooManyFailedReplicates { .. } => "bootstrap/too-many-failures",
            Io(_) => "io/error",
            Csv(_) => "io/csv",
            Json(_) => "io/json",
        }
    }
}

pub type Result<T, E = MltaError> = std::result::Result<T, E>;
