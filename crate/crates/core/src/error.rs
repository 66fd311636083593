//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Cohort allocation cannot satisfy the per-physician floor.
    #[error("infeasible allocation: n={n} cannot give {j} physicians {min_panel} patients each")]
    InfeasibleAllocation { n: usize, j: usize, min_panel: usize },

    /// A configuration value is out of range or inconsistent with another.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Ground-truth discordance needs at least two eligible patients.
    #[error("ground truth undefined for physician {physician}: fewer than two eligible patients")]
    UndefinedGroundTruth { physician: usize },

    /// Input data degenerate for the requested operation (single class, empty panel, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative fit diverged or produced non-finite values.
    #[error("fit failed: {0}")]
    FitFailure(String),

    /// A statistic has no defined value on this input (zero variance, too few points).
    #[error("statistic undefined: {0}")]
    UndefinedStatistic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
