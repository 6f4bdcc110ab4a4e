use thiserror::Error;

/// Errors produced by estimation, ingestion, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty cell")]
    EmptyCell,

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid probability {0}: must lie strictly inside (0, 1)")]
    InvalidProbability(f64),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate (unit, group, period) rows at lines {lines:?}")]
    DuplicateRow { lines: Vec<usize> },

    #[error("cell too small: {}", format_cells(.cells))]
    CellTooSmall { cells: Vec<SmallCell> },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error(
        "optimizer did not converge after {iterations} iterations \
         (objective {objective:.6e}, gradient norm {gradient_norm:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        objective: f64,
        gradient_norm: f64,
    },

    #[error("replication {index} failed: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A (group, period) cell that fell below the minimum size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmallCell {
    pub group: String,
    pub period: i64,
    pub count: usize,
    pub min: usize,
}

fn format_cells(cells: &[SmallCell]) -> String {
    let shown: Vec<String> = cells
        .iter()
        .take(5)
        .map(|c| {
            format!(
                "group `{}` period {} has {} observations (minimum {})",
                c.group, c.period, c.count, c.min
            )
        })
        .collect();
    let mut out = shown.join("; ");
    if cells.len() > 5 {
        out.push_str(&format!("; and {} more", cells.len() - 5));
    }
    out
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 4,
            Error::Estimation(_) => 3,
            Error::Replication { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
