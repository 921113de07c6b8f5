//! Error taxonomy shared across the pipeline.
//!
//! Each variant maps to a stable process exit code (see [`Error::exit_code`])
//! so batch runs can be triaged from shell scripts without parsing stderr.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model spec's layer shapes do not chain.
    #[error("segmentation failed: {0}")]
    Segmentation(String),

    /// A tensor or vector did not have the expected shape.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Synthetic source generation failed a precondition or could not reach
    /// the separability floor within its attempt budget.
    #[error("source generation failed: {0}")]
    Generation(String),

    /// An operation received an empty batch.
    #[error("empty input batch")]
    EmptyInput,

    /// Clustering metrics need at least two classes.
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    /// Scale alignment divided by a zero target inter-class distance.
    #[error("degenerate scale: target inter-class distance is zero")]
    DegenerateScale,

    /// Rotation alignment saw an all-zero centroid.
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),

    /// Anchor pairing preconditions violated.
    #[error("pairing failed: {0}")]
    Pairing(String),

    /// Repair training produced a non-finite loss.
    #[error("repair diverged at episode {episode}")]
    RepairDivergence { episode: usize },

    /// The search budget could not admit any layer.
    #[error("search budget exhausted before any selection (budget {budget:.4}, cheapest candidate {cheapest:.4})")]
    SearchBudgetExhausted { budget: f64, cheapest: f64 },

    /// The search terminated without selecting a single layer.
    #[error("search selected no layers after {pools_visited} pools")]
    EmptySearchResult { pools_visited: usize },

    /// Repair-rate normalization divided by a zero anchor score.
    #[error("degenerate repair rate: anchor score is zero")]
    DegenerateRate,

    /// A metric's denominator was zero.
    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A stored artifact failed its content-hash check.
    #[error("integrity error: manifest hash {expected} does not match blob hash {got}")]
    Integrity { expected: String, got: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable exit code for the CLI. Zero is never returned for an error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Integrity { .. } => 4,
            Error::Segmentation(_) => 5,
            Error::Shape { .. } => 6,
            Error::Generation(_) => 7,
            Error::EmptyInput => 8,
            Error::DegenerateClustering(_) => 9,
            Error::DegenerateScale => 10,
            Error::DegenerateRotation(_) => 11,
            Error::Pairing(_) => 12,
            Error::RepairDivergence { .. } => 13,
            Error::SearchBudgetExhausted { .. } => 14,
            Error::EmptySearchResult { .. } => 15,
            Error::DegenerateRate => 16,
            Error::DegenerateMetric(_) => 17,
            Error::Json(_) => 18,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn exit_codes_are_distinct_and_nonzero() {
        let errors: Vec<Error> = vec![
            Error::Segmentation("x".into()),
            Error::Shape { expected: "a".into(), got: "b".into() },
            Error::Generation("floor missed".into()),
            Error::EmptyInput,
            Error::DegenerateClustering("x".into()),
            Error::DegenerateScale,
            Error::DegenerateRotation("x".into()),
            Error::Pairing("x".into()),
            Error::RepairDivergence { episode: 3 },
            Error::SearchBudgetExhausted { budget: 0.0, cheapest: 1.0 },
            Error::EmptySearchResult { pools_visited: 0 },
            Error::DegenerateRate,
            Error::DegenerateMetric("x".into()),
            Error::Config("x".into()),
            Error::Integrity { expected: "a".into(), got: "b".into() },
        ];
        let mut seen = HashSet::new();
        for e in &errors {
            let code = e.exit_code();
            assert!(code != 0, "error {e} must not exit 0");
            assert!(seen.insert(code), "duplicate exit code {code} for {e}");
        }
    }
}
