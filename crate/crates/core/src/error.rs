use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0} at line {1}")]
    Parse(String, u64),

    #[error("duplicate patient_id {0}")]
    DuplicatePatient(u32),

    #[error("unknown patient_id {patient_id} at line {line}")]
    UnknownPatient { patient_id: u32, line: u64 },

    #[error("event date {date} precedes dob {dob} for patient {patient_id} at line {line}")]
    EventBeforeBirth {
        patient_id: u32,
        date: i32,
        dob: i32,
        line: u64,
    },

    #[error("invalid reference range: low {low} >= high {high}")]
    ReferenceRange { low: f64, high: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no pairs")]
    NoPairs,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate cohort")]
    DegenerateCohort,

    #[error("degenerate fold {0}")]
    DegenerateFold(usize),

    #[error("cohort too small for k folds ({n_pairs} pairs, k = {k})")]
    TooFewPairs { n_pairs: usize, k: usize },

    #[error("zero-variance sample")]
    ZeroVariance,

    #[error("row does not conform to the forest catalog: {0}")]
    CatalogMismatch(String),

    #[error("cohort invariant violated: {0}")]
    CohortInvariant(String),

    #[error("leakage detected: {0}")]
    Leakage(String),

    #[error("empty plan")]
    EmptyPlan,

    #[error("config changed; refusing to resume")]
    FingerprintMismatch,

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
