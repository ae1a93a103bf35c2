//! Per-drug prescription prediction from EHR event streams.
//!
//! The pipeline, per generic drug and truncation window: clean the
//! population, match each first-time prescription (case) to a control,
//! censor events near the index date, tabulate a sparse binary summary
//! table, train random forests under cross-validation, and summarize the
//! resulting AUC distributions.

pub mod cohort;
pub mod ehr;
pub mod error;
pub mod evaluate;
pub mod forest;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tabulate;

pub use error::{Error, Result};
