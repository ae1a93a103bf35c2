//! Batch orchestration: job planning over (generic, window), a local worker
//! pool, and a checkpointed manifest that makes runs resumable.
//!
//! Every job draws its randomness from `job_seed(master, generic, window)`,
//! so results do not depend on worker count, scheduling order, or which
//! other jobs exist. The manifest is rewritten through a temp file and an
//! atomic rename after every job completion.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{self, clean_patients, eligible_generics, match_controls, verify_cohort};
use crate::ehr::{parse_events, parse_patients, Code, Day, EventStore, PatientTable};
use crate::error::{Error, Result};
use crate::evaluate::{cross_validate, make_folds, window_summary, ModelResult, DEFAULT_FOLDS};
use crate::forest::ForestParams;
use crate::rng::{job_seed, mix};
use crate::tabulate::{
    build_table, guard_sample, leakage_scan, prevalence_filter_with, PrevalenceMode,
    DEFAULT_PREVALENCE,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DEFAULT_WINDOWS: [u32; 4] = [30, 182, 730, 1825];

const FOLD_STREAM: u64 = 1;
const FOREST_STREAM: u64 = 2;

/// Everything that determines results. Persisted in the manifest header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub patients_path: PathBuf,
    pub events_path: PathBuf,
    pub windows: Vec<u32>,
    pub min_cases: usize,
    pub min_dx: usize,
    pub min_visit_dates: usize,
    pub dob_tolerance: Day,
    pub prevalence: f64,
    #[serde(default)]
    pub prevalence_mode: PrevalenceMode,
    /// Forest hyperparameters; the seed is replaced per job.
    pub forest: ForestParams,
    pub folds: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(patients_path: impl Into<PathBuf>, events_path: impl Into<PathBuf>) -> RunConfig {
        RunConfig {
            patients_path: patients_path.into(),
            events_path: events_path.into(),
            windows: DEFAULT_WINDOWS.to_vec(),
            min_cases: cohort::DEFAULT_MIN_CASES,
            min_dx: cohort::DEFAULT_MIN_DX,
            min_visit_dates: cohort::DEFAULT_MIN_VISIT_DATES,
            dob_tolerance: cohort::DEFAULT_DOB_TOLERANCE,
            prevalence: DEFAULT_PREVALENCE,
            prevalence_mode: PrevalenceMode::Pooled,
            forest: ForestParams::default(),
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::Config("windows must be non-empty".into()));
        }
        if self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("windows must be strictly increasing".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.prevalence) {
            return Err(Error::Config("prevalence must lie in [0, 1)".into()));
        }
        if self.dob_tolerance < 0 {
            return Err(Error::Config("dob tolerance must be >= 0".into()));
        }
        self.forest.validate()
    }
}

/// How a run executes. Never affects results and is not persisted.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub emit_cohorts: Option<PathBuf>,
    pub emit_tables: Option<PathBuf>,
    /// Stop dispatching after this many completions in this invocation,
    /// leaving the rest Pending.
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> RunOptions {
        RunOptions {
            out_dir: out_dir.into(),
            workers: thread::available_parallelism().map_or(1, |n| n.get()),
            ..RunOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail")]
pub enum JobStatus {
    Pending,
    Done,
    Skipped(String),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub generic: Code,
    pub window_days: u32,
    pub status: JobStatus,
    pub result: Option<ModelResult>,
}

impl Job {
    pub fn pending(generic: Code, window_days: u32) -> Job {
        Job {
            generic,
            window_days,
            status: JobStatus::Pending,
            result: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.status == JobStatus::Done
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window_days: u32,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
    pub n_models: usize,
    pub n_skipped: usize,
    pub n_failed: usize,
    pub n_pending: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    config: RunConfig,
    summaries: Vec<WindowReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub fingerprint: String,
    pub config: RunConfig,
    pub jobs: Vec<Job>,
}

impl Manifest {
    pub fn done(&self) -> impl Iterator<Item = &ModelResult> {
        self.jobs.iter().filter_map(|j| j.result.as_ref())
    }

    pub fn n_failed(&self) -> usize {
        self.jobs
            .iter()
            .filter(|j| matches!(j.status, JobStatus::Failed(_)))
            .count()
    }

    pub fn n_pending(&self) -> usize {
        self.jobs
            .iter()
            .filter(|j| j.status == JobStatus::Pending)
            .count()
    }

    pub fn summaries(&self) -> Vec<WindowReport> {
        self.config
            .windows
            .iter()
            .map(|&w| {
                let jobs: Vec<&Job> = self.jobs.iter().filter(|j| j.window_days == w).collect();
                let results: Vec<ModelResult> =
                    jobs.iter().filter_map(|j| j.result.clone()).collect();
                let summary = window_summary(&results).ok();
                let count = |f: fn(&JobStatus) -> bool| jobs.iter().filter(|j| f(&j.status)).count();
                WindowReport {
                    window_days: w,
                    mean_auc: summary.map(|s| s.mean),
                    std_auc: summary.map(|s| s.std),
                    n_models: results.len(),
                    n_skipped: count(|s| matches!(s, JobStatus::Skipped(_))),
                    n_failed: count(|s| matches!(s, JobStatus::Failed(_))),
                    n_pending: count(|s| *s == JobStatus::Pending),
                }
            })
            .collect()
    }

    /// JSON lines: a header with the fingerprint, config and per-window
    /// summaries, then one job per line in plan order.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            summaries: self.summaries(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for job in &self.jobs {
            out.push_str(&serde_json::to_string(job)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Manifest> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Manifest("missing header line".into()))?,
        )?;
        let jobs = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Job>, _>>()?;
        let mut seen = BTreeSet::new();
        for j in &jobs {
            if !seen.insert((j.generic, j.window_days)) {
                return Err(Error::Manifest(format!(
                    "duplicate job ({}, {})",
                    j.generic, j.window_days
                )));
            }
            if j.is_done() != j.result.is_some() {
                return Err(Error::Manifest(format!(
                    "job ({}, {}) status and result disagree",
                    j.generic, j.window_days
                )));
            }
        }
        Ok(Manifest {
            fingerprint: header.fingerprint,
            config: header.config,
            jobs,
        })
    }

    pub fn read(out_dir: &Path) -> Result<Manifest> {
        Manifest::from_jsonl(&fs::read_to_string(out_dir.join(MANIFEST_FILE))?)
    }

    /// Atomic replace: write a sibling temp file, then rename over the manifest.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_jsonl()?.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, out_dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

/// Cleaned population shared read-only by all jobs.
#[derive(Debug)]
pub struct Inputs {
    pub patients: PatientTable,
    pub store: EventStore,
    /// SHA-256 of the raw patients and events files.
    pub digest: String,
}

pub fn load_inputs(config: &RunConfig) -> Result<Inputs> {
    let patients_raw = fs::read(&config.patients_path)?;
    let events_raw = fs::read(&config.events_path)?;
    let mut hasher = Sha256::new();
    hasher.update(Sha256::digest(&patients_raw));
    hasher.update(Sha256::digest(&events_raw));
    let digest = hex::encode(hasher.finalize());

    let mut patients = parse_patients(patients_raw.as_slice())?;
    let store = parse_events(events_raw.as_slice(), &mut patients)?;
    let (patients, store) = clean_patients(&patients, &store, config.min_dx, config.min_visit_dates);
    Ok(Inputs {
        patients,
        store,
        digest,
    })
}

/// Hash of the result-determining configuration and the input contents.
/// File paths are excluded so a moved input tree still resumes.
pub fn fingerprint(config: &RunConfig, input_digest: &str) -> Result<String> {
    let mut canonical = config.clone();
    canonical.patients_path = PathBuf::new();
    canonical.events_path = PathBuf::new();
    canonical.forest.seed = 0;
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&canonical)?);
    hasher.update(input_digest.as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

/// Eligible generics crossed with the configured windows, ordered by
/// (generic, window).
pub fn plan_jobs(store: &EventStore, _patients: &PatientTable, config: &RunConfig) -> Result<Vec<Job>> {
    let generics = eligible_generics(store, config.min_cases);
    if generics.is_empty() {
        return Err(Error::EmptyPlan);
    }
    Ok(generics
        .iter()
        .flat_map(|&g| config.windows.iter().map(move |&w| Job::pending(g, w)))
        .collect())
}

enum Outcome {
    Done(ModelResult),
    Skipped(String),
    Failed(String),
}

/// Runs one (generic, window) job end to end. Pure apart from optional
/// audit files.
fn run_job(
    inputs: &Inputs,
    config: &RunConfig,
    options: &RunOptions,
    generic: Code,
    window_days: u32,
) -> Result<Outcome> {
    let seed = job_seed(config.seed, generic, window_days);
    let cohort = match_controls(&inputs.store, &inputs.patients, generic, config.dob_tolerance);
    verify_cohort(&cohort, &inputs.store, &inputs.patients, config.dob_tolerance)?;
    if let Some(dir) = &options.emit_cohorts {
        let f = fs::File::create(dir.join(format!("cohort_{generic}.csv")))?;
        cohort::write_cohort_csv(&cohort, BufWriter::new(f))?;
    }
    if cohort.pairs.len() < config.folds {
        return Ok(Outcome::Skipped(format!(
            "too few pairs ({} < {} folds)",
            cohort.pairs.len(),
            config.folds
        )));
    }

    let table = build_table(&cohort, &inputs.store, &inputs.patients, window_days)?;
    let leaks = leakage_scan(&table, &inputs.store, guard_sample(table.n_rows()));
    if let Some(first) = leaks.first() {
        return Err(Error::Leakage(format!(
            "{} censored feature bits, first {} for patient {}",
            leaks.len(),
            first.feature,
            first.patient_id
        )));
    }
    let table = prevalence_filter_with(&table, config.prevalence, config.prevalence_mode);
    if let Some(dir) = &options.emit_tables {
        let f = fs::File::create(dir.join(format!("table_{generic}_{window_days}.csv")))?;
        table.write_csv(BufWriter::new(f))?;
    }

    let plan = make_folds(cohort.pairs.len(), config.folds, mix(seed, FOLD_STREAM))?;
    let params = ForestParams {
        seed: mix(seed, FOREST_STREAM),
        ..config.forest.clone()
    };
    let labels = table.labels().to_vec();
    Ok(Outcome::Done(cross_validate(&table, &labels, &plan, &params)?))
}

fn settle(job: &mut Job, outcome: Result<Outcome>) {
    let (status, result) = match outcome {
        Ok(Outcome::Done(r)) => (JobStatus::Done, Some(r)),
        Ok(Outcome::Skipped(reason)) => (JobStatus::Skipped(reason), None),
        Ok(Outcome::Failed(msg)) => (JobStatus::Failed(msg), None),
        Err(e) => (JobStatus::Failed(e.to_string()), None),
    };
    job.status = status;
    job.result = result;
}

fn prepare_dirs(options: &RunOptions) -> Result<()> {
    fs::create_dir_all(&options.out_dir)?;
    for dir in [&options.emit_cohorts, &options.emit_tables].into_iter().flatten() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Executes every Pending or Failed job, checkpointing after each completion.
fn execute(mut manifest: Manifest, inputs: &Inputs, options: &RunOptions) -> Result<Manifest> {
    let todo: Vec<usize> = manifest
        .jobs
        .iter()
        .enumerate()
        .filter(|(_, j)| matches!(j.status, JobStatus::Pending | JobStatus::Failed(_)))
        .map(|(i, _)| i)
        .collect();
    for &i in &todo {
        manifest.jobs[i] = Job::pending(manifest.jobs[i].generic, manifest.jobs[i].window_days);
    }
    manifest.write(&options.out_dir)?;
    if todo.is_empty() || options.stop_after == Some(0) {
        return Ok(manifest);
    }

    let config = manifest.config.clone();
    let coords: Vec<(Code, u32)> = todo
        .iter()
        .map(|&i| (manifest.jobs[i].generic, manifest.jobs[i].window_days))
        .collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = options.workers.clamp(1, todo.len());
    let (tx, rx) = mpsc::channel::<(usize, Result<Outcome>)>();

    thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, coords, config) = (&next, &stop, &coords, &config);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(generic, window)) = coords.get(k) else {
                    break;
                };
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    run_job(inputs, config, options, generic, window)
                }))
                .unwrap_or_else(|_| Ok(Outcome::Failed("job panicked".into())));
                if tx.send((k, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut first_error = None;
        for (completed, (k, outcome)) in (1..).zip(rx) {
            settle(&mut manifest.jobs[todo[k]], outcome);
            if options.stop_after.is_some_and(|n| completed >= n) {
                stop.store(true, Ordering::SeqCst);
            }
            if let Err(e) = manifest.write(&options.out_dir) {
                stop.store(true, Ordering::SeqCst);
                first_error.get_or_insert(e);
            }
        }
        first_error.map_or(Ok(()), Err)
    })?;
    Ok(manifest)
}

/// Plans and executes a run. If `out_dir` already holds a manifest with the
/// same fingerprint the run continues from it; a different fingerprint is
/// refused.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<Manifest> {
    config.validate()?;
    prepare_dirs(options)?;
    let inputs = load_inputs(config)?;
    let fp = fingerprint(config, &inputs.digest)?;
    if options.out_dir.join(MANIFEST_FILE).exists() {
        let existing = Manifest::read(&options.out_dir)?;
        if existing.fingerprint != fp {
            return Err(Error::FingerprintMismatch);
        }
        return execute(existing, &inputs, options);
    }
    let jobs = plan_jobs(&inputs.store, &inputs.patients, config)?;
    let manifest = Manifest {
        fingerprint: fp,
        config: config.clone(),
        jobs,
    };
    execute(manifest, &inputs, options)
}

/// Re-executes Pending and Failed jobs of the manifest in `options.out_dir`.
pub fn resume(options: &RunOptions) -> Result<Manifest> {
    prepare_dirs(options)?;
    let manifest = Manifest::read(&options.out_dir)?;
    let inputs = load_inputs(&manifest.config)?;
    if fingerprint(&manifest.config, &inputs.digest)? != manifest.fingerprint {
        return Err(Error::FingerprintMismatch);
    }
    execute(manifest, &inputs, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new("p", "e");
        c.validate().unwrap();
        c.windows = vec![30, 30];
        assert!(c.validate().is_err());
        c.windows = vec![];
        assert!(c.validate().is_err());
        c.windows = vec![0, 60];
        c.folds = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_paths_but_not_seed() {
        let a = RunConfig::new("a/p.csv", "a/e.csv");
        let b = RunConfig::new("b/p.csv", "b/e.csv");
        assert_eq!(fingerprint(&a, "x").unwrap(), fingerprint(&b, "x").unwrap());
        assert_ne!(fingerprint(&a, "x").unwrap(), fingerprint(&a, "y").unwrap());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(fingerprint(&a, "x").unwrap(), fingerprint(&c, "x").unwrap());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let m = Manifest {
            fingerprint: "f".into(),
            config: RunConfig::new("p", "e"),
            jobs: vec![Job::pending(1, 30), Job::pending(1, 30)],
        };
        let text = m.to_jsonl().unwrap();
        assert!(Manifest::from_jsonl(&text).is_err());
        let ok = Manifest {
            jobs: vec![Job::pending(1, 30), Job::pending(1, 182)],
            ..m
        };
        assert_eq!(Manifest::from_jsonl(&ok.to_jsonl().unwrap()).unwrap(), ok);
    }

    #[test]
    fn manifest_text_round_trips_exactly() {
        let result = ModelResult {
            generic: 3,
            window_days: 30,
            n_pairs: 12,
            n_features_postfilter: 40,
            fold_aucs: vec![0.9917355371900827, 0.1 + 0.2],
            mean_auc: 0.9960224403122131,
            std_auc: 0.0015789328686815446,
        };
        let m = Manifest {
            fingerprint: "f".into(),
            config: RunConfig::new("p", "e"),
            jobs: vec![
                Job {
                    generic: 3,
                    window_days: 30,
                    status: JobStatus::Done,
                    result: Some(result),
                },
                Job {
                    generic: 3,
                    window_days: 182,
                    status: JobStatus::Skipped("too few pairs (4 < 10 folds)".into()),
                    result: None,
                },
            ],
        };
        let text = m.to_jsonl().unwrap();
        let back = Manifest::from_jsonl(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl().unwrap(), text);
    }
}
