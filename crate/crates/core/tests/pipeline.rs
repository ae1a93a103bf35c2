mod common;

use std::fs;

use rxcast::evaluate::{mean_std, KDE_POINTS};
use rxcast::pipeline::{
    load_inputs, plan_jobs, resume, run, Job, JobStatus, Manifest, RunConfig, RunOptions, MANIFEST_FILE,
};
use rxcast::report::report;
use rxcast::synth::SynthConfig;
use rxcast::Error;
use tempfile::TempDir;

use common::write_dataset;

fn setup(n_generics: usize) -> (TempDir, RunConfig) {
    let dir = TempDir::new().unwrap();
    let synth = SynthConfig {
        n_patients: 900,
        n_generics,
        case_fraction: 0.08,
        ..SynthConfig::default()
    };
    let data = write_dataset(dir.path(), &synth, 42);
    let mut config = RunConfig::new(&data.patients_path, &data.events_path);
    config.min_cases = 30;
    config.forest.n_trees = 15;
    config.folds = 5;
    config.seed = 1;
    (dir, config)
}

fn options(dir: &TempDir, name: &str) -> RunOptions {
    let mut o = RunOptions::new(dir.path().join(name));
    o.workers = 2;
    o
}

#[test]
fn plan_is_generic_by_window_product() {
    let (_dir, config) = setup(3);
    let inputs = load_inputs(&config).unwrap();
    let jobs = plan_jobs(&inputs.store, &inputs.patients, &config).unwrap();
    assert_eq!(jobs.len(), 12);
    let coords: Vec<(u32, u32)> = jobs.iter().map(|j| (j.generic, j.window_days)).collect();
    let mut sorted = coords.clone();
    sorted.sort();
    assert_eq!(coords, sorted);
    assert!(jobs.iter().all(|j| j.status == JobStatus::Pending && j.result.is_none()));

    let strict = RunConfig {
        min_cases: 1_000_000,
        ..config
    };
    assert!(matches!(
        plan_jobs(&inputs.store, &inputs.patients, &strict),
        Err(Error::EmptyPlan)
    ));
}

#[test]
fn small_cohorts_are_skipped_not_failed() {
    let (dir, mut config) = setup(2);
    config.windows = vec![0];
    config.folds = 1000;
    let m = run(&config, &options(&dir, "out")).unwrap();
    assert_eq!(m.jobs.len(), 2);
    for job in &m.jobs {
        match &job.status {
            JobStatus::Skipped(reason) => assert!(reason.starts_with("too few pairs")),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(report(&m, &dir.path().join("out")).is_err());
}

#[test]
fn resume_reruns_only_pending_and_failed() {
    let (dir, mut config) = setup(3);
    config.windows = vec![0, 60];
    let reference = run(&config, &options(&dir, "ref")).unwrap();
    let original = fs::read_to_string(dir.path().join("ref").join(MANIFEST_FILE)).unwrap();

    let mut damaged = reference.clone();
    damaged.jobs[1] = Job::pending(damaged.jobs[1].generic, damaged.jobs[1].window_days);
    damaged.jobs[4].status = JobStatus::Failed("simulated".into());
    damaged.jobs[4].result = None;
    // a Done job with a doctored result proves Done jobs are left alone
    damaged.jobs[2].result.as_mut().unwrap().mean_auc = 0.123;
    let out = dir.path().join("damaged");
    fs::create_dir_all(&out).unwrap();
    damaged.write(&out).unwrap();

    let mut o = options(&dir, "damaged");
    o.workers = 1;
    let healed = resume(&o).unwrap();
    assert_eq!(healed.jobs[1], reference.jobs[1]);
    assert_eq!(healed.jobs[4], reference.jobs[4]);
    assert_eq!(healed.jobs[2].result.as_ref().unwrap().mean_auc, 0.123);
    for i in [0, 3, 5] {
        assert_eq!(healed.jobs[i], reference.jobs[i]);
    }

    // all done: resume is a no-op
    let again = resume(&options(&dir, "ref")).unwrap();
    assert_eq!(again, reference);
    assert_eq!(fs::read_to_string(dir.path().join("ref").join(MANIFEST_FILE)).unwrap(), original);
}

#[test]
fn changed_config_refuses_to_resume() {
    let (dir, config) = setup(2);
    let o = options(&dir, "out");
    let mut quick = config.clone();
    quick.windows = vec![0];
    run(&quick, &o).unwrap();
    let other = RunConfig { seed: 2, ..quick.clone() };
    let err = run(&other, &o).unwrap_err();
    assert_eq!(err.to_string(), "config changed; refusing to resume");

    // tampering with the stored config is caught by resume too
    let mut m = Manifest::read(&o.out_dir).unwrap();
    m.config.forest.n_trees += 1;
    m.write(&o.out_dir).unwrap();
    assert!(matches!(resume(&o), Err(Error::FingerprintMismatch)));
}

#[test]
fn report_shapes_and_summary_recomputation() {
    let (dir, mut config) = setup(5);
    config.windows = vec![0, 60];
    let out = dir.path().join("out");
    let m = run(&config, &options(&dir, "out")).unwrap();
    let files = report(&m, &out).unwrap();
    assert!(files.kde_skipped.is_empty());

    let results = fs::read_to_string(&files.results).unwrap();
    let mut lines = results.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 4 + config.folds + 2);
    let mut by_window: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
    let mut n_rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), header.len());
        let folds: Vec<f64> = cells[4..4 + config.folds].iter().map(|c| c.parse().unwrap()).collect();
        let mean: f64 = cells[4 + config.folds].parse().unwrap();
        assert!((mean - folds.iter().sum::<f64>() / folds.len() as f64).abs() < 1e-12);
        by_window.entry(cells[1].parse().unwrap()).or_default().push(mean);
        n_rows += 1;
    }
    assert_eq!(n_rows, m.done().count());

    let summary = fs::read_to_string(&files.summary).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let (mean, std) = mean_std(&by_window[&row[0].parse().unwrap()]);
        assert!((row[1].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((row[2].parse::<f64>().unwrap() - std).abs() < 1e-12);
        assert_eq!(row[3].parse::<usize>().unwrap(), by_window[&row[0].parse().unwrap()].len());
    }

    let kde = fs::read_to_string(&files.kde).unwrap();
    assert_eq!(kde.lines().count(), 1 + 2 * KDE_POINTS);
    let flags = fs::read_to_string(&files.flags).unwrap();
    for line in flags.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], "0");
        assert!(cells[2].parse::<f64>().unwrap() >= 0.9167);
    }
    let svg = fs::read_to_string(&files.svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}
