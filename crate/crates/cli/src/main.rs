use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rxcast::ehr::{write_events, write_patients};
use rxcast::pipeline::{self, Manifest, RunConfig, RunOptions};
use rxcast::synth::{self, SynthConfig};
use rxcast::tabulate::PrevalenceMode;

#[derive(Parser)]
#[command(name = "rxcast", version, about = "Predict drug prescriptions from coded health records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a de-identified synthetic population with planted signal.
    Synth(SynthArgs),
    /// Plan and execute every (generic, window) job, then write the report.
    Run(RunArgs),
    /// Continue an interrupted run in place.
    Resume {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rewrite the report files from an existing manifest.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    patients: usize,
    #[arg(long, default_value_t = 10)]
    generics: usize,
    #[arg(long, default_value_t = 30)]
    prodrome_days: u32,
    /// Probability that each signal code is planted before a case's index date.
    #[arg(long, default_value_t = 0.9)]
    signal: f64,
    /// Background events per patient-year.
    #[arg(long, default_value_t = 2.0)]
    background_rate: f64,
    /// Share of the population prescribed each generic.
    #[arg(long, default_value_t = 0.06)]
    case_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    patients: PathBuf,
    #[arg(long)]
    events: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = pipeline::DEFAULT_WINDOWS)]
    windows: Vec<u32>,
    #[arg(long, default_value_t = rxcast::cohort::DEFAULT_MIN_CASES)]
    min_cases: usize,
    #[arg(long, default_value_t = rxcast::cohort::DEFAULT_MIN_DX)]
    min_dx: usize,
    #[arg(long, default_value_t = rxcast::cohort::DEFAULT_MIN_VISIT_DATES)]
    min_visits: usize,
    #[arg(long, default_value_t = rxcast::cohort::DEFAULT_DOB_TOLERANCE)]
    dob_tol: i32,
    #[arg(long, default_value_t = rxcast::tabulate::DEFAULT_PREVALENCE)]
    prevalence: f64,
    /// Require the prevalence threshold among cases and, separately, among
    /// controls instead of over the pooled table.
    #[arg(long)]
    prevalence_per_group: bool,
    #[arg(long, default_value_t = 500)]
    trees: usize,
    #[arg(long, default_value_t = 0.10)]
    mtry: f64,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, default_value_t = rxcast::evaluate::DEFAULT_FOLDS)]
    folds: usize,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    emit_cohorts: Option<PathBuf>,
    #[arg(long)]
    emit_tables: Option<PathBuf>,
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_patients: args.patients,
        n_generics: args.generics,
        prodrome_days: args.prodrome_days,
        signal_strength: args.signal,
        background_rate: args.background_rate,
        case_fraction: args.case_fraction,
        ..SynthConfig::default()
    };
    let (patients, store, truth) = synth::generate(&config, args.seed)?;
    let deid = synth::deidentify(&patients, &store, rxcast::rng::mix(args.seed, 0xde1d));
    let truth = truth.remap(&deid);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_patients(&deid.patients, BufWriter::new(File::create(args.out.join("patients.csv"))?))?;
    write_events(&deid.store, BufWriter::new(File::create(args.out.join("events.csv"))?))?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(args.out.join("groundtruth.json"))?),
        &truth,
    )?;
    serde_json::to_writer(
        BufWriter::new(File::create(args.out.join("codemap.json"))?),
        &deid.code_map,
    )?;
    eprintln!(
        "wrote {} patients, {} events to {}",
        deid.patients.len(),
        deid.store.n_events(),
        args.out.display()
    );
    Ok(())
}

fn options(out: PathBuf, workers: Option<usize>) -> RunOptions {
    let mut o = RunOptions::new(out);
    if let Some(w) = workers {
        o.workers = w;
    }
    o
}

fn finish(manifest: &Manifest, out: &Path) -> Result<ExitCode> {
    let done = manifest.done().count();
    eprintln!(
        "{} jobs: {done} done, {} failed, {} pending",
        manifest.jobs.len(),
        manifest.n_failed(),
        manifest.n_pending()
    );
    if done > 0 {
        let files = rxcast::report::report(manifest, out)?;
        for w in files.kde_skipped {
            eprintln!("window {w}: too few distinct AUCs for a density estimate");
        }
    }
    Ok(if manifest.n_failed() > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_cmd(args: RunArgs) -> Result<ExitCode> {
    let mut config = RunConfig::new(args.patients, args.events);
    config.windows = args.windows;
    config.min_cases = args.min_cases;
    config.min_dx = args.min_dx;
    config.min_visit_dates = args.min_visits;
    config.dob_tolerance = args.dob_tol;
    config.prevalence = args.prevalence;
    if args.prevalence_per_group {
        config.prevalence_mode = PrevalenceMode::PerGroup;
    }
    config.forest.n_trees = args.trees;
    config.forest.mtry_fraction = args.mtry;
    config.forest.max_depth = args.max_depth;
    config.folds = args.folds;
    config.seed = args.seed;

    let mut opts = options(args.out.clone(), args.workers);
    opts.emit_cohorts = args.emit_cohorts;
    opts.emit_tables = args.emit_tables;
    let manifest = pipeline::run(&config, &opts)?;
    finish(&manifest, &args.out)
}

fn main() -> ExitCode {
    // clap's own usage-error code (2) would collide with "finished with failures"
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Synth(args) => synth_cmd(args).map(|()| ExitCode::SUCCESS),
        Command::Run(args) => run_cmd(args),
        Command::Resume { out, workers } => {
            pipeline::resume(&options(out.clone(), workers))
                .map_err(Into::into)
                .and_then(|m| finish(&m, &out))
        }
        Command::Report { out } => Manifest::read(&out)
            .and_then(|m| rxcast::report::report(&m, &out).map(|_| ()))
            .map(|()| ExitCode::SUCCESS)
            .map_err(Into::into),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
