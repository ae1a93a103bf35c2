#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rxcast::cohort::{CasePair, Cohort};
use rxcast::ehr::{write_events, write_patients, Code, Day, EventKind, EventStore, PatientId, PatientTable};
use rxcast::synth::{deidentify, generate, GroundTruth, SynthConfig};

pub struct Dataset {
    pub patients_path: PathBuf,
    pub events_path: PathBuf,
    pub truth: GroundTruth,
}

/// Generates, de-identifies and writes a population into `dir`.
pub fn write_dataset(dir: &Path, config: &SynthConfig, seed: u64) -> Dataset {
    let (patients, store, truth) = generate(config, seed).unwrap();
    let deid = deidentify(&patients, &store, seed ^ 0xdead_beef);
    let truth = truth.remap(&deid);
    let patients_path = dir.join("patients.csv");
    let events_path = dir.join("events.csv");
    write_patients(&deid.patients, BufWriter::new(File::create(&patients_path).unwrap())).unwrap();
    write_events(&deid.store, BufWriter::new(File::create(&events_path).unwrap())).unwrap();
    Dataset {
        patients_path,
        events_path,
        truth,
    }
}

fn prescribed(store: &EventStore, pid: PatientId, generic: Code) -> bool {
    store
        .events(pid)
        .iter()
        .any(|e| e.kind == EventKind::Prescription && e.code == generic)
}

/// Straight transcription of the greedy rule: every case in (index, id)
/// order scans the whole population for the closest unused eligible control.
pub fn greedy_oracle(store: &EventStore, patients: &PatientTable, generic: Code, tol: Day) -> Cohort {
    let mut first: Vec<(Day, PatientId)> = Vec::new();
    for p in patients.iter() {
        let dates = store
            .events(p.patient_id)
            .iter()
            .filter(|e| e.kind == EventKind::Prescription && e.code == generic)
            .map(|e| e.date);
        if let Some(d) = dates.min() {
            first.push((d, p.patient_id));
        }
    }
    first.sort();

    let mut used: BTreeSet<PatientId> = BTreeSet::new();
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (index_date, case_id) in first {
        let case = patients.get(case_id).unwrap();
        let mut best: Option<(Day, PatientId)> = None;
        for c in patients.iter() {
            let diff = (c.dob - case.dob).abs();
            let eligible = c.patient_id != case_id
                && !used.contains(&c.patient_id)
                && c.sex == case.sex
                && diff <= tol
                && c.last_contact >= index_date
                && !prescribed(store, c.patient_id, generic);
            if eligible && best.is_none_or(|b| (diff, c.patient_id) < b) {
                best = Some((diff, c.patient_id));
            }
        }
        match best {
            Some((_, control_id)) => {
                used.insert(control_id);
                pairs.push(CasePair {
                    generic,
                    case_id,
                    control_id,
                    index_date,
                });
            }
            None => unmatched.push(case_id),
        }
    }
    Cohort {
        generic,
        pairs,
        unmatched,
    }
}

/// Checks the pair invariants from first principles; returns the first
/// violation found.
pub fn pair_violation(
    cohort: &Cohort,
    store: &EventStore,
    patients: &PatientTable,
    tol: Day,
) -> Option<String> {
    let mut seen = BTreeSet::new();
    for p in &cohort.pairs {
        let case = patients.get(p.case_id)?;
        let control = patients.get(p.control_id)?;
        if p.case_id == p.control_id {
            return Some(format!("self pair {}", p.case_id));
        }
        if prescribed(store, p.control_id, cohort.generic) {
            return Some(format!("control {} prescribed", p.control_id));
        }
        if case.sex != control.sex {
            return Some(format!("sex mismatch {}/{}", p.case_id, p.control_id));
        }
        if (case.dob - control.dob).abs() > tol {
            return Some(format!("dob gap {}/{}", p.case_id, p.control_id));
        }
        if control.last_contact < p.index_date {
            return Some(format!("control {} lost before index", p.control_id));
        }
        if !seen.insert(p.case_id) || !seen.insert(p.control_id) {
            return Some(format!("reused patient in pair {}/{}", p.case_id, p.control_id));
        }
    }
    None
}

/// Gaussian KDE evaluated by direct summation with an independently
/// computed rule-of-thumb bandwidth.
pub fn silverman_oracle(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let pos = q * (n - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = quantile(0.75) - quantile(0.25);
    if iqr > 0.0 {
        0.9 * sd.min(iqr / 1.34) * n.powf(-0.2)
    } else {
        sd * n.powf(-0.2)
    }
}

pub fn density_oracle(x: f64, values: &[f64], h: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    values
        .iter()
        .map(|v| (-0.5 * ((x - v) / h).powi(2)).exp())
        .sum::<f64>()
        * norm
}

/// Exhaustive Mann-Whitney count over all case/control pairs.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                total += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / total
}
