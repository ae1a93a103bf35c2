//! Censoring by truncation window and assembly of the summary table.
//!
//! The table has one row per cohort member and one column per feature. Column
//! 0 is always the patient's age in whole years at the index date; every
//! other column is the binary presence of an event key before the censored
//! window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::ehr::{Band, Code, Day, Event, EventKind, EventStore, PatientId, PatientTable};
use crate::error::{Error, Result};

pub type FeatureId = u32;

pub const AGE: FeatureId = 0;
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKey {
    Age,
    Event {
        kind: EventKind,
        code: Code,
        band: Option<Band>,
    },
}

impl FeatureKey {
    /// Prescriptions are keyed on the generic code only.
    pub fn of(e: &Event) -> FeatureKey {
        FeatureKey::Event {
            kind: e.kind,
            code: e.code,
            band: if e.kind.is_banded() { e.band } else { None },
        }
    }

    fn is_target(&self, generic: Code) -> bool {
        matches!(self, FeatureKey::Event { kind: EventKind::Prescription, code, .. } if *code == generic)
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKey::Age => f.write_str("AGE"),
            FeatureKey::Event {
                kind,
                code,
                band: Some(b),
            } => write!(f, "{}:{}:{}", kind.token(), code, b),
            FeatureKey::Event { kind, code, .. } => write!(f, "{}:{}", kind.token(), code),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Case,
    Control,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowId {
    pub patient_id: PatientId,
    pub role: Role,
}

/// Sparse binary summary table plus the AGE column and labels.
///
/// Tables built from a cohort lay pairs out consecutively: row `2i` is the
/// case of pair `i`, row `2i + 1` its control.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub generic: Code,
    pub window_days: u32,
    rows: Vec<RowId>,
    index_dates: Vec<Day>,
    catalog: Vec<FeatureKey>,
    ages: Vec<u32>,
    /// Per row, ascending ids of the binary columns set to 1.
    bits: Vec<Vec<FeatureId>>,
    labels: Vec<u8>,
}

impl FeatureMatrix {
    /// Assembles a table directly. `bits` rows must hold ascending binary
    /// column ids in `1..catalog.len()`, and `catalog[0]` must be AGE.
    pub fn from_parts(
        catalog: Vec<FeatureKey>,
        ages: Vec<u32>,
        bits: Vec<Vec<FeatureId>>,
        labels: Vec<u8>,
    ) -> Result<FeatureMatrix> {
        let n = labels.len();
        if ages.len() != n || bits.len() != n {
            return Err(Error::Config("row count mismatch".into()));
        }
        if catalog.first() != Some(&FeatureKey::Age) {
            return Err(Error::Config("catalog must start with AGE".into()));
        }
        let width = catalog.len() as FeatureId;
        for row in &bits {
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c == AGE || c >= width) {
                return Err(Error::Config("invalid binary row".into()));
            }
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        let rows = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| RowId {
                patient_id: i as PatientId + 1,
                role: if l == 1 { Role::Case } else { Role::Control },
            })
            .collect();
        Ok(FeatureMatrix {
            generic: 0,
            window_days: 0,
            rows,
            index_dates: vec![0; n],
            catalog,
            ages,
            bits,
            labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.catalog.len()
    }

    pub fn catalog(&self) -> &[FeatureKey] {
        &self.catalog
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn rows(&self) -> &[RowId] {
        &self.rows
    }

    pub fn index_date(&self, row: usize) -> Day {
        self.index_dates[row]
    }

    pub fn age(&self, row: usize) -> u32 {
        self.ages[row]
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn active(&self, row: usize) -> &[FeatureId] {
        &self.bits[row]
    }

    /// Cell value; AGE as a number, binary columns as 0/1.
    pub fn value(&self, row: usize, feature: FeatureId) -> f64 {
        if feature == AGE {
            f64::from(self.ages[row])
        } else if self.bits[row].binary_search(&feature).is_ok() {
            1.0
        } else {
            0.0
        }
    }

    /// Number of rows with each binary column set (index 0 unused).
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.catalog.len()];
        for row in &self.bits {
            for &c in row {
                counts[c as usize] += 1;
            }
        }
        counts
    }

    /// Copy restricted to `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            generic: self.generic,
            window_days: self.window_days,
            rows: rows.iter().map(|&r| self.rows[r]).collect(),
            index_dates: rows.iter().map(|&r| self.index_dates[r]).collect(),
            catalog: self.catalog.clone(),
            ages: rows.iter().map(|&r| self.ages[r]).collect(),
            bits: rows.iter().map(|&r| self.bits[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Keeps the listed columns (AGE is always kept) and renumbers them in
    /// their original order.
    pub fn select_columns(&self, keep: &[FeatureId]) -> FeatureMatrix {
        let mut remap = vec![None; self.catalog.len()];
        let mut catalog = vec![FeatureKey::Age];
        for &c in keep.iter().filter(|&&c| c != AGE) {
            remap[c as usize] = Some(catalog.len() as FeatureId);
            catalog.push(self.catalog[c as usize]);
        }
        let bits = self
            .bits
            .iter()
            .map(|row| row.iter().filter_map(|&c| remap[c as usize]).collect())
            .collect();
        FeatureMatrix {
            catalog,
            bits,
            ..self.clone()
        }
    }

    /// Writes the dense table: catalog header, one row per patient, label last.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = self.catalog.iter().map(ToString::to_string).collect();
        writeln!(out, "{},label", header.join(","))?;
        let mut line = String::new();
        for r in 0..self.n_rows() {
            line.clear();
            line.push_str(&self.ages[r].to_string());
            let mut active = self.bits[r].iter().peekable();
            for c in 1..self.catalog.len() as FeatureId {
                if active.next_if_eq(&&c).is_some() {
                    line.push_str(",1");
                } else {
                    line.push_str(",0");
                }
            }
            writeln!(out, "{line},{}", self.labels[r])?;
        }
        Ok(())
    }
}

/// Events strictly before `index_date - window_days`. Events on the boundary
/// day are censored.
pub fn truncate_pair(events: &[Event], index_date: Day, window_days: u32) -> &[Event] {
    let cutoff = index_date - window_days as Day;
    &events[..events.partition_point(|e| e.date < cutoff)]
}

fn age_years(index_date: Day, dob: Day) -> u32 {
    (f64::from(index_date - dob) / DAYS_PER_YEAR).floor().max(0.0) as u32
}

/// Builds the summary table for one cohort at one truncation window.
pub fn build_table(
    cohort: &Cohort,
    store: &EventStore,
    patients: &PatientTable,
    window_days: u32,
) -> Result<FeatureMatrix> {
    if cohort.pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let n = cohort.pairs.len() * 2;
    let mut rows = Vec::with_capacity(n);
    let mut index_dates = Vec::with_capacity(n);
    let mut ages = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut keys: Vec<BTreeSet<FeatureKey>> = Vec::with_capacity(n);

    for pair in &cohort.pairs {
        for (patient_id, role) in [(pair.case_id, Role::Case), (pair.control_id, Role::Control)] {
            let dob = patients
                .get(patient_id)
                .ok_or(Error::CohortInvariant(format!("unknown patient {patient_id}")))?
                .dob;
            let row_keys: BTreeSet<FeatureKey> =
                truncate_pair(store.events(patient_id), pair.index_date, window_days)
                    .iter()
                    .map(FeatureKey::of)
                    .filter(|k| !k.is_target(cohort.generic))
                    .collect();
            rows.push(RowId { patient_id, role });
            index_dates.push(pair.index_date);
            ages.push(age_years(pair.index_date, dob));
            labels.push(u8::from(role == Role::Case));
            keys.push(row_keys);
        }
    }

    let universe: BTreeSet<FeatureKey> = keys.iter().flatten().copied().collect();
    let mut catalog = Vec::with_capacity(universe.len() + 1);
    catalog.push(FeatureKey::Age);
    catalog.extend(universe);
    let column: BTreeMap<FeatureKey, FeatureId> = catalog
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &k)| (k, i as FeatureId))
        .collect();
    let bits = keys
        .iter()
        .map(|ks| ks.iter().map(|k| column[k]).collect())
        .collect();

    Ok(FeatureMatrix {
        generic: cohort.generic,
        window_days,
        rows,
        index_dates,
        catalog,
        ages,
        bits,
        labels,
    })
}

/// How the prevalence threshold is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrevalenceMode {
    /// Prevalence over all rows, labels unread.
    #[default]
    Pooled,
    /// Prevalence must exceed the threshold among cases and among controls.
    PerGroup,
}

pub const DEFAULT_PREVALENCE: f64 = 0.01;

/// Keeps AGE and every binary column whose prevalence is strictly greater
/// than `threshold`.
pub fn prevalence_filter(matrix: &FeatureMatrix, threshold: f64) -> FeatureMatrix {
    prevalence_filter_with(matrix, threshold, PrevalenceMode::Pooled)
}

pub fn prevalence_filter_with(
    matrix: &FeatureMatrix,
    threshold: f64,
    mode: PrevalenceMode,
) -> FeatureMatrix {
    let keep: Vec<FeatureId> = match mode {
        PrevalenceMode::Pooled => {
            let n = matrix.n_rows() as f64;
            matrix
                .column_counts()
                .iter()
                .enumerate()
                .skip(1)
                .filter(|&(_, &c)| c as f64 / n > threshold)
                .map(|(j, _)| j as FeatureId)
                .collect()
        }
        PrevalenceMode::PerGroup => {
            let mut counts = [vec![0usize; matrix.n_features()], vec![0usize; matrix.n_features()]];
            let mut totals = [0usize; 2];
            for r in 0..matrix.n_rows() {
                let g = matrix.labels[r] as usize;
                totals[g] += 1;
                for &c in &matrix.bits[r] {
                    counts[g][c as usize] += 1;
                }
            }
            (1..matrix.n_features())
                .filter(|&j| {
                    (0..2).all(|g| {
                        totals[g] > 0 && counts[g][j] as f64 / totals[g] as f64 > threshold
                    })
                })
                .map(|j| j as FeatureId)
                .collect()
        }
    };
    matrix.select_columns(&keep)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeakageViolation {
    pub row: usize,
    pub patient_id: PatientId,
    pub feature: FeatureKey,
}

/// Re-scans raw events for the given rows and reports every set bit that is
/// not explained by an event strictly before `index - window`, or that names
/// the target generic.
pub fn leakage_scan(
    matrix: &FeatureMatrix,
    store: &EventStore,
    rows: impl IntoIterator<Item = usize>,
) -> Vec<LeakageViolation> {
    let cutoff_window = matrix.window_days as Day;
    let mut out = Vec::new();
    for r in rows {
        let pid = matrix.rows[r].patient_id;
        let cutoff = matrix.index_dates[r] - cutoff_window;
        let events = store.events(pid);
        for &c in &matrix.bits[r] {
            let key = matrix.catalog[c as usize];
            let supported = !key.is_target(matrix.generic)
                && events
                    .iter()
                    .any(|e| e.date < cutoff && FeatureKey::of(e) == key);
            if !supported {
                out.push(LeakageViolation {
                    row: r,
                    patient_id: pid,
                    feature: key,
                });
            }
        }
    }
    out
}

/// Deterministic 1% row sample (at least one row) for the per-job guard.
pub fn guard_sample(n_rows: usize) -> impl Iterator<Item = usize> {
    let stride = 100.min(n_rows.max(1));
    (0..n_rows).step_by(stride)
}
