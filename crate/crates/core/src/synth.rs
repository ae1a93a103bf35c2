//! Seeded synthetic EHR populations with planted, time-localized signal.
//!
//! Each generic drug gets a handful of "signal" codes. Case patients receive
//! those codes in the `prodrome_days` immediately before their first
//! prescription, so a model sees the signal at small truncation windows and
//! loses it once the window exceeds the prodrome. Everything else is uniform
//! background noise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::ehr::{Band, Code, Day, Event, EventKind, EventStore, Patient, PatientId, PatientTable, Sex};
use crate::error::{Error, Result};
use crate::rng::{mix, rng_from};

const DAYS_PER_YEAR: f64 = 365.25;
const N_VITAL_CODES: u32 = 8;
const N_VISIT_CODES: u32 = 4;
const MAX_DATE_SHIFT: Day = 365;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_generics: usize,
    pub n_diagnosis_codes: usize,
    pub n_lab_codes: usize,
    /// Spread of birth dates, in years.
    pub years_span: u32,
    /// Signal events fall in `[index - prodrome_days, index - 1]`.
    pub prodrome_days: u32,
    /// Probability that a case exhibits each of its generic's signal codes.
    pub signal_strength: f64,
    /// Mean background events per patient-year.
    pub background_rate: f64,
    /// Fraction of the population that is a case for each generic.
    pub case_fraction: f64,
    /// Diagnosis signal codes per generic (one lab signal code is added on top).
    pub signal_codes: usize,
    /// Years of record after the youngest birth date.
    pub follow_up_years: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 2000,
            n_generics: 10,
            n_diagnosis_codes: 400,
            n_lab_codes: 40,
            years_span: 60,
            prodrome_days: 30,
            signal_strength: 0.9,
            background_rate: 2.0,
            case_fraction: 0.06,
            signal_codes: 3,
            follow_up_years: 10,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_patients", self.n_patients),
            ("n_generics", self.n_generics),
            ("n_diagnosis_codes", self.n_diagnosis_codes),
            ("n_lab_codes", self.n_lab_codes),
            ("years_span", self.years_span as usize),
            ("prodrome_days", self.prodrome_days as usize),
            ("signal_codes", self.signal_codes),
            ("follow_up_years", self.follow_up_years as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.signal_codes > self.n_diagnosis_codes {
            return Err(Error::Config(
                "signal_codes exceeds n_diagnosis_codes".into(),
            ));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("case_fraction", self.case_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return Err(Error::Config("background_rate must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignalCode {
    pub kind: EventKind,
    pub code: Code,
    pub band: Option<Band>,
}

impl SignalCode {
    pub fn matches(&self, e: &Event) -> bool {
        e.kind == self.kind && e.code == self.code && e.band == self.band
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericTruth {
    pub generic: Code,
    pub brands: Vec<Code>,
    pub class: Code,
    pub signal: Vec<SignalCode>,
    /// Placement window relative to the index date, inclusive: `[-prodrome, -1]`.
    pub window: (Day, Day),
    /// `(patient, index_date)` of every planted case.
    pub cases: Vec<(PatientId, Day)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub generic: Code,
    pub patient_id: PatientId,
    pub index_date: Day,
    pub date: Day,
    pub signal: SignalCode,
}

/// What the generator planted. Consumed by test oracles only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub generics: Vec<GenericTruth>,
    pub planted: Vec<PlantedEvent>,
}

impl GroundTruth {
    pub fn generic(&self, code: Code) -> Option<&GenericTruth> {
        self.generics.iter().find(|g| g.generic == code)
    }

    /// Rewrites codes and dates through a de-identification.
    pub fn remap(&self, deid: &Deidentified) -> GroundTruth {
        let code = |c: Code| deid.code_map.apply(c).unwrap_or(c);
        let shift = |p: PatientId| deid.date_shifts.get(&p).copied().unwrap_or(0);
        let sig = |s: &SignalCode| SignalCode {
            code: code(s.code),
            ..*s
        };
        GroundTruth {
            generics: self
                .generics
                .iter()
                .map(|g| GenericTruth {
                    generic: code(g.generic),
                    brands: g.brands.iter().map(|&b| code(b)).collect(),
                    class: code(g.class),
                    signal: g.signal.iter().map(sig).collect(),
                    window: g.window,
                    cases: g.cases.iter().map(|&(p, d)| (p, d + shift(p))).collect(),
                })
                .collect(),
            planted: self
                .planted
                .iter()
                .map(|e| PlantedEvent {
                    generic: code(e.generic),
                    patient_id: e.patient_id,
                    index_date: e.index_date + shift(e.patient_id),
                    date: e.date + shift(e.patient_id),
                    signal: sig(&e.signal),
                })
                .collect(),
        }
    }
}

/// Maps a continuous measurement onto its reference range. Boundaries count
/// as within range.
pub fn band_continuous(value: f64, ref_low: f64, ref_high: f64) -> Result<Band> {
    if ref_low.partial_cmp(&ref_high) != Some(std::cmp::Ordering::Less) {
        return Err(Error::ReferenceRange {
            low: ref_low,
            high: ref_high,
        });
    }
    Ok(if value < ref_low {
        Band::Below
    } else if value > ref_high {
        Band::Above
    } else {
        Band::Within
    })
}

struct CodeSpace {
    generics: Vec<Code>,
    classes: Vec<Code>,
    brands: Vec<Vec<Code>>,
    diagnoses: Vec<Code>,
    labs: Vec<Code>,
    vitals: Vec<Code>,
    visits: Vec<Code>,
}

impl CodeSpace {
    fn new(cfg: &SynthConfig) -> CodeSpace {
        let mut next: Code = 1;
        let mut take = |n: usize| {
            let v: Vec<Code> = (next..next + n as Code).collect();
            next += n as Code;
            v
        };
        let generics = take(cfg.n_generics);
        let classes = take(cfg.n_generics.div_ceil(4));
        let brands = (0..cfg.n_generics).map(|_| take(2)).collect();
        let diagnoses = take(cfg.n_diagnosis_codes);
        let labs = take(cfg.n_lab_codes);
        let vitals = take(N_VITAL_CODES as usize);
        let visits = take(N_VISIT_CODES as usize);
        CodeSpace {
            generics,
            classes,
            brands,
            diagnoses,
            labs,
            vitals,
            visits,
        }
    }
}

fn uniform_day(rng: &mut impl rand::Rng, lo: Day, hi: Day) -> Day {
    rng.random_range(lo..=hi)
}

/// Generates a population. Deterministic for a fixed `(config, seed)`.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<(PatientTable, EventStore, GroundTruth)> {
    config.validate()?;
    let mut rng = rng_from(mix(seed, 0x5359_4e54));
    let codes = CodeSpace::new(config);
    let span_days = (f64::from(config.years_span) * DAYS_PER_YEAR) as Day;
    let follow_up = (f64::from(config.follow_up_years) * DAYS_PER_YEAR) as Day;
    let horizon = span_days + follow_up;
    let measurement = Normal::new(0.0, 1.0).expect("unit normal");

    let mut patients = PatientTable::new();
    let mut record_end: BTreeMap<PatientId, Day> = BTreeMap::new();
    let mut events: Vec<Event> = Vec::new();

    for i in 0..config.n_patients {
        let pid = (i + 1) as PatientId;
        let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
        let dob = rng.random_range(0..span_days);
        let end = horizon - rng.random_range(0..=follow_up / 2);
        patients.insert(Patient {
            patient_id: pid,
            sex,
            dob,
            last_contact: dob,
        })?;
        record_end.insert(pid, end);

        let years = f64::from(end - dob) / DAYS_PER_YEAR;
        let lambda = config.background_rate * years;
        let n = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..n {
            let date = uniform_day(&mut rng, dob, end);
            let roll: f64 = rng.random();
            let event = if roll < 0.5 {
                Event::diagnosis(pid, date, *codes.diagnoses.choose(&mut rng).unwrap())
            } else if roll < 0.85 {
                let (kind, pool) = if roll < 0.7 {
                    (EventKind::Lab, &codes.labs)
                } else {
                    (EventKind::Vital, &codes.vitals)
                };
                let band = band_continuous(measurement.sample(&mut rng), -1.0, 1.0)?;
                Event::measurement(pid, date, kind, *pool.choose(&mut rng).unwrap(), band)
            } else {
                Event::visit(pid, date, *codes.visits.choose(&mut rng).unwrap())
            };
            events.push(event);
        }
    }

    let n_cases = ((config.case_fraction * config.n_patients as f64).round() as usize)
        .min(config.n_patients);
    let prodrome = config.prodrome_days as Day;
    let mut truths = Vec::with_capacity(config.n_generics);
    let mut planted = Vec::new();

    for (gi, &generic) in codes.generics.iter().enumerate() {
        let class = codes.classes[gi / 4];
        let brands = codes.brands[gi].clone();
        let mut signal: Vec<SignalCode> = sample(&mut rng, codes.diagnoses.len(), config.signal_codes)
            .into_iter()
            .map(|j| SignalCode {
                kind: EventKind::Diagnosis,
                code: codes.diagnoses[j],
                band: None,
            })
            .collect();
        signal.push(SignalCode {
            kind: EventKind::Lab,
            code: *codes.labs.choose(&mut rng).unwrap(),
            band: Some(Band::Above),
        });

        let mut chosen: Vec<usize> = sample(&mut rng, config.n_patients, n_cases).into_vec();
        chosen.sort_unstable();
        let mut cases = Vec::with_capacity(chosen.len());
        for j in chosen {
            let pid = (j + 1) as PatientId;
            let dob = patients.get(pid).unwrap().dob;
            let end = record_end[&pid];
            let earliest = dob + prodrome.max(365);
            if earliest > end {
                continue;
            }
            let index = uniform_day(&mut rng, earliest, end);
            events.push(Event::prescription(
                pid,
                index,
                generic,
                *brands.choose(&mut rng).unwrap(),
                class,
            ));
            for _ in 0..rng.random_range(0..=3) {
                let date = index + rng.random_range(1..=365);
                if date <= end {
                    events.push(Event::prescription(
                        pid,
                        date,
                        generic,
                        *brands.choose(&mut rng).unwrap(),
                        class,
                    ));
                }
            }
            for s in &signal {
                if rng.random_bool(config.signal_strength) {
                    let date = uniform_day(&mut rng, index - prodrome, index - 1);
                    events.push(Event {
                        patient_id: pid,
                        date,
                        kind: s.kind,
                        code: s.code,
                        brand_code: None,
                        class_code: None,
                        band: s.band,
                    });
                    planted.push(PlantedEvent {
                        generic,
                        patient_id: pid,
                        index_date: index,
                        date,
                        signal: *s,
                    });
                }
            }
            cases.push((pid, index));
        }
        truths.push(GenericTruth {
            generic,
            brands,
            class,
            signal,
            window: (-prodrome, -1),
            cases,
        });
    }

    let store = EventStore::from_events(events);
    patients.refresh_last_contact(&store);
    Ok((
        patients,
        store,
        GroundTruth {
            generics: truths,
            planted,
        },
    ))
}

/// Seeded bijection between original and de-identified codes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMap {
    forward: BTreeMap<Code, Code>,
}

impl CodeMap {
    pub fn apply(&self, original: Code) -> Option<Code> {
        self.forward.get(&original).copied()
    }

    pub fn invert(&self) -> BTreeMap<Code, Code> {
        self.forward.iter().map(|(&a, &b)| (b, a)).collect()
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Code, Code)> + '_ {
        self.forward.iter().map(|(&a, &b)| (a, b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deidentified {
    pub patients: PatientTable,
    pub store: EventStore,
    pub code_map: CodeMap,
    /// Per-patient day offset added to dob and every event date.
    pub date_shifts: BTreeMap<PatientId, Day>,
}

/// Replaces every code through a random bijection onto a fresh range above
/// the largest original code, and shifts each patient's timeline by a uniform
/// offset in `[-365, 365]` days.
pub fn deidentify(patients: &PatientTable, store: &EventStore, seed: u64) -> Deidentified {
    let mut rng = rng_from(mix(seed, 0xdede));

    let mut distinct = BTreeSet::new();
    for e in store.iter() {
        distinct.insert(e.code);
        distinct.extend(e.brand_code);
        distinct.extend(e.class_code);
    }
    let base = distinct.last().copied().unwrap_or(0);
    let mut targets: Vec<Code> = (1..=distinct.len() as Code).map(|i| base + i).collect();
    targets.shuffle(&mut rng);
    let code_map = CodeMap {
        forward: distinct.into_iter().zip(targets).collect(),
    };

    let date_shifts: BTreeMap<PatientId, Day> = patients
        .ids()
        .map(|p| (p, rng.random_range(-MAX_DATE_SHIFT..=MAX_DATE_SHIFT)))
        .collect();

    let mut new_patients = patients.clone();
    for p in new_patients.patients_mut() {
        p.dob += date_shifts[&p.patient_id];
    }
    let mut new_store = store.clone();
    new_store.map_events(|e| {
        e.date += date_shifts.get(&e.patient_id).copied().unwrap_or(0);
        e.code = code_map.forward[&e.code];
        e.brand_code = e.brand_code.map(|c| code_map.forward[&c]);
        e.class_code = e.class_code.map(|c| code_map.forward[&c]);
    });
    new_patients.refresh_last_contact(&new_store);

    Deidentified {
        patients: new_patients,
        store: new_store,
        code_map,
        date_shifts,
    }
}
