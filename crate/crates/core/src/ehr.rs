//! EHR data model: patients, coded events, and the per-patient event store.
//!
//! Dates are integer day offsets from an arbitrary epoch. De-identified data
//! is date-shifted per patient, so only differences between dates carry
//! meaning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PatientId = u32;
pub type Code = u32;
pub type Day = i32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

impl Sex {
    fn parse(token: &str) -> Option<Sex> {
        match token {
            "M" => Some(Sex::M),
            "F" => Some(Sex::F),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Diagnosis,
    Prescription,
    Lab,
    Vital,
    Visit,
}

impl EventKind {
    pub fn token(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "D",
            EventKind::Prescription => "P",
            EventKind::Lab => "L",
            EventKind::Vital => "V",
            EventKind::Visit => "S",
        }
    }

    pub fn from_token(token: &str) -> Option<EventKind> {
        match token {
            "D" => Some(EventKind::Diagnosis),
            "P" => Some(EventKind::Prescription),
            "L" => Some(EventKind::Lab),
            "V" => Some(EventKind::Vital),
            "S" => Some(EventKind::Visit),
            _ => None,
        }
    }

    /// Lab and vital measurements carry a reference-range band.
    pub fn is_banded(self) -> bool {
        matches!(self, EventKind::Lab | EventKind::Vital)
    }
}

/// Position of a continuous measurement relative to its reference range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    Below,
    Within,
    Above,
}

impl Band {
    pub fn token(self) -> &'static str {
        match self {
            Band::Below => "-1",
            Band::Within => "0",
            Band::Above => "+1",
        }
    }

    pub fn from_token(token: &str) -> Option<Band> {
        match token {
            "-1" => Some(Band::Below),
            "0" | "+0" | "-0" => Some(Band::Within),
            "+1" | "1" => Some(Band::Above),
            _ => None,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: PatientId,
    pub sex: Sex,
    pub dob: Day,
    /// Date of the patient's final recorded event. Equals `dob` until events
    /// are attached.
    pub last_contact: Day,
}

/// One coded medical occurrence. For prescriptions `code` is the generic code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub patient_id: PatientId,
    pub date: Day,
    pub kind: EventKind,
    pub code: Code,
    pub brand_code: Option<Code>,
    pub class_code: Option<Code>,
    pub band: Option<Band>,
}

impl Event {
    pub fn diagnosis(patient_id: PatientId, date: Day, code: Code) -> Event {
        Event::plain(patient_id, date, EventKind::Diagnosis, code)
    }

    pub fn visit(patient_id: PatientId, date: Day, code: Code) -> Event {
        Event::plain(patient_id, date, EventKind::Visit, code)
    }

    pub fn prescription(
        patient_id: PatientId,
        date: Day,
        generic: Code,
        brand: Code,
        class: Code,
    ) -> Event {
        Event {
            patient_id,
            date,
            kind: EventKind::Prescription,
            code: generic,
            brand_code: Some(brand),
            class_code: Some(class),
            band: None,
        }
    }

    pub fn measurement(
        patient_id: PatientId,
        date: Day,
        kind: EventKind,
        code: Code,
        band: Band,
    ) -> Event {
        debug_assert!(kind.is_banded());
        Event {
            patient_id,
            date,
            kind,
            code,
            brand_code: None,
            class_code: None,
            band: Some(band),
        }
    }

    fn plain(patient_id: PatientId, date: Day, kind: EventKind, code: Code) -> Event {
        Event {
            patient_id,
            date,
            kind,
            code,
            brand_code: None,
            class_code: None,
            band: None,
        }
    }
}

/// Patients keyed by id, iterated in ascending id order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatientTable {
    patients: BTreeMap<PatientId, Patient>,
}

impl PatientTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, patient: Patient) -> Result<()> {
        if self.patients.contains_key(&patient.patient_id) {
            return Err(Error::DuplicatePatient(patient.patient_id));
        }
        self.patients.insert(patient.patient_id, patient);
        Ok(())
    }

    pub fn get(&self, id: PatientId) -> Option<&Patient> {
        self.patients.get(&id)
    }

    pub fn contains(&self, id: PatientId) -> bool {
        self.patients.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Patient> {
        self.patients.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = PatientId> + '_ {
        self.patients.keys().copied()
    }

    /// Recomputes every `last_contact` as the maximum event date (or `dob` for
    /// patients without events).
    pub fn refresh_last_contact(&mut self, store: &EventStore) {
        for p in self.patients.values_mut() {
            p.last_contact = store
                .events(p.patient_id)
                .iter()
                .map(|e| e.date)
                .max()
                .unwrap_or(p.dob);
        }
    }

    pub(crate) fn retain(&mut self, mut keep: impl FnMut(&Patient) -> bool) {
        self.patients.retain(|_, p| keep(p));
    }

    pub(crate) fn patients_mut(&mut self) -> impl Iterator<Item = &mut Patient> {
        self.patients.values_mut()
    }
}

/// Immutable per-patient event sequences plus a generic-code index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventStore {
    by_patient: BTreeMap<PatientId, Vec<Event>>,
    prescribers: BTreeMap<Code, BTreeSet<PatientId>>,
}

impl EventStore {
    /// Builds a store from events in any order. Per-patient sequences are
    /// stably sorted by date, so same-day events keep their input order.
    pub fn from_events(events: impl IntoIterator<Item = Event>) -> EventStore {
        let mut by_patient: BTreeMap<PatientId, Vec<Event>> = BTreeMap::new();
        for e in events {
            by_patient.entry(e.patient_id).or_default().push(e);
        }
        for seq in by_patient.values_mut() {
            seq.sort_by_key(|e| e.date);
        }
        let mut store = EventStore {
            by_patient,
            prescribers: BTreeMap::new(),
        };
        store.rebuild_index();
        store
    }

    fn rebuild_index(&mut self) {
        self.prescribers.clear();
        for (&pid, seq) in &self.by_patient {
            for e in seq.iter().filter(|e| e.kind == EventKind::Prescription) {
                self.prescribers.entry(e.code).or_default().insert(pid);
            }
        }
    }

    /// Events of one patient, ascending by date. Empty for unknown patients.
    pub fn events(&self, id: PatientId) -> &[Event] {
        self.by_patient.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = PatientId> + '_ {
        self.by_patient.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.by_patient.values().flatten()
    }

    pub fn n_events(&self) -> usize {
        self.by_patient.values().map(Vec::len).sum()
    }

    /// Patients with at least one prescription of `generic`.
    pub fn prescribers(&self, generic: Code) -> impl Iterator<Item = PatientId> + '_ {
        self.prescribers.get(&generic).into_iter().flatten().copied()
    }

    pub fn has_prescription(&self, patient: PatientId, generic: Code) -> bool {
        self.prescribers
            .get(&generic)
            .is_some_and(|s| s.contains(&patient))
    }

    /// Generic codes with their distinct prescribed-patient counts, ascending by code.
    pub fn generic_counts(&self) -> impl Iterator<Item = (Code, usize)> + '_ {
        self.prescribers.iter().map(|(&g, s)| (g, s.len()))
    }

    pub(crate) fn retain_patients(&mut self, mut keep: impl FnMut(PatientId) -> bool) {
        self.by_patient.retain(|&pid, _| keep(pid));
        self.rebuild_index();
    }

    pub(crate) fn map_events(&mut self, mut f: impl FnMut(&mut Event)) {
        for seq in self.by_patient.values_mut() {
            seq.iter_mut().for_each(&mut f);
            seq.sort_by_key(|e| e.date);
        }
        self.rebuild_index();
    }
}

/// First prescription date of `generic` per patient, sorted by
/// `(index_date, patient_id)`.
pub fn first_prescriptions(store: &EventStore, generic: Code) -> Vec<(PatientId, Day)> {
    let mut out: Vec<(PatientId, Day)> = store
        .prescribers(generic)
        .filter_map(|pid| {
            store
                .events(pid)
                .iter()
                .find(|e| e.kind == EventKind::Prescription && e.code == generic)
                .map(|e| (pid, e.date))
        })
        .collect();
    out.sort_by_key(|&(pid, date)| (date, pid));
    out
}

fn reader(input: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(input)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn int_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T> {
    record[idx]
        .parse()
        .map_err(|_| Error::Parse(format!("non-integer {name}"), line_of(record)))
}

fn opt_code(record: &csv::StringRecord, idx: usize, name: &str) -> Result<Option<Code>> {
    if record[idx].is_empty() {
        Ok(None)
    } else {
        int_field(record, idx, name).map(Some)
    }
}

/// Parses `patient_id,sex,dob` rows.
pub fn parse_patients(input: impl Read) -> Result<PatientTable> {
    let mut table = PatientTable::new();
    for record in reader(input).records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 3 {
            return Err(Error::Parse(
                format!("expected 3 columns, found {}", record.len()),
                line,
            ));
        }
        let patient_id: PatientId = int_field(&record, 0, "patient_id")?;
        if patient_id == 0 {
            return Err(Error::Parse("patient_id must be positive".into(), line));
        }
        let sex = Sex::parse(&record[1]).ok_or_else(|| Error::Parse("unknown sex".into(), line))?;
        let dob: Day = int_field(&record, 2, "dob")?;
        table.insert(Patient {
            patient_id,
            sex,
            dob,
            last_contact: dob,
        })?;
    }
    Ok(table)
}

/// Parses `patient_id,date,kind,code,brand_code,class_code,band` rows and
/// finalizes each patient's `last_contact`.
pub fn parse_events(input: impl Read, patients: &mut PatientTable) -> Result<EventStore> {
    let mut events = Vec::new();
    for record in reader(input).records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != 7 {
            return Err(Error::Parse(
                format!("expected 7 columns, found {}", record.len()),
                line,
            ));
        }
        let patient_id: PatientId = int_field(&record, 0, "patient_id")?;
        let date: Day = int_field(&record, 1, "date")?;
        let kind = EventKind::from_token(&record[2])
            .ok_or_else(|| Error::Parse("unknown event kind".into(), line))?;
        let code: Code = int_field(&record, 3, "code")?;
        let brand_code = opt_code(&record, 4, "brand_code")?;
        let class_code = opt_code(&record, 5, "class_code")?;
        let band = if record[6].is_empty() {
            None
        } else {
            Some(
                Band::from_token(&record[6])
                    .ok_or_else(|| Error::Parse("unknown band".into(), line))?,
            )
        };

        let patient = patients
            .get(patient_id)
            .ok_or(Error::UnknownPatient { patient_id, line })?;
        if date < patient.dob {
            return Err(Error::EventBeforeBirth {
                patient_id,
                date,
                dob: patient.dob,
                line,
            });
        }
        if code == 0 {
            return Err(Error::Parse("code must be positive".into(), line));
        }
        match kind {
            EventKind::Prescription => {
                if brand_code.is_none() || class_code.is_none() {
                    return Err(Error::Parse(
                        "prescription missing brand/class code".into(),
                        line,
                    ));
                }
            }
            _ if brand_code.is_some() || class_code.is_some() => {
                return Err(Error::Parse(
                    "brand/class code on a non-prescription event".into(),
                    line,
                ));
            }
            _ => {}
        }
        match (kind.is_banded(), band) {
            (true, None) => {
                return Err(Error::Parse(
                    format!("{kind:?} event missing band"),
                    line,
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Parse(
                    format!("band on a {kind:?} event"),
                    line,
                ))
            }
            _ => {}
        }
        events.push(Event {
            patient_id,
            date,
            kind,
            code,
            brand_code,
            class_code,
            band,
        });
    }
    let store = EventStore::from_events(events);
    patients.refresh_last_contact(&store);
    Ok(store)
}

pub fn write_patients(patients: &PatientTable, mut out: impl Write) -> Result<()> {
    writeln!(out, "patient_id,sex,dob")?;
    for p in patients.iter() {
        writeln!(out, "{},{},{}", p.patient_id, p.sex.as_str(), p.dob)?;
    }
    Ok(())
}

pub fn write_events(store: &EventStore, mut out: impl Write) -> Result<()> {
    fn opt<T: fmt::Display>(v: Option<T>) -> String {
        v.map(|v| v.to_string()).unwrap_or_default()
    }
    writeln!(out, "patient_id,date,kind,code,brand_code,class_code,band")?;
    for e in store.iter() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.patient_id,
            e.date,
            e.kind.token(),
            e.code,
            opt(e.brand_code),
            opt(e.class_code),
            opt(e.band),
        )?;
    }
    Ok(())
}
