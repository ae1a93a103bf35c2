//! Data cleaning, drug eligibility and greedy case-control matching.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ehr::{first_prescriptions, Code, Day, EventKind, EventStore, PatientId, PatientTable, Sex};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_DX: usize = 4;
pub const DEFAULT_MIN_VISIT_DATES: usize = 2;
pub const DEFAULT_MIN_CASES: usize = 500;
pub const DEFAULT_DOB_TOLERANCE: Day = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CasePair {
    pub generic: Code,
    pub case_id: PatientId,
    pub control_id: PatientId,
    /// The case's first prescription date; censoring uses it for both members.
    pub index_date: Day,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub generic: Code,
    pub pairs: Vec<CasePair>,
    /// Cases for which no eligible control remained.
    pub unmatched: Vec<PatientId>,
}

/// Keeps patients with at least `min_dx` diagnosis events and at least
/// `min_visit_dates` distinct event dates. Any event date counts as a visit.
pub fn clean_patients(
    patients: &PatientTable,
    store: &EventStore,
    min_dx: usize,
    min_visit_dates: usize,
) -> (PatientTable, EventStore) {
    let keep: HashSet<PatientId> = patients
        .ids()
        .filter(|&pid| {
            let events = store.events(pid);
            let n_dx = events
                .iter()
                .filter(|e| e.kind == EventKind::Diagnosis)
                .count();
            // sorted by date, so distinct dates are run boundaries
            let n_dates = events
                .iter()
                .enumerate()
                .filter(|(i, e)| *i == 0 || events[i - 1].date != e.date)
                .count();
            n_dx >= min_dx && n_dates >= min_visit_dates
        })
        .collect();
    let mut table = patients.clone();
    table.retain(|p| keep.contains(&p.patient_id));
    let mut cleaned = store.clone();
    cleaned.retain_patients(|pid| keep.contains(&pid));
    (table, cleaned)
}

/// Generics prescribed to at least `min_cases` distinct patients, ascending.
pub fn eligible_generics(store: &EventStore, min_cases: usize) -> Vec<Code> {
    store
        .generic_counts()
        .filter(|&(_, n)| n >= min_cases)
        .map(|(g, _)| g)
        .collect()
}

/// Greedy nearest-dob matching.
///
/// Cases are visited in ascending `(index_date, patient_id)` order. A control
/// must never have been prescribed `generic`, share the case's sex, have a
/// dob within `dob_tolerance_days`, have a last contact on or after the index
/// date, and not already be used in this cohort. Among candidates the smallest
/// dob difference wins, then the lower patient id.
pub fn match_controls(
    store: &EventStore,
    patients: &PatientTable,
    generic: Code,
    dob_tolerance_days: Day,
) -> Cohort {
    let mut pool: [BTreeSet<(Day, PatientId)>; 2] = [BTreeSet::new(), BTreeSet::new()];
    for p in patients.iter() {
        if !store.has_prescription(p.patient_id, generic) {
            pool[sex_slot(p.sex)].insert((p.dob, p.patient_id));
        }
    }

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (case_id, index_date) in first_prescriptions(store, generic) {
        let Some(case) = patients.get(case_id) else {
            continue;
        };
        let slot = &mut pool[sex_slot(case.sex)];
        let lo = (case.dob.saturating_sub(dob_tolerance_days), PatientId::MIN);
        let hi = (case.dob.saturating_add(dob_tolerance_days), PatientId::MAX);
        let best = slot
            .range(lo..=hi)
            .filter(|&&(_, pid)| {
                pid != case_id
                    && patients
                        .get(pid)
                        .is_some_and(|c| c.last_contact >= index_date)
            })
            .min_by_key(|&&(dob, pid)| ((dob - case.dob).abs(), pid))
            .copied();
        match best {
            Some(entry) => {
                slot.remove(&entry);
                pairs.push(CasePair {
                    generic,
                    case_id,
                    control_id: entry.1,
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

fn sex_slot(sex: Sex) -> usize {
    match sex {
        Sex::M => 0,
        Sex::F => 1,
    }
}

/// Re-checks every pair and the one-use rule against the raw data.
pub fn verify_cohort(
    cohort: &Cohort,
    store: &EventStore,
    patients: &PatientTable,
    dob_tolerance_days: Day,
) -> Result<()> {
    let fail = |msg: String| Err(Error::CohortInvariant(msg));
    let mut used = HashSet::new();
    for pair in &cohort.pairs {
        let (Some(case), Some(control)) = (patients.get(pair.case_id), patients.get(pair.control_id))
        else {
            return fail(format!("unknown patient in {pair:?}"));
        };
        if pair.generic != cohort.generic {
            return fail(format!("pair generic mismatch in {pair:?}"));
        }
        if pair.case_id == pair.control_id {
            return fail(format!("case is its own control in {pair:?}"));
        }
        if store
            .events(pair.control_id)
            .iter()
            .any(|e| e.kind == EventKind::Prescription && e.code == pair.generic)
        {
            return fail(format!("control was prescribed the drug in {pair:?}"));
        }
        if case.sex != control.sex {
            return fail(format!("sex mismatch in {pair:?}"));
        }
        if (case.dob - control.dob).abs() > dob_tolerance_days {
            return fail(format!("dob difference too large in {pair:?}"));
        }
        if control.last_contact < pair.index_date {
            return fail(format!("control lost to follow-up in {pair:?}"));
        }
        if !used.insert(pair.case_id) || !used.insert(pair.control_id) {
            return fail(format!("patient reused in {pair:?}"));
        }
    }
    Ok(())
}

pub fn write_cohort_csv(cohort: &Cohort, mut out: impl Write) -> Result<()> {
    writeln!(out, "case_id,control_id,index_date")?;
    for p in &cohort.pairs {
        writeln!(out, "{},{},{}", p.case_id, p.control_id, p.index_date)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{Event, Patient};

    fn table(rows: &[(PatientId, Sex, Day)]) -> PatientTable {
        let mut t = PatientTable::new();
        for &(id, sex, dob) in rows {
            t.insert(Patient {
                patient_id: id,
                sex,
                dob,
                last_contact: dob,
            })
            .unwrap();
        }
        t
    }

    fn store_for(t: &mut PatientTable, events: Vec<Event>) -> EventStore {
        let s = EventStore::from_events(events);
        t.refresh_last_contact(&s);
        s
    }

    fn rx(pid: PatientId, date: Day) -> Event {
        Event::prescription(pid, date, 501, 9001, 301)
    }

    #[test]
    fn cleaning_rules() {
        let mut t = table(&[(1, Sex::M, 0), (2, Sex::M, 0), (3, Sex::F, 0), (4, Sex::F, 0)]);
        let mut ev = Vec::new();
        // 2: exactly 4 diagnoses on exactly 2 dates
        for d in [10, 10, 20, 20] {
            ev.push(Event::diagnosis(2, d, 7));
        }
        // 3: 10 diagnoses on one date
        for _ in 0..10 {
            ev.push(Event::diagnosis(3, 5, 7));
        }
        // 4: 3 diagnoses plus a visit on another date
        for d in [1, 1, 1] {
            ev.push(Event::diagnosis(4, d, 8));
        }
        ev.push(Event::visit(4, 9, 1));
        let s = store_for(&mut t, ev);
        let (ct, cs) = clean_patients(&t, &s, 4, 2);
        assert_eq!(ct.ids().collect::<Vec<_>>(), vec![2]);
        assert_eq!(cs.patient_ids().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn eligibility_threshold_is_inclusive() {
        let mut t = table(&[(1, Sex::M, 0), (2, Sex::M, 0), (3, Sex::M, 0)]);
        let s = store_for(
            &mut t,
            vec![
                Event::prescription(1, 5, 10, 1, 1),
                Event::prescription(2, 5, 10, 1, 1),
                Event::prescription(2, 6, 10, 1, 1),
                Event::prescription(3, 5, 11, 1, 1),
            ],
        );
        assert_eq!(eligible_generics(&s, 2), vec![10]);
        assert_eq!(eligible_generics(&s, 1), vec![10, 11]);
        assert_eq!(eligible_generics(&s, 3), Vec::<Code>::new());
    }

    #[test]
    fn nearest_dob_wins() {
        let mut t = table(&[(1, Sex::F, 1000), (2, Sex::F, 1017), (3, Sex::F, 997)]);
        let s = store_for(
            &mut t,
            vec![rx(1, 5000), Event::visit(2, 6000, 1), Event::visit(3, 6000, 1)],
        );
        let c = match_controls(&s, &t, 501, 30);
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.pairs[0].control_id, 3);
        verify_cohort(&c, &s, &t, 30).unwrap();
    }

    #[test]
    fn last_contact_before_index_is_rejected() {
        let mut t = table(&[(1, Sex::M, 0), (2, Sex::M, 0)]);
        let s = store_for(&mut t, vec![rx(1, 5000), Event::visit(2, 4999, 1)]);
        let c = match_controls(&s, &t, 501, 30);
        assert!(c.pairs.is_empty());
        assert_eq!(c.unmatched, vec![1]);

        let s = store_for(&mut t, vec![rx(1, 5000), Event::visit(2, 5000, 1)]);
        assert_eq!(match_controls(&s, &t, 501, 30).pairs.len(), 1);
    }

    #[test]
    fn ties_go_to_lower_id_and_controls_are_used_once() {
        let mut t = table(&[
            (10, Sex::M, 100),
            (11, Sex::M, 100),
            (20, Sex::M, 95),
            (21, Sex::M, 105),
            (30, Sex::F, 100),
            (31, Sex::M, 131),
        ]);
        let s = store_for(
            &mut t,
            vec![
                rx(10, 900),
                rx(11, 950),
                Event::visit(20, 2000, 1),
                Event::visit(21, 2000, 1),
                Event::visit(30, 2000, 1),
                Event::visit(31, 2000, 1),
            ],
        );
        let c = match_controls(&s, &t, 501, 30);
        let got: Vec<_> = c.pairs.iter().map(|p| (p.case_id, p.control_id)).collect();
        assert_eq!(got, vec![(10, 20), (11, 21)]);
        verify_cohort(&c, &s, &t, 30).unwrap();
    }

    #[test]
    fn verify_catches_bad_pairs() {
        let mut t = table(&[(1, Sex::M, 0), (2, Sex::F, 0), (3, Sex::M, 100)]);
        let s = store_for(
            &mut t,
            vec![rx(1, 500), Event::visit(2, 900, 1), Event::visit(3, 900, 1)],
        );
        let bad = |control_id| Cohort {
            generic: 501,
            pairs: vec![CasePair {
                generic: 501,
                case_id: 1,
                control_id,
                index_date: 500,
            }],
            unmatched: vec![],
        };
        assert!(verify_cohort(&bad(2), &s, &t, 30).is_err()); // sex
        assert!(verify_cohort(&bad(3), &s, &t, 30).is_err()); // dob
        assert!(verify_cohort(&bad(1), &s, &t, 30).is_err()); // self
    }
}
