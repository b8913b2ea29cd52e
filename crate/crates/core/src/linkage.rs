//! Joins trial records with drug-tracker progression records and assigns
//! phase-transition labels.
//!
//! A trial is labeled by three rules, applied in strict precedence:
//!
//! 1. a terminated trial did not transition (overrides the tracker),
//! 2. a trial whose phase lies below the drug's ultimate phase transitioned,
//! 3. a trial already at the ultimate phase did not (yet) transition.
//!
//! Trials without a tracker match, or whose phase exceeds the recorded
//! ultimate phase, stay unlabeled.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{
    validate_record, DrugProgressRecord, RecordQuality, RecruitmentStatus, TrialRecord,
};

/// Binary transition outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelValue {
    Yes,
    No,
}

impl LabelValue {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelValue::Yes => "Yes",
            LabelValue::No => "No",
        }
    }
}

/// Which labeling rule produced the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRule {
    #[serde(rename = "Rule1_Succeeded")]
    Rule1Succeeded,
    #[serde(rename = "Rule2_AtUltimatePhase")]
    Rule2AtUltimatePhase,
    #[serde(rename = "Rule3_Terminated")]
    Rule3Terminated,
}

/// A transition label with provenance. `Yes` arises only from rule 1;
/// rule 3 applies exactly to terminated trials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    #[serde(rename = "label")]
    pub value: LabelValue,
    pub rule: LabelRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// One labeled corpus entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrial {
    #[serde(flatten)]
    pub trial: TrialRecord,
    #[serde(flatten)]
    pub label: Label,
}

/// Tallies gathered while linking and labeling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub usable: usize,
    pub low_quality: usize,
    pub linked: usize,
    pub linked_by_nct: usize,
    pub linked_by_drug_indication: usize,
    pub unlinked: usize,
    pub rule1: usize,
    pub rule2: usize,
    pub rule3: usize,
    /// Trials whose phase exceeds the tracker's ultimate phase; left
    /// unlabeled rather than dropped.
    pub phase_inconsistent: usize,
}

/// The labeled corpus: labeled entries, the unlabeled remainder, and link
/// statistics. Entries and unlabeled together partition the usable input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub entries: Vec<LabeledTrial>,
    pub unlabeled: Vec<TrialRecord>,
    pub link_stats: LinkStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("nct id {nct_id:?} is claimed by tracker records {first:?} and {second:?}")]
    AmbiguousLink {
        nct_id: String,
        first: String,
        second: String,
    },
}

/// Map each trial's nct id to the index of its tracker record.
///
/// A trial links to a record when the record lists its nct id, or, failing
/// that, when the drug-indication ids match. Two tracker records claiming
/// one nct id is an error.
pub fn link(
    trials: &[TrialRecord],
    tracker: &[DrugProgressRecord],
) -> Result<BTreeMap<String, usize>, LinkError> {
    let mut by_nct: HashMap<&str, usize> = HashMap::new();
    for (index, record) in tracker.iter().enumerate() {
        for nct_id in &record.nct_ids {
            if let Some(&existing) = by_nct.get(nct_id.as_str()) {
                return Err(LinkError::AmbiguousLink {
                    nct_id: nct_id.clone(),
                    first: tracker[existing].drug_indication_id.clone(),
                    second: record.drug_indication_id.clone(),
                });
            }
            by_nct.insert(nct_id, index);
        }
    }
    let mut by_drug_indication: HashMap<&str, usize> = HashMap::new();
    for (index, record) in tracker.iter().enumerate() {
        by_drug_indication
            .entry(record.drug_indication_id.as_str())
            .or_insert(index);
    }

    let mut links = BTreeMap::new();
    for trial in trials {
        if trial.nct_id.is_empty() {
            continue;
        }
        let hit = by_nct.get(trial.nct_id.as_str()).or_else(|| {
            trial
                .drug_indication_id
                .as_deref()
                .and_then(|id| by_drug_indication.get(id))
        });
        if let Some(&index) = hit {
            links.insert(trial.nct_id.clone(), index);
        }
    }
    Ok(links)
}

/// Apply the three labeling rules to one trial. Returns `None` when the
/// trial cannot be labeled (no tracker record, or its phase lies beyond
/// the recorded ultimate phase).
pub fn assign_label(trial: &TrialRecord, progress: Option<&DrugProgressRecord>) -> Option<Label> {
    if trial.status == RecruitmentStatus::Terminated {
        return Some(Label {
            value: LabelValue::No,
            rule: LabelRule::Rule3Terminated,
            reason: trial.termination_reason.clone(),
        });
    }
    let progress = progress?;
    if trial.phase < progress.ultimate_phase {
        Some(Label {
            value: LabelValue::Yes,
            rule: LabelRule::Rule1Succeeded,
            reason: None,
        })
    } else if trial.phase == progress.ultimate_phase {
        Some(Label {
            value: LabelValue::No,
            rule: LabelRule::Rule2AtUltimatePhase,
            reason: None,
        })
    } else {
        log::warn!(
            "trial {} at {} is past tracker ultimate phase {} ({}); leaving unlabeled",
            trial.nct_id,
            trial.phase,
            progress.ultimate_phase,
            progress.drug_indication_id
        );
        None
    }
}

/// Link and label every usable trial. Entries and the unlabeled remainder
/// are sorted by nct id so corpus assembly is order-independent.
pub fn label_corpus(
    trials: &[TrialRecord],
    tracker: &[DrugProgressRecord],
) -> Result<LabeledCorpus, LinkError> {
    let links = link(trials, tracker)?;
    let mut by_nct_only: HashMap<&str, usize> = HashMap::new();
    for (index, record) in tracker.iter().enumerate() {
        for nct_id in &record.nct_ids {
            by_nct_only.insert(nct_id, index);
        }
    }

    let mut stats = LinkStats::default();
    let mut entries = Vec::new();
    let mut unlabeled = Vec::new();
    for trial in trials {
        if validate_record(trial).quality == RecordQuality::LowQuality {
            stats.low_quality += 1;
            continue;
        }
        stats.usable += 1;
        let progress_index = links.get(&trial.nct_id).copied();
        match progress_index {
            Some(index) => {
                stats.linked += 1;
                if by_nct_only.get(trial.nct_id.as_str()) == Some(&index) {
                    stats.linked_by_nct += 1;
                } else {
                    stats.linked_by_drug_indication += 1;
                }
            }
            None => stats.unlinked += 1,
        }
        let progress = progress_index.map(|i| &tracker[i]);
        match assign_label(trial, progress) {
            Some(label) => {
                match label.rule {
                    LabelRule::Rule1Succeeded => stats.rule1 += 1,
                    LabelRule::Rule2AtUltimatePhase => stats.rule2 += 1,
                    LabelRule::Rule3Terminated => stats.rule3 += 1,
                }
                entries.push(LabeledTrial {
                    trial: trial.clone(),
                    label,
                });
            }
            None => {
                if progress.is_some_and(|p| trial.phase > p.ultimate_phase) {
                    stats.phase_inconsistent += 1;
                }
                unlabeled.push(trial.clone());
            }
        }
    }
    entries.sort_by(|a, b| a.trial.nct_id.cmp(&b.trial.nct_id));
    unlabeled.sort_by(|a, b| a.nct_id.cmp(&b.nct_id));
    Ok(LabeledCorpus {
        entries,
        unlabeled,
        link_stats: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{AttributeSet, DrugClass, Phase};
    use chrono::NaiveDate;
    use std::collections::BTreeSet;

    fn trial(nct_id: &str, phase: Phase, status: RecruitmentStatus) -> TrialRecord {
        TrialRecord {
            nct_id: nct_id.to_string(),
            drug_indication_id: None,
            phase,
            status,
            last_modified: Some(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()),
            termination_reason: None,
            attributes: AttributeSet {
                name: "Study".to_string(),
                brief: "Brief.".to_string(),
                drug_used: "RX".to_string(),
                drug_class: DrugClass::Biologic,
                indication: "Condition".to_string(),
                target: "Target".to_string(),
                therapy: "Monotherapy".to_string(),
                lead_sponsor: "Sponsor".to_string(),
                criteria: "Adults.".to_string(),
                primary_outcome: "Safety".to_string(),
                secondary_outcome: "Efficacy".to_string(),
            },
        }
    }

    fn progress(id: &str, nct_ids: &[&str], ultimate: Phase) -> DrugProgressRecord {
        DrugProgressRecord {
            drug_indication_id: id.to_string(),
            nct_ids: nct_ids
                .iter()
                .map(|s| s.to_string())
                .collect::<BTreeSet<_>>(),
            ultimate_phase: ultimate,
        }
    }

    #[test]
    fn links_by_nct_membership() {
        let trials = vec![trial("NCT1", Phase::PhaseI, RecruitmentStatus::Completed)];
        let tracker = vec![progress("D1", &["NCT1"], Phase::PhaseII)];
        let links = link(&trials, &tracker).unwrap();
        assert_eq!(links.get("NCT1"), Some(&0));
    }

    #[test]
    fn links_by_drug_indication_fallback() {
        let mut t = trial("NCT9", Phase::PhaseI, RecruitmentStatus::Completed);
        t.drug_indication_id = Some("D2".to_string());
        let tracker = vec![
            progress("D1", &["NCT1"], Phase::PhaseII),
            progress("D2", &["NCT5"], Phase::PhaseIII),
        ];
        let links = link(&[t], &tracker).unwrap();
        assert_eq!(links.get("NCT9"), Some(&1));
    }

    #[test]
    fn nct_match_takes_precedence_over_drug_indication() {
        let mut t = trial("NCT1", Phase::PhaseI, RecruitmentStatus::Completed);
        t.drug_indication_id = Some("D2".to_string());
        let tracker = vec![
            progress("D1", &["NCT1"], Phase::PhaseII),
            progress("D2", &["NCT5"], Phase::PhaseIII),
        ];
        let links = link(&[t], &tracker).unwrap();
        assert_eq!(links.get("NCT1"), Some(&0));
    }

    #[test]
    fn unmatched_trial_is_absent_from_map() {
        let trials = vec![trial("NCT7", Phase::PhaseI, RecruitmentStatus::Completed)];
        let tracker = vec![progress("D1", &["NCT1"], Phase::PhaseII)];
        let links = link(&trials, &tracker).unwrap();
        assert!(links.is_empty());
    }

    #[test]
    fn ambiguous_nct_claim_is_an_error() {
        let tracker = vec![
            progress("D1", &["NCT1"], Phase::PhaseII),
            progress("D2", &["NCT1"], Phase::PhaseIII),
        ];
        let err = link(&[], &tracker).unwrap_err();
        assert!(matches!(err, LinkError::AmbiguousLink { ref nct_id, .. } if nct_id == "NCT1"));
    }

    #[test]
    fn rule_examples_from_each_branch() {
        // Completed Phase II, drug reached Phase III: succeeded.
        let t = trial("NCT1", Phase::PhaseII, RecruitmentStatus::Completed);
        let p = progress("D1", &["NCT1"], Phase::PhaseIII);
        let label = assign_label(&t, Some(&p)).unwrap();
        assert_eq!(label.value, LabelValue::Yes);
        assert_eq!(label.rule, LabelRule::Rule1Succeeded);

        // Completed Phase III, drug stuck at Phase III: no transition.
        let t = trial("NCT2", Phase::PhaseIII, RecruitmentStatus::Completed);
        let label = assign_label(&t, Some(&p)).unwrap();
        assert_eq!(label.value, LabelValue::No);
        assert_eq!(label.rule, LabelRule::Rule2AtUltimatePhase);

        // Terminated overrides a tracker that says the drug was approved.
        let t = trial("NCT3", Phase::PhaseIII, RecruitmentStatus::Terminated);
        let p = progress("D1", &["NCT3"], Phase::Approved);
        let label = assign_label(&t, Some(&p)).unwrap();
        assert_eq!(label.value, LabelValue::No);
        assert_eq!(label.rule, LabelRule::Rule3Terminated);
    }

    #[test]
    fn termination_reason_is_copied_into_the_label() {
        let mut t = trial("NCT4", Phase::PhaseII, RecruitmentStatus::Terminated);
        t.termination_reason = Some("Strategic".to_string());
        let label = assign_label(&t, None).unwrap();
        assert_eq!(label.reason.as_deref(), Some("Strategic"));
    }

    /// Expected label for each (phase, ultimate, status) combination, read
    /// directly off the three rules. Kept independent of `assign_label`.
    fn oracle(phase: Phase, ultimate: Phase, terminated: bool) -> Option<(LabelValue, LabelRule)> {
        use LabelRule::*;
        use LabelValue::*;
        if terminated {
            return Some((No, Rule3Terminated));
        }
        match (phase, ultimate) {
            (Phase::PhaseI, Phase::PhaseI) => Some((No, Rule2AtUltimatePhase)),
            (Phase::PhaseI, Phase::PhaseII) => Some((Yes, Rule1Succeeded)),
            (Phase::PhaseI, Phase::PhaseIII) => Some((Yes, Rule1Succeeded)),
            (Phase::PhaseI, Phase::Approved) => Some((Yes, Rule1Succeeded)),
            (Phase::PhaseII, Phase::PhaseI) => None,
            (Phase::PhaseII, Phase::PhaseII) => Some((No, Rule2AtUltimatePhase)),
            (Phase::PhaseII, Phase::PhaseIII) => Some((Yes, Rule1Succeeded)),
            (Phase::PhaseII, Phase::Approved) => Some((Yes, Rule1Succeeded)),
            (Phase::PhaseIII, Phase::PhaseI) => None,
            (Phase::PhaseIII, Phase::PhaseII) => None,
            (Phase::PhaseIII, Phase::PhaseIII) => Some((No, Rule2AtUltimatePhase)),
            (Phase::PhaseIII, Phase::Approved) => Some((Yes, Rule1Succeeded)),
            (Phase::Approved, _) => unreachable!("not a trial phase"),
        }
    }

    #[test]
    fn truth_table_all_36_cases() {
        let statuses = [
            RecruitmentStatus::Completed,
            RecruitmentStatus::Terminated,
            RecruitmentStatus::Other("Suspended".to_string()),
        ];
        let mut cases = 0;
        for phase in Phase::TRIAL_PHASES {
            for ultimate in Phase::ALL {
                for status in &statuses {
                    cases += 1;
                    let t = trial("NCT1", phase, status.clone());
                    let p = progress("D1", &["NCT1"], ultimate);
                    let got = assign_label(&t, Some(&p));
                    let expected =
                        oracle(phase, ultimate, *status == RecruitmentStatus::Terminated);
                    assert_eq!(
                        got.as_ref().map(|l| (l.value, l.rule)),
                        expected,
                        "phase={phase:?} ultimate={ultimate:?} status={status:?}"
                    );
                }
            }
        }
        assert_eq!(cases, 36);
    }

    #[test]
    fn rule3_supremacy_over_any_tracker_content() {
        for phase in Phase::TRIAL_PHASES {
            for ultimate in Phase::ALL {
                let t = trial("NCT1", phase, RecruitmentStatus::Terminated);
                let p = progress("D1", &["NCT1"], ultimate);
                for progress in [None, Some(&p)] {
                    let label = assign_label(&t, progress).unwrap();
                    assert_eq!(label.value, LabelValue::No);
                    assert_eq!(label.rule, LabelRule::Rule3Terminated);
                }
            }
        }
    }

    #[test]
    fn raising_ultimate_phase_never_turns_yes_into_no() {
        for phase in Phase::TRIAL_PHASES {
            let mut last_was_yes = false;
            for ultimate in Phase::ALL {
                let t = trial("NCT1", phase, RecruitmentStatus::Completed);
                let p = progress("D1", &["NCT1"], ultimate);
                let yes = assign_label(&t, Some(&p)).is_some_and(|l| l.value == LabelValue::Yes);
                assert!(
                    !(last_was_yes && !yes),
                    "monotonicity broken at {ultimate:?}"
                );
                last_was_yes = yes;
            }
        }
    }

    #[test]
    fn assign_label_is_deterministic() {
        let t = trial("NCT1", Phase::PhaseII, RecruitmentStatus::Completed);
        let p = progress("D1", &["NCT1"], Phase::PhaseIII);
        let first = assign_label(&t, Some(&p));
        for _ in 0..10 {
            assert_eq!(assign_label(&t, Some(&p)), first);
        }
    }

    #[test]
    fn four_trial_fixture_covers_all_rules_plus_unlabeled() {
        let trials = vec![
            trial("NCT1", Phase::PhaseII, RecruitmentStatus::Completed),
            trial("NCT2", Phase::PhaseIII, RecruitmentStatus::Completed),
            trial("NCT3", Phase::PhaseI, RecruitmentStatus::Terminated),
            trial("NCT4", Phase::PhaseII, RecruitmentStatus::Completed),
        ];
        let tracker = vec![
            progress("D1", &["NCT1"], Phase::PhaseIII),
            progress("D2", &["NCT2"], Phase::PhaseIII),
        ];
        let corpus = label_corpus(&trials, &tracker).unwrap();
        assert_eq!(corpus.entries.len(), 3);
        assert_eq!(corpus.unlabeled.len(), 1);
        assert_eq!(corpus.unlabeled[0].nct_id, "NCT4");
        assert_eq!(corpus.link_stats.rule1, 1);
        assert_eq!(corpus.link_stats.rule2, 1);
        assert_eq!(corpus.link_stats.rule3, 1);
        assert_eq!(corpus.link_stats.linked, 2);
        assert_eq!(corpus.link_stats.unlinked, 2);
        // Partition invariant.
        assert_eq!(
            corpus.entries.len() + corpus.unlabeled.len(),
            corpus.link_stats.usable
        );
    }

    #[test]
    fn empty_corpus() {
        let corpus = label_corpus(&[], &[]).unwrap();
        assert!(corpus.entries.is_empty());
        assert!(corpus.unlabeled.is_empty());
        assert_eq!(corpus.link_stats, LinkStats::default());
    }

    #[test]
    fn low_quality_trials_are_excluded_and_counted() {
        let mut bad = trial("NCT1", Phase::PhaseI, RecruitmentStatus::Completed);
        bad.attributes.criteria.clear();
        let good = trial("NCT2", Phase::PhaseI, RecruitmentStatus::Terminated);
        let corpus = label_corpus(&[bad, good], &[]).unwrap();
        assert_eq!(corpus.link_stats.low_quality, 1);
        assert_eq!(corpus.link_stats.usable, 1);
        assert_eq!(corpus.entries.len(), 1);
        assert_eq!(corpus.entries[0].trial.nct_id, "NCT2");
    }

    #[test]
    fn phase_past_ultimate_is_unlabeled_and_counted() {
        let t = trial("NCT1", Phase::PhaseIII, RecruitmentStatus::Completed);
        let tracker = vec![progress("D1", &["NCT1"], Phase::PhaseI)];
        let corpus = label_corpus(&[t], &tracker).unwrap();
        assert!(corpus.entries.is_empty());
        assert_eq!(corpus.unlabeled.len(), 1);
        assert_eq!(corpus.link_stats.phase_inconsistent, 1);
    }

    #[test]
    fn corpus_assembly_is_input_order_independent() {
        let trials = vec![
            trial("NCT3", Phase::PhaseII, RecruitmentStatus::Completed),
            trial("NCT1", Phase::PhaseI, RecruitmentStatus::Terminated),
            trial("NCT2", Phase::PhaseII, RecruitmentStatus::Completed),
        ];
        let tracker = vec![progress("D1", &["NCT2", "NCT3"], Phase::PhaseIII)];
        let forward = label_corpus(&trials, &tracker).unwrap();
        let mut reversed_input = trials.clone();
        reversed_input.reverse();
        let reversed = label_corpus(&reversed_input, &tracker).unwrap();
        assert_eq!(forward, reversed);
    }
}
