//! Seeded synthetic trial + tracker generator.
//!
//! Produces internally consistent record pairs whose rule-derived labels
//! match a requested class mix exactly (quota assignment, seeded
//! shuffle), with an optional planted signal token injected into one
//! attribute of one label class. Used by tests and demos; real registry
//! exports replace it in production runs.

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ctp_core::linkage::LabelValue;
use ctp_core::registry::{
    AttributeSet, DrugClass, DrugProgressRecord, Phase, RecruitmentStatus, TrialRecord,
    ATTRIBUTE_NAMES,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Planted signal: inject `token` into `attribute` of trials in `class`
/// with probability `strength`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub attribute: String,
    pub token: String,
    pub strength: f64,
    pub class: LabelValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_trials: usize,
    /// Phase I / II / III proportions.
    pub phase_mix: [f64; 3],
    /// (yes, no) proportions; any remainder becomes unlabeled trials.
    pub label_mix: (f64, f64),
    pub signal: Option<SignalSpec>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_trials: 1000,
            // Phase II heaviest, matching the usual registry shape.
            phase_mix: [0.25, 0.45, 0.30],
            label_mix: (0.5, 0.5),
            signal: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub trials: Vec<TrialRecord>,
    pub tracker: Vec<DrugProgressRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Yes,
    No,
    Unlabeled,
}

const INDICATIONS: [&str; 18] = [
    "Advanced Solid Tumors",
    "Metastatic Breast Cancer",
    "Rheumatoid Arthritis",
    "Type 2 Diabetes Mellitus",
    "Chronic Heart Failure",
    "Major Depressive Disorder",
    "Non-Small Cell Lung Cancer",
    "Ulcerative Colitis",
    "Chronic Obstructive Pulmonary Disease",
    "Multiple Sclerosis",
    "Atopic Dermatitis",
    "Parkinson's Disease",
    "Acute Myeloid Leukemia",
    "Psoriatic Arthritis",
    "Hepatitis B",
    "Migraine Prophylaxis",
    "Chronic Kidney Disease",
    "Osteoporosis",
];

const TARGETS: [&str; 14] = [
    "EGFR (Epidermal Growth Factor Receptor)",
    "PD-1 (Programmed Cell Death Protein 1)",
    "TNF-alpha",
    "IL-6 Receptor",
    "HER2",
    "VEGF-A",
    "JAK1/JAK2",
    "SGLT2",
    "GLP-1 Receptor",
    "BTK (Bruton Tyrosine Kinase)",
    "CGRP Receptor",
    "Alpha-Synuclein",
    "CD20",
    "IGF-1R (Insulin-like Growth Factor-1 Receptor)",
];

const THERAPIES: [&str; 5] = [
    "Monotherapy",
    "Combination Therapy",
    "Targeted Therapy",
    "Adjuvant Therapy",
    "Maintenance Therapy",
];

const SPONSORS: [&str; 12] = [
    "Helix Biosciences",
    "Meridian Therapeutics",
    "Cobalt Pharma",
    "Northgate Labs",
    "Auric Medical",
    "Vantage Oncology Group",
    "Polaris Biotech",
    "Crestline Pharmaceuticals",
    "Blue Harbor Research",
    "Summit Axis Therapeutics",
    "Redwood Clinical",
    "Lakeshore Biologics",
];

const BRIEF_GOALS: [&str; 8] = [
    "is safe and well tolerated",
    "improves overall survival",
    "reduces symptom burden",
    "increases response rates",
    "slows disease progression",
    "improves quality of life",
    "achieves durable remission",
    "lowers exacerbation frequency",
];

const CRITERIA_VOCAB: [&str; 72] = [
    "adults",
    "aged",
    "baseline",
    "biopsy",
    "cardiac",
    "cohort",
    "confirmed",
    "consent",
    "contraception",
    "creatinine",
    "diagnosis",
    "documented",
    "eastern",
    "ecog",
    "eligible",
    "enrollment",
    "evaluable",
    "exclusion",
    "fertile",
    "function",
    "hemoglobin",
    "hepatic",
    "histologically",
    "hypertension",
    "imaging",
    "infection",
    "informed",
    "lesion",
    "lymphocyte",
    "malignancy",
    "measurable",
    "metastases",
    "monotherapy",
    "neuropathy",
    "neutrophil",
    "normal",
    "organ",
    "performance",
    "platelet",
    "pregnancy",
    "previous",
    "prior",
    "prohibited",
    "radiotherapy",
    "randomized",
    "refractory",
    "relapsed",
    "renal",
    "resistant",
    "screening",
    "seizure",
    "serum",
    "stable",
    "status",
    "steroid",
    "surgery",
    "symptomatic",
    "systemic",
    "therapy",
    "tolerated",
    "toxicity",
    "transplant",
    "treatment",
    "tumor",
    "untreated",
    "washout",
    "weight",
    "willing",
    "within",
    "women",
    "years",
    "documentedly",
];

const PRIMARY_OUTCOMES: [&str; 8] = [
    "Number of Participants With Treatment-Emergent Adverse Events",
    "Overall Response Rate at Week 24",
    "Change From Baseline in Disease Activity Score",
    "Progression-Free Survival",
    "Incidence of Dose-Limiting Toxicities",
    "Time to First Exacerbation",
    "Mean Change in Symptom Severity Scale",
    "Proportion of Participants Achieving Remission",
];

const SECONDARY_OUTCOMES: [&str; 8] = [
    "Overall Survival at 12 Months",
    "Duration of Response",
    "Change From Baseline in Quality of Life Score",
    "Pharmacokinetic Profile of the Study Drug",
    "Number of Hospitalizations Through Week 52",
    "Immunogenicity Incidence",
    "Mean Change in Biomarker Levels",
    "Time to Treatment Discontinuation",
];

const TERMINATION_REASONS: [&str; 6] = [
    "Strategic",
    "Lack of efficacy at interim analysis",
    "Safety signal observed in treated arm",
    "Enrollment shortfall",
    "Funding withdrawn by sponsor",
    "Primary endpoint not met in companion study",
];

/// Largest-remainder quota counts for `fractions` over `total` items.
fn quota_counts(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .partial_cmp(&(raw[a] - raw[a].floor()))
            .unwrap()
    });
    let assigned: usize = counts.iter().sum();
    for index in order.into_iter().cycle().take(total - assigned) {
        counts[index] += 1;
    }
    counts
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn random_date(rng: &mut ChaCha8Rng) -> NaiveDate {
    let base: NaiveDate = "2005-01-01".parse().unwrap();
    base + chrono::Duration::days(rng.random_range(0..6756))
}

fn criteria_text(rng: &mut ChaCha8Rng) -> String {
    let inclusion: Vec<&str> = (0..rng.random_range(3..=4))
        .map(|_| pick(rng, &CRITERIA_VOCAB))
        .collect();
    let exclusion: Vec<&str> = (0..rng.random_range(2..=3))
        .map(|_| pick(rng, &CRITERIA_VOCAB))
        .collect();
    format!(
        "Inclusion: {}. Exclusion: {}.",
        inclusion.join(" "),
        exclusion.join(" ")
    )
}

fn inject_token(text: &str, token: &str) -> String {
    if text.is_empty() {
        token.to_string()
    } else {
        format!("{token} {text}")
    }
}

fn attribute_slot<'a>(attributes: &'a mut AttributeSet, name: &str) -> Option<&'a mut String> {
    match name {
        "name" => Some(&mut attributes.name),
        "brief" => Some(&mut attributes.brief),
        "drug_used" => Some(&mut attributes.drug_used),
        "indication" => Some(&mut attributes.indication),
        "target" => Some(&mut attributes.target),
        "therapy" => Some(&mut attributes.therapy),
        "lead_sponsor" => Some(&mut attributes.lead_sponsor),
        "criteria" => Some(&mut attributes.criteria),
        "primary_outcome" => Some(&mut attributes.primary_outcome),
        "secondary_outcome" => Some(&mut attributes.secondary_outcome),
        _ => None,
    }
}

fn validate(spec: &SyntheticSpec) -> Result<(), SynthError> {
    if spec.n_trials == 0 {
        return Err(SynthError::InvalidSpec("n_trials must be >= 1".into()));
    }
    let phase_sum: f64 = spec.phase_mix.iter().sum();
    if spec.phase_mix.iter().any(|&p| p < 0.0) || (phase_sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidSpec(format!(
            "phase_mix must be non-negative and sum to 1, got {:?}",
            spec.phase_mix
        )));
    }
    let (yes, no) = spec.label_mix;
    if yes < 0.0 || no < 0.0 || yes + no > 1.0 + 1e-9 {
        return Err(SynthError::InvalidSpec(format!(
            "label_mix must be non-negative and sum to at most 1, got {:?}",
            spec.label_mix
        )));
    }
    if let Some(signal) = &spec.signal {
        if !(0.0..=1.0).contains(&signal.strength) {
            return Err(SynthError::InvalidSpec(format!(
                "signal strength {} outside [0, 1]",
                signal.strength
            )));
        }
        if signal.token.is_empty() {
            return Err(SynthError::InvalidSpec("signal token is empty".into()));
        }
        if !ATTRIBUTE_NAMES.contains(&signal.attribute.as_str()) || signal.attribute == "drug_class"
        {
            return Err(SynthError::InvalidSpec(format!(
                "signal attribute {:?} is not an injectable attribute",
                signal.attribute
            )));
        }
    }
    Ok(())
}

/// Generate a consistent trial + tracker corpus for `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, SynthError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_trials;

    let (yes_frac, no_frac) = spec.label_mix;
    let label_counts = quota_counts(n, &[yes_frac, no_frac, (1.0 - yes_frac - no_frac).max(0.0)]);
    let mut outcomes: Vec<Outcome> = std::iter::empty()
        .chain(std::iter::repeat_n(Outcome::Yes, label_counts[0]))
        .chain(std::iter::repeat_n(Outcome::No, label_counts[1]))
        .chain(std::iter::repeat_n(Outcome::Unlabeled, label_counts[2]))
        .collect();
    outcomes.shuffle(&mut rng);

    let phase_counts = quota_counts(n, &spec.phase_mix);
    let mut phases: Vec<Phase> = std::iter::empty()
        .chain(std::iter::repeat_n(Phase::PhaseI, phase_counts[0]))
        .chain(std::iter::repeat_n(Phase::PhaseII, phase_counts[1]))
        .chain(std::iter::repeat_n(Phase::PhaseIII, phase_counts[2]))
        .collect();
    phases.shuffle(&mut rng);

    let mut trials = Vec::with_capacity(n);
    let mut tracker = Vec::new();
    for index in 0..n {
        let phase = phases[index];
        let outcome = outcomes[index];
        let nct_id = format!("NCT{:07}", index + 1);
        let drug_indication_id = format!("DI-{:06}", index + 1);
        // Drug and study codes come from a bounded pool: identifiers repeat
        // across trials the way compound names do across a program.
        let drug_number: u32 = rng.random_range(0..48);
        let drug_used = format!("RX-{drug_number:03}");
        let indication = pick(&mut rng, &INDICATIONS);
        let phase_numeral = match phase {
            Phase::PhaseI => "I",
            Phase::PhaseII => "II",
            Phase::PhaseIII => "III",
            Phase::Approved => unreachable!(),
        };
        let mut attributes = AttributeSet {
            name: format!("Phase {phase_numeral} - {drug_used} Study"),
            brief: format!(
                "The purpose of this study is to determine if {drug_used} {} in participants with {indication}.",
                pick(&mut rng, &BRIEF_GOALS)
            ),
            drug_used,
            drug_class: DrugClass::ALL[rng.random_range(0..DrugClass::ALL.len())],
            indication: indication.to_string(),
            target: pick(&mut rng, &TARGETS).to_string(),
            therapy: pick(&mut rng, &THERAPIES).to_string(),
            lead_sponsor: pick(&mut rng, &SPONSORS).to_string(),
            criteria: criteria_text(&mut rng),
            primary_outcome: pick(&mut rng, &PRIMARY_OUTCOMES).to_string(),
            secondary_outcome: pick(&mut rng, &SECONDARY_OUTCOMES).to_string(),
        };

        if let Some(signal) = &spec.signal {
            let in_class = matches!(
                (signal.class, outcome),
                (LabelValue::Yes, Outcome::Yes) | (LabelValue::No, Outcome::No)
            );
            if in_class && rng.random_bool(signal.strength) {
                let slot = attribute_slot(&mut attributes, &signal.attribute)
                    .expect("attribute validated");
                *slot = inject_token(slot, &signal.token);
            }
        }

        let mut status = RecruitmentStatus::Completed;
        let mut termination_reason = None;
        match outcome {
            Outcome::Yes => {
                let later: Vec<Phase> = Phase::ALL.iter().copied().filter(|&p| p > phase).collect();
                let ultimate = later[rng.random_range(0..later.len())];
                tracker.push(DrugProgressRecord {
                    drug_indication_id: drug_indication_id.clone(),
                    nct_ids: [nct_id.clone()].into(),
                    ultimate_phase: ultimate,
                });
            }
            Outcome::No => {
                if rng.random_bool(0.5) {
                    // Terminated trials override whatever the tracker says;
                    // sometimes give them a tracker entry to prove it.
                    status = RecruitmentStatus::Terminated;
                    termination_reason = Some(pick(&mut rng, &TERMINATION_REASONS).to_string());
                    if rng.random_bool(0.5) {
                        let at_or_later: Vec<Phase> =
                            Phase::ALL.iter().copied().filter(|&p| p >= phase).collect();
                        let ultimate = at_or_later[rng.random_range(0..at_or_later.len())];
                        tracker.push(DrugProgressRecord {
                            drug_indication_id: drug_indication_id.clone(),
                            nct_ids: [nct_id.clone()].into(),
                            ultimate_phase: ultimate,
                        });
                    }
                } else {
                    tracker.push(DrugProgressRecord {
                        drug_indication_id: drug_indication_id.clone(),
                        nct_ids: [nct_id.clone()].into(),
                        ultimate_phase: phase,
                    });
                }
            }
            Outcome::Unlabeled => {}
        }

        trials.push(TrialRecord {
            nct_id,
            drug_indication_id: Some(drug_indication_id),
            phase,
            status,
            last_modified: Some(random_date(&mut rng)),
            termination_reason,
            attributes,
        });
    }
    Ok(SyntheticCorpus { trials, tracker })
}
