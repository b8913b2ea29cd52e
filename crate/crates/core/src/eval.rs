//! Evaluation: confusion counts, accuracy/F1 metrics, per-phase
//! breakdowns, drop-feature importance by retraining, and corpus
//! statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::drop_block;
use crate::forest::{ForestError, RFDataset};
use crate::linkage::{LabelValue, LabeledCorpus};
use crate::registry::{DrugClass, Phase, ATTRIBUTE_COUNT, ATTRIBUTE_NAMES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("nothing to evaluate: all predictions were skipped or absent")]
    EmptyEvaluation,
    #[error("feature dimension {dim} is not a multiple of {}", ATTRIBUTE_COUNT)]
    InvalidDimension { dim: usize },
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Binary confusion counts with `Yes` as the positive class. Absent
/// predictions are tallied as `skipped` and excluded from metric
/// denominators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub skipped: usize,
}

impl ConfusionMatrix {
    pub fn scored(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    pub fn total(&self) -> usize {
        self.scored() + self.skipped
    }

    /// Element-wise accumulation, used when aggregating bucket matrices.
    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.true_negatives += other.true_negatives;
        self.false_negatives += other.false_negatives;
        self.skipped += other.skipped;
    }
}

/// Tally predictions against gold labels.
pub fn confusion(
    predictions: &[Option<LabelValue>],
    golds: &[LabelValue],
) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let mut matrix = ConfusionMatrix::default();
    for (prediction, gold) in predictions.iter().zip(golds) {
        match (prediction, gold) {
            (None, _) => matrix.skipped += 1,
            (Some(LabelValue::Yes), LabelValue::Yes) => matrix.true_positives += 1,
            (Some(LabelValue::Yes), LabelValue::No) => matrix.false_positives += 1,
            (Some(LabelValue::No), LabelValue::No) => matrix.true_negatives += 1,
            (Some(LabelValue::No), LabelValue::Yes) => matrix.false_negatives += 1,
        }
    }
    Ok(matrix)
}

/// Accuracy and F1 scores derived from a confusion matrix. The F1 of a
/// class with an empty denominator is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_positive: f64,
    pub f1_macro: f64,
}

pub fn metrics(matrix: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let scored = matrix.scored();
    if scored == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let tp = matrix.true_positives as f64;
    let fp = matrix.false_positives as f64;
    let tn = matrix.true_negatives as f64;
    let fn_ = matrix.false_negatives as f64;
    let accuracy = (tp + tn) / scored as f64;
    let f1_positive = if 2.0 * tp + fp + fn_ == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let f1_negative = if 2.0 * tn + fn_ + fp == 0.0 {
        0.0
    } else {
        2.0 * tn / (2.0 * tn + fn_ + fp)
    };
    Ok(Metrics {
        accuracy,
        f1_positive,
        f1_macro: (f1_positive + f1_negative) / 2.0,
    })
}

/// Per-phase metric pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub accuracy: f64,
    pub f1_positive: f64,
}

/// Overall and per-phase evaluation results. Phases without any scored
/// example are omitted from `per_phase`; `counts` records how many
/// examples (including skipped ones) each phase contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1_positive: f64,
    pub f1_macro: f64,
    pub skipped: usize,
    pub per_phase: BTreeMap<Phase, PhaseMetrics>,
    pub counts: BTreeMap<Phase, usize>,
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "overall: accuracy {:.4}  f1_positive {:.4}  f1_macro {:.4}  skipped {}\n",
            self.accuracy, self.f1_positive, self.f1_macro, self.skipped
        ));
        for (phase, phase_metrics) in &self.per_phase {
            out.push_str(&format!(
                "{:<10} accuracy {:.4}  f1_positive {:.4}  n {}\n",
                phase.to_string(),
                phase_metrics.accuracy,
                phase_metrics.f1_positive,
                self.counts.get(phase).copied().unwrap_or(0)
            ));
        }
        out
    }

    /// Machine-readable comma-separated form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,accuracy,f1_positive,f1_macro,n,skipped\n");
        out.push_str(&format!(
            "overall,{:.6},{:.6},{:.6},{},{}\n",
            self.accuracy,
            self.f1_positive,
            self.f1_macro,
            self.counts.values().sum::<usize>(),
            self.skipped
        ));
        for (phase, phase_metrics) in &self.per_phase {
            out.push_str(&format!(
                "{},{:.6},{:.6},,{},\n",
                phase,
                phase_metrics.accuracy,
                phase_metrics.f1_positive,
                self.counts.get(phase).copied().unwrap_or(0)
            ));
        }
        out
    }
}

/// Metrics overall and bucketed by trial phase.
pub fn per_phase_report(
    predictions: &[Option<LabelValue>],
    golds: &[LabelValue],
    phases: &[Phase],
) -> Result<EvalReport, EvalError> {
    if predictions.len() != golds.len() || golds.len() != phases.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len().min(phases.len()),
        });
    }
    let overall_matrix = confusion(predictions, golds)?;
    let overall = metrics(&overall_matrix)?;

    let mut per_phase = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for phase in Phase::TRIAL_PHASES {
        let indices: Vec<usize> = (0..golds.len()).filter(|&i| phases[i] == phase).collect();
        if indices.is_empty() {
            continue;
        }
        counts.insert(phase, indices.len());
        let bucket_predictions: Vec<Option<LabelValue>> =
            indices.iter().map(|&i| predictions[i]).collect();
        let bucket_golds: Vec<LabelValue> = indices.iter().map(|&i| golds[i]).collect();
        let bucket_matrix = confusion(&bucket_predictions, &bucket_golds)?;
        if bucket_matrix.scored() == 0 {
            continue;
        }
        let bucket = metrics(&bucket_matrix)?;
        per_phase.insert(
            phase,
            PhaseMetrics {
                accuracy: bucket.accuracy,
                f1_positive: bucket.f1_positive,
            },
        );
    }
    Ok(EvalReport {
        accuracy: overall.accuracy,
        f1_positive: overall.f1_positive,
        f1_macro: overall.f1_macro,
        skipped: overall_matrix.skipped,
        per_phase,
        counts,
    })
}

/// Drop-feature importance: how much the positive-class F1 drops when one
/// attribute's embedding block is removed and the model retrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub baseline_f1: f64,
    /// (attribute name, baseline F1 minus dropped-retrained F1), sorted by
    /// descending delta. Negative deltas mean dropping the attribute
    /// helped. Always one entry per attribute.
    pub per_attribute: Vec<(String, f64)>,
}

impl FeatureImportanceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attribute,delta_f1,baseline_f1\n");
        for (name, delta) in &self.per_attribute {
            out.push_str(&format!("{name},{delta:.6},{:.6}\n", self.baseline_f1));
        }
        out
    }

    /// Attribute with the largest delta.
    pub fn top(&self) -> &(String, f64) {
        &self.per_attribute[0]
    }
}

/// Run the retrain-and-score procedure on the full vectors, then once per
/// attribute with that attribute's block dropped from both datasets (same
/// seed, same split), and report the F1 deltas.
pub fn drop_feature_importance<F>(
    train_eval: F,
    train: &RFDataset,
    test: &RFDataset,
) -> Result<FeatureImportanceReport, EvalError>
where
    F: Fn(&RFDataset, &RFDataset) -> Result<f64, ForestError> + Sync,
{
    let dim = train.dim();
    if dim == 0 || dim % ATTRIBUTE_COUNT != 0 || test.dim() != dim {
        return Err(EvalError::InvalidDimension { dim });
    }
    let block = dim / ATTRIBUTE_COUNT;
    let baseline_f1 = train_eval(train, test)?;

    let drop_rows = |data: &RFDataset, index: usize| -> Result<RFDataset, EvalError> {
        let features = (0..data.len())
            .map(|row| drop_block(data.feature_row(row), block, index).expect("index checked"))
            .collect();
        Ok(RFDataset::from_parts(features, data.labels().to_vec())?)
    };

    let deltas: Vec<Result<(String, f64), EvalError>> = (0..ATTRIBUTE_COUNT)
        .into_par_iter()
        .map(|index| {
            let dropped_train = drop_rows(train, index)?;
            let dropped_test = drop_rows(test, index)?;
            let f1 = train_eval(&dropped_train, &dropped_test)?;
            Ok((ATTRIBUTE_NAMES[index].to_string(), baseline_f1 - f1))
        })
        .collect();
    let mut per_attribute = deltas.into_iter().collect::<Result<Vec<_>, _>>()?;
    per_attribute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(FeatureImportanceReport {
        baseline_f1,
        per_attribute,
    })
}

/// Outcome counts for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseOutcomeCounts {
    pub phase: Phase,
    pub yes: usize,
    pub no: usize,
    pub unlabeled: usize,
}

/// Pass/fail tally for one drug class. Ratios are 0 when the class has no
/// labeled entries, otherwise they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrugClassOutcome {
    pub drug_class: DrugClass,
    pub passed: usize,
    pub failed: usize,
    pub pass_ratio: f64,
    pub fail_ratio: f64,
}

/// Plot-ready corpus statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_phase: Vec<PhaseOutcomeCounts>,
    pub per_drug_class: Vec<DrugClassOutcome>,
}

pub fn corpus_stats(corpus: &LabeledCorpus) -> CorpusStats {
    let mut per_phase: Vec<PhaseOutcomeCounts> = Phase::TRIAL_PHASES
        .iter()
        .map(|&phase| PhaseOutcomeCounts {
            phase,
            yes: 0,
            no: 0,
            unlabeled: 0,
        })
        .collect();
    let phase_slot = |phase: Phase| match phase {
        Phase::PhaseI => 0usize,
        Phase::PhaseII => 1,
        Phase::PhaseIII => 2,
        Phase::Approved => unreachable!("trial records never carry Approved"),
    };
    let mut class_counts: BTreeMap<DrugClass, (usize, usize)> = BTreeMap::new();
    for entry in &corpus.entries {
        let slot = &mut per_phase[phase_slot(entry.trial.phase)];
        let class = class_counts
            .entry(entry.trial.attributes.drug_class)
            .or_default();
        match entry.label.value {
            LabelValue::Yes => {
                slot.yes += 1;
                class.0 += 1;
            }
            LabelValue::No => {
                slot.no += 1;
                class.1 += 1;
            }
        }
    }
    for trial in &corpus.unlabeled {
        per_phase[phase_slot(trial.phase)].unlabeled += 1;
    }
    let per_drug_class = DrugClass::ALL
        .iter()
        .map(|&drug_class| {
            let (passed, failed) = class_counts.get(&drug_class).copied().unwrap_or((0, 0));
            let labeled = passed + failed;
            let (pass_ratio, fail_ratio) = if labeled == 0 {
                (0.0, 0.0)
            } else {
                (
                    passed as f64 / labeled as f64,
                    failed as f64 / labeled as f64,
                )
            };
            DrugClassOutcome {
                drug_class,
                passed,
                failed,
                pass_ratio,
                fail_ratio,
            }
        })
        .collect();
    CorpusStats {
        per_phase,
        per_drug_class,
    }
}

impl CorpusStats {
    pub fn phase_csv(&self) -> String {
        let mut out = String::from("phase,yes,no,unlabeled\n");
        for row in &self.per_phase {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.phase, row.yes, row.no, row.unlabeled
            ));
        }
        out
    }

    pub fn drug_class_csv(&self) -> String {
        let mut out = String::from("drug_class,passed,failed,pass_ratio,fail_ratio\n");
        for row in &self.per_drug_class {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                row.drug_class, row.passed, row.failed, row.pass_ratio, row.fail_ratio
            ));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::from("phase       yes     no      unlabeled\n");
        for row in &self.per_phase {
            out.push_str(&format!(
                "{:<11} {:<7} {:<7} {}\n",
                row.phase.to_string(),
                row.yes,
                row.no,
                row.unlabeled
            ));
        }
        out.push_str("\ndrug class                           passed  failed  pass_ratio\n");
        for row in &self.per_drug_class {
            out.push_str(&format!(
                "{:<36} {:<7} {:<7} {:.3}\n",
                row.drug_class.to_string(),
                row.passed,
                row.failed,
                row.pass_ratio
            ));
        }
        out
    }
}
