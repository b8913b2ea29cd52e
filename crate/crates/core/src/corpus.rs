//! Trial-description synthesis, dataset assembly, chronological splitting,
//! class balancing, and chat-format example construction.

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkage::{Label, LabelValue, LabeledTrial};
use crate::llmgate::SYSTEM_PROMPT;
use crate::registry::{Phase, TrialRecord};

/// Flattened text form of one trial protocol, fed to the models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialDescription {
    pub text: String,
    pub source_nct_id: String,
    pub char_count: usize,
}

/// Labels of the eleven description slots, in canonical attribute order.
pub const DESCRIPTION_FIELD_LABELS: [&str; crate::registry::ATTRIBUTE_COUNT] = [
    "TRIAL NAME",
    "BRIEF",
    "DRUG USED",
    "DRUG CLASS",
    "INDICATION",
    "TARGET",
    "THERAPY",
    "LEAD SPONSOR",
    "CRITERIA",
    "PRIMARY OUTCOME",
    "SECONDARY OUTCOME",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("trial {0} has no last_modified date")]
    MissingDate(String),
    #[error("cannot balance a corpus with a single label class")]
    SingleClassCorpus,
}

fn render_description(record: &TrialRecord, criteria: &str, brief: &str) -> String {
    let a = &record.attributes;
    format!(
        "TRIAL NAME: {}; \nBRIEF: {}; \nDRUG USED: {}; \nDRUG CLASS: {}; \nINDICATION: {}; \nTARGET: {}; \nTHERAPY: {}; \nLEAD SPONSOR: {}; \nCRITERIA: {}; \nPRIMARY OUTCOME: {}; \nSECONDARY OUTCOME: {}",
        a.name,
        brief,
        a.drug_used,
        a.drug_class,
        a.indication,
        a.target,
        a.therapy,
        a.lead_sponsor,
        criteria,
        a.primary_outcome,
        a.secondary_outcome,
    )
}

/// Truncate `field` so the whole description sheds `overflow` characters,
/// appending an ellipsis marker. Returns the saved character count.
fn shed_chars(field: &mut String, overflow: usize) -> usize {
    let len = field.chars().count();
    if len <= 1 || overflow == 0 {
        return 0;
    }
    let keep = len.saturating_sub(overflow + 1);
    let mut truncated: String = field.chars().take(keep).collect();
    truncated.push('…');
    let saved = len - (keep + 1);
    *field = truncated;
    saved
}

/// Concatenate the eleven protocol attributes into the fixed description
/// template. When the text exceeds `budget` characters, the criteria field
/// is truncated first, then the brief, each with a trailing ellipsis; all
/// other fields stay intact.
pub fn synthesize_description(record: &TrialRecord, budget: usize) -> TrialDescription {
    let mut criteria = record.attributes.criteria.clone();
    let mut brief = record.attributes.brief.clone();
    let mut text = render_description(record, &criteria, &brief);
    let mut length = text.chars().count();
    if length > budget {
        shed_chars(&mut criteria, length - budget);
        text = render_description(record, &criteria, &brief);
        length = text.chars().count();
    }
    if length > budget {
        shed_chars(&mut brief, length - budget);
        text = render_description(record, &criteria, &brief);
        length = text.chars().count();
    }
    TrialDescription {
        text,
        source_nct_id: record.nct_id.clone(),
        char_count: length,
    }
}

/// Chronologically contiguous train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledTrial>,
    pub validation: Vec<LabeledTrial>,
    pub test: Vec<LabeledTrial>,
    /// Last modification date inside the train and validation portions.
    pub cutoff_dates: (Option<NaiveDate>, Option<NaiveDate>),
}

impl DatasetSplit {
    /// Materialize each portion as (description, label) pairs under the
    /// given character budget.
    pub fn descriptions(&self, budget: usize) -> [Vec<(TrialDescription, Label)>; 3] {
        let build = |part: &[LabeledTrial]| {
            part.iter()
                .map(|e| (synthesize_description(&e.trial, budget), e.label.clone()))
                .collect()
        };
        [
            build(&self.train),
            build(&self.validation),
            build(&self.test),
        ]
    }
}

/// Sort by (last_modified, nct_id) and cut contiguous prefix/middle/suffix
/// portions. Portion sizes are the floors of `ratios`; remainder elements
/// go to train, then validation.
pub fn chronological_split(
    corpus: &[LabeledTrial],
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    for entry in corpus {
        if entry.trial.last_modified.is_none() {
            return Err(CorpusError::MissingDate(entry.trial.nct_id.clone()));
        }
    }

    let mut entries = corpus.to_vec();
    entries.sort_by(|a, b| {
        (a.trial.last_modified, &a.trial.nct_id).cmp(&(b.trial.last_modified, &b.trial.nct_id))
    });

    let n = entries.len();
    let mut n_train = (n as f64 * r_train).floor() as usize;
    let mut n_val = (n as f64 * r_val).floor() as usize;
    let n_test = (n as f64 * r_test).floor() as usize;
    let mut remainder = n - n_train - n_val - n_test;
    if remainder > 0 {
        n_train += 1;
        remainder -= 1;
    }
    if remainder > 0 {
        n_val += 1;
    }

    let test = entries.split_off(n_train + n_val);
    let validation = entries.split_off(n_train);
    let train = entries;
    let last_date = |part: &[LabeledTrial]| part.last().and_then(|e| e.trial.last_modified);
    let cutoff_dates = (last_date(&train), last_date(&validation));
    Ok(DatasetSplit {
        train,
        validation,
        test,
        cutoff_dates,
    })
}

/// Downsample the majority class, uniformly at random under `seed`, until
/// both classes have equal counts. Input order is preserved among the
/// survivors. Already balanced inputs come back unchanged.
pub fn balance(entries: &[LabeledTrial], seed: u64) -> Result<Vec<LabeledTrial>, CorpusError> {
    let yes: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label.value == LabelValue::Yes)
        .map(|(i, _)| i)
        .collect();
    let no: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.label.value == LabelValue::No)
        .map(|(i, _)| i)
        .collect();
    if yes.is_empty() || no.is_empty() {
        return Err(CorpusError::SingleClassCorpus);
    }
    if yes.len() == no.len() {
        return Ok(entries.to_vec());
    }
    let (majority, target) = if yes.len() > no.len() {
        (&yes, no.len())
    } else {
        (&no, yes.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: std::collections::BTreeSet<usize> =
        rand::seq::index::sample(&mut rng, majority.len(), target)
            .iter()
            .map(|pos| majority[pos])
            .collect();
    Ok(entries
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            let is_majority = if yes.len() > no.len() {
                e.label.value == LabelValue::Yes
            } else {
                e.label.value == LabelValue::No
            };
            !is_majority || kept.contains(i)
        })
        .map(|(_, e)| e.clone())
        .collect())
}

/// Entries whose trial sits in the given phase.
pub fn filter_phase(entries: &[LabeledTrial], phase: Phase) -> Vec<LabeledTrial> {
    entries
        .iter()
        .filter(|e| e.trial.phase == phase)
        .cloned()
        .collect()
}

/// One fine-tuning or inference example in chat format. Serializes as a
/// `messages` array with fixed role names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ChatExampleWire", try_from = "ChatExampleWire")]
pub struct ChatExample {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChatExampleWire {
    messages: Vec<ChatMessage>,
}

impl From<ChatExample> for ChatExampleWire {
    fn from(example: ChatExample) -> Self {
        ChatExampleWire {
            messages: vec![
                ChatMessage {
                    role: "system".to_string(),
                    content: example.system,
                },
                ChatMessage {
                    role: "user".to_string(),
                    content: example.user,
                },
                ChatMessage {
                    role: "assistant".to_string(),
                    content: example.assistant,
                },
            ],
        }
    }
}

impl TryFrom<ChatExampleWire> for ChatExample {
    type Error = String;

    fn try_from(wire: ChatExampleWire) -> Result<Self, Self::Error> {
        let [system, user, assistant]: [ChatMessage; 3] = wire
            .messages
            .try_into()
            .map_err(|m: Vec<ChatMessage>| format!("expected 3 messages, got {}", m.len()))?;
        for (message, expected) in [
            (&system, "system"),
            (&user, "user"),
            (&assistant, "assistant"),
        ] {
            if message.role != expected {
                return Err(format!(
                    "expected role {expected:?}, got {:?}",
                    message.role
                ));
            }
        }
        Ok(ChatExample {
            system: system.content,
            user: user.content,
            assistant: assistant.content,
        })
    }
}

/// Pair a description with its label as a chat example. In plain mode the
/// assistant reply is exactly `"Yes"` or `"No"`; in reasoning mode a
/// `No` label with a recorded reason becomes `"No. {reason}"`.
pub fn build_chat_example(
    description: &TrialDescription,
    label: &Label,
    reasoning: bool,
) -> ChatExample {
    let assistant = match (label.value, reasoning, &label.reason) {
        (LabelValue::Yes, _, _) => "Yes".to_string(),
        (LabelValue::No, true, Some(reason)) if !reason.trim().is_empty() => {
            format!("No. {reason}")
        }
        (LabelValue::No, _, _) => "No".to_string(),
    };
    ChatExample {
        system: SYSTEM_PROMPT.to_string(),
        user: description.text.clone(),
        assistant,
    }
}
