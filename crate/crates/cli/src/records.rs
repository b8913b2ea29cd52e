//! Wire records owned by the CLI: description lines and prediction lines.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use ctp_core::linkage::{LabelRule, LabelValue};
use ctp_core::registry::Phase;

/// One synthesized trial description with its label and the fields needed
/// downstream (phase buckets, chronological checks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub nct_id: String,
    pub text: String,
    pub char_count: usize,
    pub label: LabelValue,
    pub rule: LabelRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub phase: Phase,
    pub last_modified: NaiveDate,
}

/// One model prediction. Random-forest predictions carry a vote fraction;
/// chat-model predictions carry the raw reply. `predicted` is absent when
/// a reply could not be normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub nct_id: String,
    pub predicted: Option<LabelValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}
