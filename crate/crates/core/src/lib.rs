//! Core library for the CTP pipeline: building a phase-transition-labeled
//! clinical-trial corpus from registry and drug-tracker records, and
//! predicting phase transitions with either a from-scratch random forest
//! over hashed/remote text embeddings or a fine-tuned chat model.
//!
//! Modules follow the pipeline order:
//!
//! - [`registry`]: parse and validate trial and drug-tracker records
//! - [`linkage`]: join the two sources and assign transition labels
//! - [`corpus`]: trial descriptions, chronological splits, balancing,
//!   chat-format examples
//! - [`embed`]: per-attribute embedding vectors and feature concatenation
//! - [`forest`]: random-forest classifier with Gini splits and majority vote
//! - [`llmgate`]: fine-tune export, chat-service client, and offline replay
//!   stub
//! - [`eval`]: metrics, per-phase breakdowns, drop-feature importance,
//!   corpus statistics

pub mod corpus;
pub mod embed;
pub mod eval;
pub mod forest;
pub mod formats;
pub mod linkage;
pub mod llmgate;
pub mod registry;
