//! Client for a remote chat-model service: fine-tune dataset export and
//! validation, job submission and polling, prediction requests with reply
//! normalization, and a deterministic replay stub so the whole path runs
//! offline.
//!
//! The wire protocol is a vendor-neutral chat-completions + fine-tune-jobs
//! HTTP contract; the base URL comes from configuration and the API key
//! from the environment, never from config files.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_chat_example, synthesize_description, ChatExample, TrialDescription};
use crate::linkage::{Label, LabelValue, LabeledCorpus};

/// Environment variable holding the service API key.
pub const API_KEY_ENV: &str = "CTP_MODEL_API_KEY";

/// System prompt sent with every fine-tuning example and every prediction
/// request. Exports and validation require this text byte-for-byte.
pub const SYSTEM_PROMPT: &str = "You are a medical expert who specializes in analyzing clinical trials. Your role is to help the user predict whether a clinical trial will progress to the next phase.\n\nAnswer only with `Yes' if it progresses to the next phase or `No' if it doesn't.";

/// The instruction prompt paired with each trial description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system_text: SYSTEM_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("chat service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("invalid training file at line {line}: {reason}")]
    InvalidTrainingFile { line: usize, reason: String },
    #[error("missing API key: set the {0} environment variable")]
    AuthMissing(String),
    #[error("no recorded reply for request {0:?}")]
    NotRecorded(String),
    #[error("service protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fine-tune job lifecycle. Transitions are monotone:
/// Pending -> Running -> Succeeded | Failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail")]
pub enum JobStatus {
    Pending,
    Running,
    Succeeded(String),
    Failed(String),
}

impl JobStatus {
    fn rank(&self) -> u8 {
        match self {
            JobStatus::Pending => 0,
            JobStatus::Running => 1,
            JobStatus::Succeeded(_) | JobStatus::Failed(_) => 2,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.rank() == 2
    }
}

/// Handle on a submitted fine-tune job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneJob {
    pub base_model_id: String,
    pub training_file_ref: Option<String>,
    pub job_id: String,
    pub status: JobStatus,
}

impl FineTuneJob {
    /// Record a freshly polled status, rejecting regressions and succeeded
    /// states without a model id.
    pub fn advance_to(&mut self, status: JobStatus) -> Result<(), LlmError> {
        if let JobStatus::Succeeded(model_id) = &status {
            if model_id.is_empty() {
                return Err(LlmError::Protocol(
                    "succeeded job carries an empty model id".to_string(),
                ));
            }
        }
        if status.rank() < self.status.rank()
            || (self.status.is_terminal() && status != self.status)
        {
            return Err(LlmError::Protocol(format!(
                "status regressed from {:?} to {status:?}",
                self.status
            )));
        }
        self.status = status;
        Ok(())
    }
}

/// A raw model reply plus its normalized reading. `parsed` is present
/// exactly when the reply's first word is yes/no (case-insensitive, after
/// trimming and stripping trailing punctuation); the remainder of a `No`
/// reply is kept as the stated reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelReply {
    pub raw_text: String,
    pub parsed: Option<LabelValue>,
    pub reason: Option<String>,
}

impl ModelReply {
    /// Canonical assistant string for a parseable reply: `"Yes"`, `"No"`,
    /// or `"No. {reason}"`.
    pub fn canonical_text(&self) -> Option<String> {
        match self.parsed? {
            LabelValue::Yes => Some("Yes".to_string()),
            LabelValue::No => Some(match &self.reason {
                Some(reason) => format!("No. {reason}"),
                None => "No".to_string(),
            }),
        }
    }
}

/// Normalize a raw reply string.
pub fn parse_reply(raw: &str) -> ModelReply {
    let trimmed = raw.trim();
    let stripped = trimmed.trim_end_matches(['.', ',', ';', ':', '!', '?']);
    let mut split_at = 0;
    for (index, c) in stripped.char_indices() {
        if c.is_alphabetic() {
            split_at = index + c.len_utf8();
        } else {
            break;
        }
    }
    let (first_word, rest) = stripped.split_at(split_at);
    let (parsed, reason) = match first_word.to_ascii_lowercase().as_str() {
        "yes" => (Some(LabelValue::Yes), None),
        "no" => {
            let reason = rest
                .trim_start_matches(['.', ',', ';', ':', '!', '?', '-', ' ', '\t', '\n'])
                .trim();
            (
                Some(LabelValue::No),
                (!reason.is_empty()).then(|| reason.to_string()),
            )
        }
        _ => (None, None),
    };
    ModelReply {
        raw_text: raw.to_string(),
        parsed,
        reason,
    }
}

/// Abstract chat + fine-tune service. Implemented by the HTTP client and
/// by the offline replay stub.
pub trait ChatService: Sync {
    /// Upload training data; returns the service's file reference.
    fn upload_training_file(&self, content: &str, filename: &str) -> Result<String, LlmError>;
    /// Create a fine-tune job from an uploaded file.
    fn create_finetune_job(
        &self,
        training_file_ref: &str,
        base_model_id: &str,
    ) -> Result<FineTuneJob, LlmError>;
    /// Current status of a job.
    fn poll_job(&self, job_id: &str) -> Result<JobStatus, LlmError>;
    /// One chat completion; returns the raw assistant text.
    fn chat(&self, model_id: &str, system: &str, user: &str) -> Result<String, LlmError>;
}

/// Validate a fine-tune export: every line must be a chat example whose
/// system text equals the canonical prompt and whose assistant string
/// normalizes back to a label. Returns the example count.
pub fn validate_export<R: BufRead>(reader: R) -> Result<usize, LlmError> {
    let mut count = 0usize;
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let fail = |reason: String| LlmError::InvalidTrainingFile {
            line: line_no,
            reason,
        };
        let line = line.map_err(|e| fail(e.to_string()))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if serde_json::from_str::<serde_json::Value>(text)
            .ok()
            .as_ref()
            .and_then(|v| v.as_object())
            .is_some_and(|o| o.contains_key("_meta"))
        {
            continue;
        }
        let example: ChatExample = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
        if example.system != SYSTEM_PROMPT {
            return Err(fail(
                "system prompt does not match the canonical text".into(),
            ));
        }
        if parse_reply(&example.assistant).parsed.is_none() {
            return Err(fail(format!(
                "assistant text {:?} does not normalize to a label",
                example.assistant
            )));
        }
        count += 1;
    }
    Ok(count)
}

/// Validate an export file locally, then upload it and create a fine-tune
/// job. Nothing is uploaded when validation fails.
pub fn submit_finetune(
    export_path: &Path,
    base_model_id: &str,
    service: &dyn ChatService,
) -> Result<FineTuneJob, LlmError> {
    let content = std::fs::read_to_string(export_path)?;
    validate_export(content.as_bytes())?;
    let filename = export_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "training.jsonl".to_string());
    let file_ref = service.upload_training_file(&content, &filename)?;
    service.create_finetune_job(&file_ref, base_model_id)
}

/// Poll a job until it reaches a terminal status, enforcing monotone
/// transitions.
pub fn wait_for_completion(
    job: &mut FineTuneJob,
    service: &dyn ChatService,
    poll_interval: Duration,
    max_polls: usize,
) -> Result<JobStatus, LlmError> {
    for _ in 0..max_polls {
        if job.status.is_terminal() {
            return Ok(job.status.clone());
        }
        std::thread::sleep(poll_interval);
        let status = service.poll_job(&job.job_id)?;
        job.advance_to(status)?;
    }
    if job.status.is_terminal() {
        Ok(job.status.clone())
    } else {
        Err(LlmError::ServiceUnavailable(format!(
            "job {} not terminal after {max_polls} polls",
            job.job_id
        )))
    }
}

/// Ask the model whether one trial transitions. Unparseable replies are
/// data (`parsed: None`), not errors.
pub fn predict_transition(
    model_id: &str,
    description: &TrialDescription,
    service: &dyn ChatService,
) -> Result<ModelReply, LlmError> {
    let raw = service.chat(model_id, SYSTEM_PROMPT, &description.text)?;
    Ok(parse_reply(&raw))
}

/// Batch prediction with bounded parallelism. Replies come back in input
/// order; the first service error aborts the batch.
pub fn predict_batch(
    model_id: &str,
    descriptions: &[TrialDescription],
    service: &dyn ChatService,
    max_parallel: usize,
) -> Result<Vec<ModelReply>, LlmError> {
    let slots: Vec<Mutex<Option<ModelReply>>> =
        descriptions.iter().map(|_| Mutex::new(None)).collect();
    let failure: Mutex<Option<LlmError>> = Mutex::new(None);
    let cursor = AtomicUsize::new(0);
    let workers = max_parallel.max(1).min(descriptions.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                if index >= descriptions.len() || failure.lock().unwrap().is_some() {
                    return;
                }
                match predict_transition(model_id, &descriptions[index], service) {
                    Ok(reply) => *slots[index].lock().unwrap() = Some(reply),
                    Err(e) => *failure.lock().unwrap() = Some(e),
                }
            });
        }
    });
    if let Some(error) = failure.into_inner().unwrap() {
        return Err(error);
    }
    Ok(slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("slot filled"))
        .collect())
}

/// Build chat examples for a list of (description, label) pairs.
pub fn build_export(entries: &[(TrialDescription, Label)], reasoning: bool) -> Vec<ChatExample> {
    entries
        .iter()
        .map(|(description, label)| build_chat_example(description, label, reasoning))
        .collect()
}

/// Reasoning-mode export for a labeled corpus: `No` labels that carry a
/// termination reason train the model to answer `"No. {reason}"`; all
/// `Yes` labels stay plain.
pub fn build_reasoning_export(corpus: &LabeledCorpus, char_budget: usize) -> Vec<ChatExample> {
    corpus
        .entries
        .iter()
        .map(|entry| {
            let description = synthesize_description(&entry.trial, char_budget);
            build_chat_example(&description, &entry.label, true)
        })
        .collect()
}

/// Serialize chat examples as line-delimited JSON.
pub fn write_export<W: Write>(mut writer: W, examples: &[ChatExample]) -> Result<(), LlmError> {
    for example in examples {
        serde_json::to_writer(&mut writer, example)
            .map_err(|e| LlmError::Protocol(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// One recorded request/response pair for the replay stub.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayFixture {
    pub request: String,
    pub response: String,
}

/// Offline stand-in for the chat service. Serves recorded request ->
/// response pairs keyed on the user message; fine-tune jobs succeed
/// immediately with a stub model id.
pub struct ReplayStub {
    replies: HashMap<String, String>,
    model_id: String,
}

/// Model id reported by [`ReplayStub`] fine-tune jobs.
pub const STUB_MODEL_ID: &str = "stub-model";

impl ReplayStub {
    pub fn new(fixtures: impl IntoIterator<Item = (String, String)>) -> Self {
        ReplayStub {
            replies: fixtures.into_iter().collect(),
            model_id: STUB_MODEL_ID.to_string(),
        }
    }

    /// Load line-delimited request/response fixtures.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, LlmError> {
        let mut replies = HashMap::new();
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if serde_json::from_str::<serde_json::Value>(text)
                .ok()
                .as_ref()
                .and_then(|v| v.as_object())
                .is_some_and(|o| o.contains_key("_meta"))
            {
                continue;
            }
            let fixture: ReplayFixture =
                serde_json::from_str(text).map_err(|e| LlmError::InvalidTrainingFile {
                    line: index + 1,
                    reason: e.to_string(),
                })?;
            replies.insert(fixture.request, fixture.response);
        }
        Ok(ReplayStub {
            replies,
            model_id: STUB_MODEL_ID.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl ChatService for ReplayStub {
    fn upload_training_file(&self, _content: &str, filename: &str) -> Result<String, LlmError> {
        Ok(format!("stub-file-{filename}"))
    }

    fn create_finetune_job(
        &self,
        training_file_ref: &str,
        base_model_id: &str,
    ) -> Result<FineTuneJob, LlmError> {
        Ok(FineTuneJob {
            base_model_id: base_model_id.to_string(),
            training_file_ref: Some(training_file_ref.to_string()),
            job_id: "stub-job".to_string(),
            status: JobStatus::Succeeded(self.model_id.clone()),
        })
    }

    fn poll_job(&self, _job_id: &str) -> Result<JobStatus, LlmError> {
        Ok(JobStatus::Succeeded(self.model_id.clone()))
    }

    fn chat(&self, _model_id: &str, _system: &str, user: &str) -> Result<String, LlmError> {
        self.replies
            .get(user)
            .cloned()
            .ok_or_else(|| LlmError::NotRecorded(truncate_for_error(user)))
    }
}

fn truncate_for_error(text: &str) -> String {
    const LIMIT: usize = 80;
    if text.chars().count() <= LIMIT {
        text.to_string()
    } else {
        let head: String = text.chars().take(LIMIT).collect();
        format!("{head}…")
    }
}

/// Connection settings for the HTTP chat service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub base_url: String,
    pub base_model_id: String,
    pub max_parallel: usize,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            base_url: "http://localhost:8080/v1".to_string(),
            base_model_id: "base-chat-model".to_string(),
            max_parallel: 4,
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

/// HTTP implementation of [`ChatService`]. Requires the API key in the
/// environment; retries transient failures with exponential backoff.
pub struct HttpChatService {
    config: ServiceConfig,
    agent: ureq::Agent,
    api_key: String,
}

impl HttpChatService {
    pub fn new(config: ServiceConfig) -> Result<Self, LlmError> {
        let api_key =
            std::env::var(API_KEY_ENV).map_err(|_| LlmError::AuthMissing(API_KEY_ENV.into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        Ok(HttpChatService {
            config,
            agent,
            api_key,
        })
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, String>) -> Result<T, LlmError> {
        let mut attempt = 0u32;
        loop {
            match call() {
                Ok(value) => return Ok(value),
                Err(cause) => {
                    attempt += 1;
                    if attempt > self.config.max_retries {
                        return Err(LlmError::ServiceUnavailable(cause));
                    }
                    let backoff = self
                        .config
                        .backoff_ms
                        .saturating_mul(1 << (attempt - 1).min(8));
                    std::thread::sleep(Duration::from_millis(backoff));
                }
            }
        }
    }

    fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, LlmError> {
        let url = format!("{}{}", self.config.base_url, path);
        self.with_retries(|| {
            self.agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body)
                .map_err(|e| e.to_string())
                .and_then(|mut response| {
                    response
                        .body_mut()
                        .read_json::<T>()
                        .map_err(|e| e.to_string())
                })
        })
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, LlmError> {
        let url = format!("{}{}", self.config.base_url, path);
        self.with_retries(|| {
            self.agent
                .get(&url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .call()
                .map_err(|e| e.to_string())
                .and_then(|mut response| {
                    response
                        .body_mut()
                        .read_json::<T>()
                        .map_err(|e| e.to_string())
                })
        })
    }
}

#[derive(Deserialize)]
struct JobWire {
    id: String,
    status: String,
    #[serde(default)]
    fine_tuned_model: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

fn job_status_from_wire(wire: &JobWire) -> Result<JobStatus, LlmError> {
    match wire.status.as_str() {
        "pending" => Ok(JobStatus::Pending),
        "running" => Ok(JobStatus::Running),
        "succeeded" => match wire.fine_tuned_model.as_deref() {
            Some(model) if !model.is_empty() => Ok(JobStatus::Succeeded(model.to_string())),
            _ => Err(LlmError::Protocol(
                "succeeded job without fine_tuned_model".to_string(),
            )),
        },
        "failed" => Ok(JobStatus::Failed(
            wire.error.clone().unwrap_or_else(|| "unknown".to_string()),
        )),
        other => Err(LlmError::Protocol(format!("unknown job status {other:?}"))),
    }
}

impl ChatService for HttpChatService {
    fn upload_training_file(&self, content: &str, filename: &str) -> Result<String, LlmError> {
        #[derive(Deserialize)]
        struct FileWire {
            id: String,
        }
        let body = serde_json::json!({ "filename": filename, "content": content });
        let wire: FileWire = self.post_json("/files", &body)?;
        Ok(wire.id)
    }

    fn create_finetune_job(
        &self,
        training_file_ref: &str,
        base_model_id: &str,
    ) -> Result<FineTuneJob, LlmError> {
        let body = serde_json::json!({
            "training_file": training_file_ref,
            "model": base_model_id,
        });
        let wire: JobWire = self.post_json("/fine_tuning/jobs", &body)?;
        let status = job_status_from_wire(&wire)?;
        Ok(FineTuneJob {
            base_model_id: base_model_id.to_string(),
            training_file_ref: Some(training_file_ref.to_string()),
            job_id: wire.id,
            status,
        })
    }

    fn poll_job(&self, job_id: &str) -> Result<JobStatus, LlmError> {
        let wire: JobWire = self.get_json(&format!("/fine_tuning/jobs/{job_id}"))?;
        job_status_from_wire(&wire)
    }

    fn chat(&self, model_id: &str, system: &str, user: &str) -> Result<String, LlmError> {
        #[derive(Deserialize)]
        struct Choice {
            message: MessageWire,
        }
        #[derive(Deserialize)]
        struct MessageWire {
            content: String,
        }
        #[derive(Deserialize)]
        struct ChatWire {
            choices: Vec<Choice>,
        }
        let body = serde_json::json!({
            "model": model_id,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": user },
            ],
        });
        let wire: ChatWire = self.post_json("/chat/completions", &body)?;
        wire.choices
            .into_iter()
            .next()
            .map(|choice| choice.message.content)
            .ok_or_else(|| LlmError::Protocol("empty choices in chat response".to_string()))
    }
}
