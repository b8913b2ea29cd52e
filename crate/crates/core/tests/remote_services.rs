//! HTTP-level tests for the remote encoder client and the chat service
//! client, served by an in-process stub. No external network access.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ctp_core::corpus::TrialDescription;
use ctp_core::embed::{embed_attribute, EmbedError, EncoderProvider, RemoteEncoder};
use ctp_core::linkage::{Label, LabelRule, LabelValue};
use ctp_core::llmgate::{
    build_export, predict_transition, submit_finetune, wait_for_completion, write_export,
    HttpChatService, JobStatus, LlmError, ServiceConfig, API_KEY_ENV,
};

fn encoder(base_url: &str, dim: usize) -> RemoteEncoder {
    RemoteEncoder {
        backoff_ms: 1,
        max_retries: 3,
        ..RemoteEncoder::new(format!("{base_url}/embed"), "test-encoder", dim)
    }
}

/// Deterministic fake embedding: [len, len, ...] for each text.
fn embedding_body(body: &str, dim: usize) -> String {
    let request: serde_json::Value = serde_json::from_str(body).unwrap();
    let vectors: Vec<Vec<f64>> = request["texts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| vec![t.as_str().unwrap().len() as f64; dim])
        .collect();
    serde_json::json!({ "vectors": vectors }).to_string()
}

#[test]
fn remote_encoder_round_trip_and_batching() {
    let server = common::serve(|request| {
        assert_eq!(request.method, "POST");
        assert_eq!(request.path, "/embed");
        (200, embedding_body(&request.body, 4))
    });
    let provider = EncoderProvider::Remote(RemoteEncoder {
        batch_size: 2,
        max_parallel: 3,
        ..encoder(&server.base_url, 4)
    });
    let texts: Vec<String> = (0..7).map(|i| "x".repeat(i + 1)).collect();
    let vectors = provider.embed_texts(&texts).unwrap();
    assert_eq!(vectors.len(), 7);
    for (i, vector) in vectors.iter().enumerate() {
        assert_eq!(vector, &vec![(i + 1) as f64; 4]);
    }
    // Empty text short-circuits to a zero vector.
    assert_eq!(
        embed_attribute("", &provider).unwrap(),
        vec![0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn remote_encoder_retries_transient_failures() {
    let failures = Arc::new(AtomicUsize::new(0));
    let counter = failures.clone();
    let server = common::serve(move |request| {
        if counter.fetch_add(1, Ordering::SeqCst) < 2 {
            (503, "{\"error\":\"busy\"}".to_string())
        } else {
            (200, embedding_body(&request.body, 3))
        }
    });
    let provider = EncoderProvider::Remote(encoder(&server.base_url, 3));
    let vectors = provider.embed_texts(&["abc".to_string()]).unwrap();
    assert_eq!(vectors, vec![vec![3.0, 3.0, 3.0]]);
    assert!(failures.load(Ordering::SeqCst) >= 3);
}

#[test]
fn remote_encoder_gives_up_after_bounded_retries() {
    let server = common::serve(|_| (500, "{\"error\":\"down\"}".to_string()));
    let provider = EncoderProvider::Remote(RemoteEncoder {
        max_retries: 1,
        ..encoder(&server.base_url, 3)
    });
    match provider.embed_texts(&["abc".to_string()]) {
        Err(EmbedError::RemoteUnavailable { endpoint, .. }) => {
            assert!(endpoint.contains("/embed"));
        }
        other => panic!("expected RemoteUnavailable, got {other:?}"),
    }
}

#[test]
fn remote_encoder_rejects_wrong_dimensions() {
    let server = common::serve(|request| (200, embedding_body(&request.body, 5)));
    let provider = EncoderProvider::Remote(encoder(&server.base_url, 3));
    match provider.embed_texts(&["abc".to_string()]) {
        Err(EmbedError::DimensionMismatch { expected, actual }) => {
            assert_eq!((expected, actual), (3, 5));
        }
        other => panic!("expected DimensionMismatch, got {other:?}"),
    }
}

/// The API key lives in process-global environment; tests that touch it
/// serialize on this lock.
static ENV_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn service_config(base_url: &str) -> ServiceConfig {
    ServiceConfig {
        base_url: base_url.to_string(),
        backoff_ms: 1,
        ..ServiceConfig::default()
    }
}

fn sample_export(count: usize) -> Vec<u8> {
    let entries: Vec<(TrialDescription, Label)> = (0..count)
        .map(|i| {
            (
                TrialDescription {
                    text: format!("TRIAL NAME: Study {i}"),
                    source_nct_id: format!("NCT{i:04}"),
                    char_count: 0,
                },
                Label {
                    value: if i % 2 == 0 {
                        LabelValue::Yes
                    } else {
                        LabelValue::No
                    },
                    rule: LabelRule::Rule1Succeeded,
                    reason: None,
                },
            )
        })
        .collect();
    let mut file = Vec::new();
    write_export(&mut file, &build_export(&entries, false)).unwrap();
    file
}

#[test]
fn finetune_lifecycle_against_recorded_service() {
    let _guard = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    std::env::set_var(API_KEY_ENV, "test-key");

    let polls = Arc::new(AtomicUsize::new(0));
    let poll_counter = polls.clone();
    let server = common::serve(move |request| {
        assert_eq!(request.header("authorization"), Some("Bearer test-key"));
        match (request.method.as_str(), request.path.as_str()) {
            ("POST", "/files") => {
                let body: serde_json::Value = serde_json::from_str(&request.body).unwrap();
                assert!(body["content"].as_str().unwrap().contains("Study 0"));
                (200, serde_json::json!({ "id": "file-77" }).to_string())
            }
            ("POST", "/fine_tuning/jobs") => {
                let body: serde_json::Value = serde_json::from_str(&request.body).unwrap();
                assert_eq!(body["training_file"], "file-77");
                assert_eq!(body["model"], "base-chat");
                (
                    200,
                    serde_json::json!({ "id": "job-9", "status": "pending" }).to_string(),
                )
            }
            ("GET", "/fine_tuning/jobs/job-9") => {
                let status = match poll_counter.fetch_add(1, Ordering::SeqCst) {
                    0 => serde_json::json!({ "id": "job-9", "status": "running" }),
                    _ => serde_json::json!({
                        "id": "job-9",
                        "status": "succeeded",
                        "fine_tuned_model": "ft-recorded-model",
                    }),
                };
                (200, status.to_string())
            }
            ("POST", "/chat/completions") => {
                let body: serde_json::Value = serde_json::from_str(&request.body).unwrap();
                assert_eq!(body["model"], "ft-recorded-model");
                assert_eq!(body["messages"][0]["role"], "system");
                (
                    200,
                    serde_json::json!({
                        "choices": [
                            { "message": { "role": "assistant", "content": "No. Strategic" } }
                        ]
                    })
                    .to_string(),
                )
            }
            _ => (404, "{}".to_string()),
        }
    });

    let dir = tempfile::tempdir().unwrap();
    let export_path = dir.path().join("train.jsonl");
    std::fs::write(&export_path, sample_export(10)).unwrap();

    let service = HttpChatService::new(service_config(&server.base_url)).unwrap();
    let mut job = submit_finetune(&export_path, "base-chat", &service).unwrap();
    assert_eq!(job.status, JobStatus::Pending);
    let status =
        wait_for_completion(&mut job, &service, std::time::Duration::from_millis(1), 10).unwrap();
    assert_eq!(
        status,
        JobStatus::Succeeded("ft-recorded-model".to_string())
    );

    let description = TrialDescription {
        text: "TRIAL NAME: Study 3".to_string(),
        source_nct_id: "NCT0003".to_string(),
        char_count: 19,
    };
    let reply = predict_transition("ft-recorded-model", &description, &service).unwrap();
    assert_eq!(reply.parsed, Some(LabelValue::No));
    assert_eq!(reply.reason.as_deref(), Some("Strategic"));
}

#[test]
fn chat_service_requires_the_api_key() {
    let _guard = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let previous = std::env::var(API_KEY_ENV).ok();
    std::env::remove_var(API_KEY_ENV);
    let result = HttpChatService::new(service_config("http://127.0.0.1:1"));
    if let Some(value) = previous {
        std::env::set_var(API_KEY_ENV, value);
    }
    match result {
        Err(LlmError::AuthMissing(var)) => assert_eq!(var, API_KEY_ENV),
        other => panic!("expected AuthMissing, got {:?}", other.err()),
    }
}

#[test]
fn chat_service_surfaces_unavailability() {
    let _guard = ENV_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    std::env::set_var(API_KEY_ENV, "test-key");
    let server = common::serve(|_| (503, "{}".to_string()));
    let config = ServiceConfig {
        max_retries: 1,
        ..service_config(&server.base_url)
    };
    let service = HttpChatService::new(config).unwrap();
    let description = TrialDescription {
        text: "x".to_string(),
        source_nct_id: "NCT1".to_string(),
        char_count: 1,
    };
    assert!(matches!(
        predict_transition("m", &description, &service),
        Err(LlmError::ServiceUnavailable(_))
    ));
}
