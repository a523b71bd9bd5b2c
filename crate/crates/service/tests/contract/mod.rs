//! The `/v1` endpoint contract, run both as ordinary tests and by the
//! acceptance suite. Every check is an async fn that panics on violation.

#![allow(dead_code)]

use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use crate::common::*;
use http_body_util::BodyExt;
use policyqa_core::embeddings::{EmbedError, EmbeddingProvider, EmbeddingVector, HashEmbedder};
use policyqa_core::llmclient::{ChatBackend, CompletionRequest, CompletionResult, LlmError};
use policyqa_core::probe::ProbeSpec;
use policyqa_core::promptkit::flatten_passage;
use policyqa_core::qa::Engine;
use policyqa_service::{open_engine, router, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let response = app.clone().oneshot(req).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn app_with(engine: Engine) -> Router {
    router(Arc::new(engine), &ServiceConfig::default())
}

fn empty_app() -> Router {
    app_with(Engine::new(Arc::new(HashEmbedder::default()), Arc::new(fixture_mock())))
}

fn fixture_app() -> Router {
    app_with(fixture_engine())
}

fn fixture_body(id: &str) -> String {
    std::fs::read_to_string(fixture_path(&format!("corpus/{id}.json"))).unwrap()
}

fn golden_passage_count(id: &str) -> usize {
    let raw = std::fs::read_to_string(fixture_path(&format!("golden/passages/{id}.json"))).unwrap();
    serde_json::from_str::<Value>(&raw).unwrap()["passages"].as_array().unwrap().len()
}

fn probe_body(name: &str) -> String {
    let raw = std::fs::read_to_string(fixture_path(&format!("probes/{name}.probe"))).unwrap();
    serde_json::to_string(&ProbeSpec::parse(&raw).unwrap()).unwrap()
}

fn query_body(question: &str) -> String {
    json!({ "question": question }).to_string()
}

pub async fn ingest_reports_golden_passage_counts() {
    let app = empty_app();
    for doc in fixture_documents() {
        let (status, body) = call(&app, "POST", "/v1/documents", Some(fixture_body(&doc.id))).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        assert_eq!(body["document_id"], doc.id.as_str());
        assert_eq!(body["passage_count"], golden_passage_count(&doc.id));
    }
}

pub async fn ingest_errors() {
    let app = empty_app();
    let body = fixture_body("agreement-final");
    assert_eq!(call(&app, "POST", "/v1/documents", Some(body.clone())).await.0, StatusCode::CREATED);

    let (status, err) = call(&app, "POST", "/v1/documents", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "duplicate_document");

    let (status, err) = call(&app, "POST", "/v1/documents", Some("{\"title\": ".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "malformed_document");

    let no_id = json!({"title": "T", "sections": []}).to_string();
    assert_eq!(call(&app, "POST", "/v1/documents", Some(no_id)).await.0, StatusCode::BAD_REQUEST);
    let unknown_field = json!({"id": "x", "title": "T", "sections": [], "extra": 1}).to_string();
    assert_eq!(call(&app, "POST", "/v1/documents", Some(unknown_field)).await.0, StatusCode::BAD_REQUEST);

    // Nothing from the rejected bodies was indexed.
    let (_, docs) = call(&app, "GET", "/v1/documents", None).await;
    assert_eq!(docs.as_array().unwrap().len(), 1);
}

struct BrokenEmbedder;

impl EmbeddingProvider for BrokenEmbedder {
    fn name(&self) -> &str {
        "broken"
    }
    fn dim(&self) -> usize {
        8
    }
    fn embed_batch(&self, _: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Err(EmbedError::Transport("connection refused".into()))
    }
}

pub async fn embedding_failure_is_bad_gateway() {
    let app = app_with(Engine::new(Arc::new(BrokenEmbedder), Arc::new(fixture_mock())));
    let (status, err) = call(&app, "POST", "/v1/documents", Some(fixture_body("agreement-final"))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(err["error"]["stage"], "embed");
    let (_, docs) = call(&app, "GET", "/v1/documents", None).await;
    assert_eq!(docs, json!([]));
}

pub async fn documents_listed_in_ingestion_order() {
    let app = empty_app();
    assert_eq!(call(&app, "GET", "/v1/documents", None).await.1, json!([]));
    for id in ["refreshed-draft", "agreement-final"] {
        call(&app, "POST", "/v1/documents", Some(fixture_body(id))).await;
    }
    let (status, docs) = call(&app, "GET", "/v1/documents", None).await;
    assert_eq!(status, StatusCode::OK);
    let docs = docs.as_array().unwrap();
    assert_eq!(docs.len(), 2);
    assert_eq!(docs[0]["document_id"], "refreshed-draft");
    assert_eq!(docs[1]["document_id"], "agreement-final");
    let total: u64 = docs.iter().map(|d| d["passage_count"].as_u64().unwrap()).sum();
    let (_, health) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(health["passage_count"].as_u64().unwrap(), total);
}

pub async fn query_matches_oracle_and_golden() {
    let engine = fixture_engine();
    let expected = oracle_provenance(&engine.passages(), FIXTURE_QUESTION, None, 24, 3000);
    let app = app_with(engine);
    let (status, mut body) = call(&app, "POST", "/v1/query", Some(query_body(FIXTURE_QUESTION))).await;
    assert_eq!(status, StatusCode::OK, "{body}");

    let ids: Vec<&str> = body["included_passages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["passage_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, expected.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(body["answer"].as_str().unwrap().starts_with("Proposals are submitted"));
    let stats = &body["bundle_stats"];
    assert!(stats["passage_tokens_used"].as_u64() <= stats["passage_budget"].as_u64());
    assert!(stats["prompt_tokens"].as_u64().unwrap() + stats["answer_reserve"].as_u64().unwrap() <= stats["context_limit"].as_u64().unwrap());

    body.as_object_mut().unwrap().remove("timestamp");
    check_golden(
        &fixture_path("golden/query_response.json"),
        &(serde_json::to_string_pretty(&body).unwrap() + "\n"),
    );
}

pub async fn query_errors() {
    let app = fixture_app();
    let (status, err) = call(&app, "POST", "/v1/query", Some(query_body(""))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "empty_question");

    let empty_selection = json!({"question": "Anything?", "allowed_documents": []}).to_string();
    let (status, err) = call(&app, "POST", "/v1/query", Some(empty_selection)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "empty_selection");

    for bad in [
        "not json".to_string(),
        json!({"question": "q", "bogus": true}).to_string(),
        json!({"question": "q", "temperature": 9.0}).to_string(),
        json!({"question": "q", "top_k": 0}).to_string(),
    ] {
        assert_eq!(call(&app, "POST", "/v1/query", Some(bad)).await.0, StatusCode::BAD_REQUEST);
    }
}

struct Unreachable;

impl ChatBackend for Unreachable {
    fn name(&self) -> &str {
        "remote"
    }
    fn complete(&self, _: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        Err(LlmError::Transport("connection refused".into()))
    }
}

pub async fn backend_failure_names_the_stage() {
    let engine = Engine::new(Arc::new(HashEmbedder::default()), Arc::new(Unreachable));
    for doc in fixture_documents() {
        engine.ingest(doc).unwrap();
    }
    let app = app_with(engine);
    let (status, err) = call(&app, "POST", "/v1/query", Some(query_body(FIXTURE_QUESTION))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(err["error"]["code"], "backend_failure");
    assert_eq!(err["error"]["stage"], "complete");
}

pub async fn query_honours_selection_and_overrides() {
    let app = fixture_app();
    let body = json!({
        "question": FIXTURE_QUESTION,
        "allowed_documents": ["psids-proposals"],
        "top_k": 3,
        "temperature": 0.0,
        "passage_order": "document",
    })
    .to_string();
    let (status, result) = call(&app, "POST", "/v1/query", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let included = result["included_passages"].as_array().unwrap();
    assert!(!included.is_empty() && included.len() <= 3);
    assert!(included.iter().all(|p| p["document_id"] == "psids-proposals"));
    assert_eq!(result["bundle_stats"]["total_hits"], 3);
}

pub async fn passages_endpoint() {
    let engine = fixture_engine();
    let headed = engine.passages().into_iter().find(|p| p.heading_path.len() > 1).unwrap();
    let app = app_with(engine);

    let (status, body) = call(&app, "GET", &format!("/v1/passages/{}", headed.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["flattened_text"], flatten_passage(&headed).as_str());
    assert_eq!(body["text"], headed.text.as_str());
    assert!(body["flattened_text"].as_str().unwrap().contains(&headed.heading_path.join(" > ")));

    let (status, err) = call(&app, "GET", "/v1/passages/agreement-final:9999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "unknown_passage");
}

pub async fn probes_endpoint() {
    let app = fixture_app();
    let (status, report) = call(&app, "POST", "/v1/probes", Some(probe_body("identity-pair"))).await;
    assert_eq!(status, StatusCode::OK, "{report}");
    assert_eq!(report["pairs"][0]["retrieval_overlap"], 1.0);
    assert_eq!(report["pairs"][0]["answer_divergence"], 0.0);

    let (status, report) = call(&app, "POST", "/v1/probes", Some(probe_body("tone-variants"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["variants"].as_array().unwrap().len(), 2);

    let single = json!({"name": "solo", "variants": [{"label": "a", "question": "q"}]}).to_string();
    let (status, err) = call(&app, "POST", "/v1/probes", Some(single)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "invalid_probe");
    assert_eq!(call(&app, "POST", "/v1/probes", Some("[]".into())).await.0, StatusCode::BAD_REQUEST);
}

pub async fn health_endpoint() {
    let (status, health) = call(&empty_app(), "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["corpus_size"], 0);
    assert_eq!(health["backend"], "mock");

    let (_, health) = call(&fixture_app(), "GET", "/v1/health", None).await;
    assert_eq!(health["corpus_size"], fixture_documents().len());
    assert!(health["passage_count"].as_u64().unwrap() > 0);
}

fn strip_timestamps(mut v: Value) -> Value {
    match &mut v {
        Value::Object(map) => {
            map.remove("timestamp");
            for value in map.values_mut() {
                *value = strip_timestamps(value.take());
            }
        }
        Value::Array(items) => {
            for item in items.iter_mut() {
                *item = strip_timestamps(item.take());
            }
        }
        _ => {}
    }
    v
}

pub async fn identical_request_sequences_give_identical_responses() {
    let mut transcripts = Vec::new();
    for _ in 0..2 {
        let app = empty_app();
        let mut log = Vec::new();
        for doc in fixture_documents() {
            log.push(call(&app, "POST", "/v1/documents", Some(fixture_body(&doc.id))).await);
        }
        log.push(call(&app, "GET", "/v1/documents", None).await);
        log.push(call(&app, "POST", "/v1/query", Some(query_body(FIXTURE_QUESTION))).await);
        log.push(call(&app, "POST", "/v1/query", Some(query_body("Does it apply to warships?"))).await);
        log.push(call(&app, "POST", "/v1/probes", Some(probe_body("perspective-steering"))).await);
        log.push(call(&app, "GET", "/v1/health", None).await);
        transcripts.push(
            log.into_iter()
                .map(|(s, v)| (s, strip_timestamps(v)))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(transcripts[0], transcripts[1]);
}

pub async fn cors_allowlist() {
    let config = ServiceConfig {
        cors_origins: vec!["http://localhost:5173".into()],
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(fixture_engine()), &config);
    for (origin, allowed) in [("http://localhost:5173", true), ("http://evil.example", false)] {
        let req = Request::builder()
            .uri("/v1/health")
            .header("origin", origin)
            .body(Body::empty())
            .unwrap();
        let response = app.clone().oneshot(req).await.unwrap();
        let header = response.headers().get("access-control-allow-origin");
        assert_eq!(header.is_some(), allowed, "{origin}");
    }
}

pub async fn ingest_persists_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index.bin");
    let config = ServiceConfig {
        index_path: Some(index.clone()),
        ..ServiceConfig::default()
    };
    let app = router(Arc::new(open_engine(&config).unwrap()), &config);
    call(&app, "POST", "/v1/documents", Some(fixture_body("president-statement"))).await;
    assert!(index.exists());

    // A restart picks the document back up.
    let reopened = open_engine(&config).unwrap();
    assert!(reopened.has_document("president-statement"));
}

pub async fn open_engine_reads_a_corpus_directory() {
    let config = ServiceConfig {
        corpus_paths: vec![fixture_path("corpus")],
        mock_script: Some(fixture_path("mock/answers.script")),
        ..ServiceConfig::default()
    };
    let engine = open_engine(&config).unwrap();
    assert_eq!(engine.documents().len(), fixture_documents().len());
    assert_eq!(engine.passages(), fixture_engine().passages());
}

pub type Check = fn() -> Pin<Box<dyn Future<Output = ()> + Send>>;

macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        /// Every contract check, by name.
        pub const CHECKS: &[(&str, Check)] = &[$((stringify!($name), || Box::pin($name()))),*];
    };
}

checks!(
    ingest_reports_golden_passage_counts,
    ingest_errors,
    embedding_failure_is_bad_gateway,
    documents_listed_in_ingestion_order,
    query_matches_oracle_and_golden,
    query_errors,
    backend_failure_names_the_stage,
    query_honours_selection_and_overrides,
    passages_endpoint,
    probes_endpoint,
    health_endpoint,
    identical_request_sequences_give_identical_responses,
    cors_allowlist,
    ingest_persists_the_index,
    open_engine_reads_a_corpus_directory,
);
