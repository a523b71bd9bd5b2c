//! JSON-over-HTTP API under `/v1`. Request and response bodies are described
//! in `API.md` next to this crate's manifest.

pub mod config;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use policyqa_core::corpus::{parse_structured_document, CorpusError};
use policyqa_core::probe::{run_probe, ProbeError, ProbeReport, ProbeSpec};
use policyqa_core::promptkit::{flatten_passage, PassageOrder};
use policyqa_core::qa::{DocumentSummary, Engine, QaError, QueryOptions, QueryResult, Stage, StageError};
use policyqa_core::segmenter::Passage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use config::{open_engine, BackendKind, EmbedderKind, ServiceConfig, SetupError};

const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    defaults: QueryOptions,
    index_path: Option<PathBuf>,
    save_lock: Arc<Mutex<()>>,
}

/// Builds the `/v1` router around an engine.
pub fn router(engine: Arc<Engine>, config: &ServiceConfig) -> Router {
    let state = AppState {
        engine,
        defaults: config.default_options.clone(),
        index_path: config.index_path.clone(),
        save_lock: Arc::default(),
    };
    let api = Router::new()
        .route("/documents", post(ingest_document).get(list_documents))
        .route("/query", post(query))
        .route("/passages/{id}", get(get_passage))
        .route("/probes", post(probe))
        .route("/health", get(health))
        .with_state(state);
    let app = Router::new()
        .nest("/v1", api)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES));
    match cors_layer(&config.cors_origins) {
        Some(cors) => app.layer(cors),
        None => app,
    }
}

fn cors_layer(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([axum::http::header::CONTENT_TYPE]),
    )
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    stage: Option<Stage>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            stage: None,
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message, "stage": self.stage}});
        (self.status, Json(body)).into_response()
    }
}

impl From<QaError> for ApiError {
    fn from(e: QaError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            QaError::EmptyQuestion => (StatusCode::BAD_REQUEST, "empty_question"),
            QaError::InvalidOptions(_) => (StatusCode::BAD_REQUEST, "invalid_options"),
            QaError::EmptySelection => (StatusCode::UNPROCESSABLE_ENTITY, "empty_selection"),
            QaError::EmptyCorpus => (StatusCode::UNPROCESSABLE_ENTITY, "empty_corpus"),
            QaError::DuplicateDocument(_) => (StatusCode::CONFLICT, "duplicate_document"),
            QaError::Stage { stage, source } => match (stage, source) {
                (Stage::Embed | Stage::Complete, _) => (StatusCode::BAD_GATEWAY, "backend_failure"),
                (Stage::Segment, _) => (StatusCode::BAD_REQUEST, "unsegmentable_document"),
                (Stage::Assemble, StageError::Prompt(_)) => (StatusCode::BAD_REQUEST, "prompt_rejected"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
        };
        Self {
            status,
            code,
            message,
            stage: e.stage(),
        }
    }
}

impl From<ProbeError> for ApiError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Invalid(_) | ProbeError::Parse { .. } => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_probe", e.to_string())
            }
            ProbeError::Variant { label, source } => {
                let mut err = ApiError::from(source);
                err.message = format!("variant {label}: {}", err.message);
                err
            }
            ProbeError::Io { .. } => Self::internal(e.to_string()),
        }
    }
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string()))
}

/// Runs blocking engine work off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct IngestResponse {
    pub document_id: String,
    pub passage_count: usize,
}

async fn ingest_document(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<IngestResponse>), ApiError> {
    let raw = std::str::from_utf8(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_document", e.to_string()))?;
    // No fallback id: documents posted to the API must carry their own.
    let doc = parse_structured_document(raw, "").map_err(|e| match e {
        CorpusError::EmptyDocument(_) => ApiError::new(StatusCode::BAD_REQUEST, "empty_document", e.to_string()),
        _ => ApiError::new(StatusCode::BAD_REQUEST, "malformed_document", e.to_string()),
    })?;
    let summary = blocking(move || {
        let summary = state.engine.ingest(doc)?;
        if let Some(path) = &state.index_path {
            let _guard = state.save_lock.lock().unwrap_or_else(|e| e.into_inner());
            state.engine.save(path)?;
        }
        Ok(summary)
    })
    .await?;
    tracing::info!(document = %summary.document_id, passages = summary.passage_count, "ingested");
    Ok((
        StatusCode::CREATED,
        Json(IngestResponse {
            document_id: summary.document_id,
            passage_count: summary.passage_count,
        }),
    ))
}

async fn list_documents(State(state): State<AppState>) -> Json<Vec<DocumentSummary>> {
    Json(state.engine.documents())
}

/// Body of `POST /v1/query`. Omitted fields take the service defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub allowed_documents: Option<BTreeSet<String>>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub passage_order: Option<PassageOrder>,
    #[serde(default)]
    pub passage_budget: Option<usize>,
}

impl QueryRequest {
    pub fn options(&self, defaults: &QueryOptions) -> QueryOptions {
        let mut options = defaults.clone();
        if let Some(allowed) = &self.allowed_documents {
            options.allowed_documents = Some(allowed.clone());
        }
        if let Some(t) = self.temperature {
            options.temperature = t;
        }
        if let Some(k) = self.top_k {
            options.top_k = k;
        }
        if let Some(order) = self.passage_order {
            options.passage_order = order;
        }
        if let Some(b) = self.passage_budget {
            options.budget.passage_budget = b;
        }
        options
    }
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Json<QueryResult>, ApiError> {
    let request: QueryRequest = parse_json(&body)?;
    let options = request.options(&state.defaults);
    let result = blocking(move || Ok(state.engine.answer_question(&request.question, &options)?)).await?;
    Ok(Json(result))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PassageResponse {
    #[serde(flatten)]
    pub passage: Passage,
    pub flattened_text: String,
}

async fn get_passage(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<PassageResponse>, ApiError> {
    let passage = state
        .engine
        .passage(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_passage", format!("no passage {id}")))?;
    Ok(Json(PassageResponse {
        flattened_text: flatten_passage(&passage),
        passage,
    }))
}

async fn probe(State(state): State<AppState>, body: Bytes) -> Result<Json<ProbeReport>, ApiError> {
    let spec: ProbeSpec =
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_probe", e.to_string()))?;
    spec.validate()?;
    let report = blocking(move || Ok(run_probe(&state.engine, &spec)?)).await?;
    Ok(Json(report))
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Health {
    pub status: String,
    /// Number of ingested documents.
    pub corpus_size: usize,
    pub passage_count: usize,
    pub backend: String,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        corpus_size: state.engine.documents().len(),
        passage_count: state.engine.passage_count(),
        backend: state.engine.backend_name().to_string(),
    })
}
