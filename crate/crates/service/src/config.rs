//! Service settings and engine bootstrap, shared with the CLI.

use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use policyqa_core::corpus::{collect_document_paths, read_document_file, CorpusError};
use policyqa_core::embeddings::{EmbedError, EmbeddingProvider, HashEmbedder, RemoteEmbedConfig, RemoteEmbedder};
use policyqa_core::llmclient::{ChatBackend, RemoteChatBackend, RemoteChatConfig, ScriptError, ScriptedMock};
use policyqa_core::qa::{Engine, QaError, QueryOptions};
use thiserror::Error;

pub const LLM_URL_VAR: &str = "POLICYQA_LLM_URL";
pub const EMBED_URL_VAR: &str = "POLICYQA_EMBED_URL";
pub const EMBED_MODEL_VAR: &str = "POLICYQA_EMBED_MODEL";
pub const EMBED_DIM_VAR: &str = "POLICYQA_EMBED_DIM";

const DEFAULT_LLM_URL: &str = "https://api.openai.com/v1/chat/completions";
const DEFAULT_EMBED_URL: &str = "https://api.openai.com/v1/embeddings";
const DEFAULT_EMBED_MODEL: &str = "text-embedding-ada-002";
const DEFAULT_EMBED_DIM: usize = 1536;

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("unknown {kind} {value:?}")]
    UnknownKind { kind: &'static str, value: String },
    #[error("mock script: {0}")]
    Script(#[from] ScriptError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{context}: {source}")]
    Engine {
        context: String,
        #[source]
        source: QaError,
    },
    #[error("invalid setting {name}: {message}")]
    Setting { name: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

impl FromStr for BackendKind {
    type Err = SetupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "remote" => Ok(Self::Remote),
            _ => Err(SetupError::UnknownKind {
                kind: "backend",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mock => "mock",
            Self::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

impl FromStr for EmbedderKind {
    type Err = SetupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hash" => Ok(Self::Hash),
            "remote" => Ok(Self::Remote),
            _ => Err(SetupError::UnknownKind {
                kind: "embedder",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hash => "hash",
            Self::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Documents (files or directories) ingested at startup.
    pub corpus_paths: Vec<PathBuf>,
    /// Loaded at startup when it exists; rewritten after each ingest.
    pub index_path: Option<PathBuf>,
    pub backend: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub default_options: QueryOptions,
    /// Origins allowed to call the API from a browser. Empty disables CORS.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            corpus_paths: Vec::new(),
            index_path: None,
            backend: BackendKind::Mock,
            mock_script: None,
            embedder: EmbedderKind::Hash,
            default_options: QueryOptions::default(),
            cors_origins: Vec::new(),
        }
    }
}

pub fn make_backend(kind: BackendKind, mock_script: Option<&std::path::Path>) -> Result<Arc<dyn ChatBackend>, SetupError> {
    match kind {
        BackendKind::Mock => {
            let mock = match mock_script {
                None => ScriptedMock::default(),
                Some(path) => {
                    let raw = std::fs::read_to_string(path).map_err(|e| SetupError::Io {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                    ScriptedMock::parse_script(&raw)?
                }
            };
            Ok(Arc::new(mock))
        }
        BackendKind::Remote => {
            let url = std::env::var(LLM_URL_VAR).unwrap_or_else(|_| DEFAULT_LLM_URL.into());
            Ok(Arc::new(RemoteChatBackend::new(RemoteChatConfig::new(url).from_env())))
        }
    }
}

pub fn make_embedder(kind: EmbedderKind) -> Result<Arc<dyn EmbeddingProvider>, SetupError> {
    match kind {
        EmbedderKind::Hash => Ok(Arc::new(HashEmbedder::default())),
        EmbedderKind::Remote => {
            let url = std::env::var(EMBED_URL_VAR).unwrap_or_else(|_| DEFAULT_EMBED_URL.into());
            let model = std::env::var(EMBED_MODEL_VAR).unwrap_or_else(|_| DEFAULT_EMBED_MODEL.into());
            let dim = match std::env::var(EMBED_DIM_VAR) {
                Ok(v) => v.parse().map_err(|_| SetupError::Setting {
                    name: EMBED_DIM_VAR,
                    message: format!("{v:?} is not a dimension"),
                })?,
                Err(_) => DEFAULT_EMBED_DIM,
            };
            Ok(Arc::new(RemoteEmbedder::new(RemoteEmbedConfig::new(url, model, dim).from_env())?))
        }
    }
}

/// Builds the engine: restores `index_path` if the file exists, then ingests
/// any corpus documents not already present.
pub fn open_engine(config: &ServiceConfig) -> Result<Engine, SetupError> {
    let embedder = make_embedder(config.embedder)?;
    let backend = make_backend(config.backend, config.mock_script.as_deref())?;
    let engine = match &config.index_path {
        Some(path) if path.exists() => Engine::load(path, embedder, backend).map_err(|source| SetupError::Engine {
            context: format!("loading {}", path.display()),
            source,
        })?,
        _ => Engine::new(embedder, backend),
    };
    let mut added = false;
    for path in collect_document_paths(&config.corpus_paths)? {
        let doc = read_document_file(&path)?;
        if engine.has_document(&doc.id) {
            continue;
        }
        engine.ingest(doc).map_err(|source| SetupError::Engine {
            context: format!("ingesting {}", path.display()),
            source,
        })?;
        added = true;
    }
    if let (true, Some(path)) = (added, &config.index_path) {
        engine.save(path).map_err(|source| SetupError::Engine {
            context: format!("saving {}", path.display()),
            source,
        })?;
    }
    Ok(engine)
}
