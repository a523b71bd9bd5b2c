//! The question-answering engine: ingestion into a passage store and vector
//! index, then question -> embed -> search -> assemble -> complete.
//!
//! Ingestion takes the index write lock once per document, after segmenting
//! and embedding outside the lock, so a document becomes visible all at once.
//! Queries take a read snapshot for retrieval and release it before calling
//! the chat backend.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::embeddings::{EmbedError, EmbeddingProvider};
use crate::llmclient::{ChatBackend, CompletionRequest, FinishReason, LlmError, DEFAULT_MODEL, DEFAULT_TEMPERATURE};
use crate::promptkit::{PassageOrder, PromptAssembler, PromptBudget, PromptBundle, PromptError};
use crate::segmenter::{segment_document, Passage, SegmentError, SegmentationPolicy, TokenCounter, WordRatioCounter};
use crate::vectorindex::{IndexError, VectorIndex};

pub const DEFAULT_TOP_K: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Embed,
    Retrieve,
    Assemble,
    Complete,
    Persist,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Segment => "segment",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Assemble => "assemble",
            Stage::Complete => "complete",
            Stage::Persist => "persist",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum QaError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("the corpus has no indexed passages")]
    EmptyCorpus,
    #[error("the document selection is empty or names no known document")]
    EmptySelection,
    #[error("invalid query options: {0}")]
    InvalidOptions(String),
    #[error("document {0} is already ingested")]
    DuplicateDocument(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl QaError {
    fn at(stage: Stage, source: impl Into<StageError>) -> Self {
        QaError::Stage {
            stage,
            source: source.into(),
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            QaError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryOptions {
    /// `None` searches every document.
    pub allowed_documents: Option<BTreeSet<String>>,
    pub temperature: f64,
    pub top_k: usize,
    pub passage_order: PassageOrder,
    pub budget: PromptBudget,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            allowed_documents: None,
            temperature: DEFAULT_TEMPERATURE,
            top_k: DEFAULT_TOP_K,
            passage_order: PassageOrder::Relevance,
            budget: PromptBudget::default(),
        }
    }
}

impl QueryOptions {
    pub fn validate(&self) -> Result<(), QaError> {
        if self.top_k == 0 {
            return Err(QaError::InvalidOptions("top_k must be at least 1".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(QaError::InvalidOptions(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        self.budget
            .validate()
            .map_err(|e| QaError::InvalidOptions(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncludedPassage {
    pub passage_id: String,
    pub document_id: String,
    pub document_title: String,
    pub distance: f64,
    pub flattened_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleStats {
    pub passage_tokens_used: usize,
    pub prompt_tokens: usize,
    pub total_hits: usize,
    pub skipped_count: usize,
    pub no_passages_fit: bool,
    pub passage_budget: usize,
    pub context_limit: usize,
    pub answer_reserve: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub question: String,
    pub answer: String,
    pub finish_reason: FinishReason,
    pub included_passages: Vec<IncludedPassage>,
    pub bundle_stats: BundleStats,
    pub backend: String,
    pub timestamp: DateTime<Utc>,
}

impl QueryResult {
    pub fn passage_ids(&self) -> Vec<&str> {
        self.included_passages.iter().map(|p| p.passage_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub document_id: String,
    pub title: String,
    pub passage_count: usize,
}

#[derive(Debug, Clone)]
struct DocumentRecord {
    document: Document,
    passage_ids: Vec<String>,
}

#[derive(Debug)]
struct CorpusState {
    documents: Vec<DocumentRecord>,
    passages: HashMap<String, Passage>,
    index: VectorIndex,
}

pub struct Engine {
    embedder: Arc<dyn EmbeddingProvider>,
    backend: Arc<dyn ChatBackend>,
    counter: Arc<dyn TokenCounter>,
    assembler: PromptAssembler,
    policy: SegmentationPolicy,
    model_name: String,
    state: RwLock<CorpusState>,
}

impl Engine {
    pub fn new(embedder: Arc<dyn EmbeddingProvider>, backend: Arc<dyn ChatBackend>) -> Self {
        let dim = embedder.dim();
        Self {
            embedder,
            backend,
            counter: Arc::new(WordRatioCounter),
            assembler: PromptAssembler::default(),
            policy: SegmentationPolicy::default(),
            model_name: DEFAULT_MODEL.to_string(),
            state: RwLock::new(CorpusState {
                documents: Vec::new(),
                passages: HashMap::new(),
                index: VectorIndex::new(dim),
            }),
        }
    }

    pub fn with_policy(mut self, policy: SegmentationPolicy) -> Result<Self, SegmentError> {
        policy.validate()?;
        self.policy = policy;
        Ok(self)
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_model(mut self, model_name: impl Into<String>) -> Self {
        self.model_name = model_name.into();
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn embedder_name(&self) -> &str {
        self.embedder.name()
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn policy(&self) -> SegmentationPolicy {
        self.policy
    }

    /// Segments, embeds, and indexes a document. Nothing becomes visible
    /// unless every passage is indexed.
    pub fn ingest(&self, document: Document) -> Result<DocumentSummary, QaError> {
        if self.has_document(&document.id) {
            return Err(QaError::DuplicateDocument(document.id));
        }
        let passages = segment_document(&document, &self.policy, self.counter.as_ref())
            .map_err(|e| QaError::at(Stage::Segment, e))?;
        let texts: Vec<String> = passages.iter().map(|p| p.text.clone()).collect();
        let vectors = self
            .embedder
            .embed_batch(&texts)
            .map_err(|e| QaError::at(Stage::Embed, e))?;
        if vectors.len() != passages.len() {
            return Err(QaError::at(
                Stage::Embed,
                StageError::Other(format!("{} vectors for {} passages", vectors.len(), passages.len())),
            ));
        }

        let mut state = self.state.write().unwrap();
        if state.documents.iter().any(|r| r.document.id == document.id) {
            return Err(QaError::DuplicateDocument(document.id));
        }
        for (passage, vector) in passages.iter().zip(&vectors) {
            if let Err(e) = state.index.insert(passage, vector) {
                state.index.remove_document(&document.id);
                return Err(QaError::at(Stage::Embed, e));
            }
        }
        let summary = DocumentSummary {
            document_id: document.id.clone(),
            title: document.title.clone(),
            passage_count: passages.len(),
        };
        let passage_ids = passages.iter().map(|p| p.id.clone()).collect();
        for p in passages {
            state.passages.insert(p.id.clone(), p);
        }
        state.documents.push(DocumentRecord { document, passage_ids });
        Ok(summary)
    }

    pub fn has_document(&self, document_id: &str) -> bool {
        self.state
            .read()
            .unwrap()
            .documents
            .iter()
            .any(|r| r.document.id == document_id)
    }

    /// Removes a document and its passages. Returns the number of passages removed.
    pub fn remove_document(&self, document_id: &str) -> Option<usize> {
        let mut state = self.state.write().unwrap();
        let pos = state.documents.iter().position(|r| r.document.id == document_id)?;
        let record = state.documents.remove(pos);
        for id in &record.passage_ids {
            state.passages.remove(id);
        }
        Some(state.index.remove_document(document_id))
    }

    /// Documents in ingestion order.
    pub fn documents(&self) -> Vec<DocumentSummary> {
        self.state
            .read()
            .unwrap()
            .documents
            .iter()
            .map(|r| DocumentSummary {
                document_id: r.document.id.clone(),
                title: r.document.title.clone(),
                passage_count: r.passage_ids.len(),
            })
            .collect()
    }

    pub fn document(&self, document_id: &str) -> Option<Document> {
        self.state
            .read()
            .unwrap()
            .documents
            .iter()
            .find(|r| r.document.id == document_id)
            .map(|r| r.document.clone())
    }

    pub fn passage(&self, passage_id: &str) -> Option<Passage> {
        self.state.read().unwrap().passages.get(passage_id).cloned()
    }

    /// All passages, documents in ingestion order and passages by ordinal.
    pub fn passages(&self) -> Vec<Passage> {
        let state = self.state.read().unwrap();
        state
            .documents
            .iter()
            .flat_map(|r| r.passage_ids.iter().map(|id| state.passages[id].clone()))
            .collect()
    }

    pub fn passage_count(&self) -> usize {
        self.state.read().unwrap().index.len()
    }

    pub fn answer_question(&self, question: &str, options: &QueryOptions) -> Result<QueryResult, QaError> {
        self.answer_with_prompt(question, options).map(|(result, _)| result)
    }

    /// Like [`answer_question`](Self::answer_question), also returning the
    /// prompt bundle that was sent.
    pub fn answer_with_prompt(
        &self,
        question: &str,
        options: &QueryOptions,
    ) -> Result<(QueryResult, PromptBundle), QaError> {
        let bundle = self.build_prompt(question, options)?;

        let request = CompletionRequest {
            messages: bundle.messages.clone(),
            temperature: options.temperature,
            model_name: self.model_name.clone(),
            max_answer_tokens: bundle.budget.answer_reserve,
        };
        let completion = self
            .backend
            .complete(&request)
            .map_err(|e| QaError::at(Stage::Complete, e))?;

        let result = QueryResult {
            question: question.to_string(),
            answer: completion.text,
            finish_reason: completion.finish_reason,
            included_passages: bundle
                .included
                .iter()
                .map(|p| IncludedPassage {
                    passage_id: p.passage_id.clone(),
                    document_id: p.document_id.clone(),
                    document_title: p.document_title.clone(),
                    distance: p.distance,
                    flattened_text: p.flattened_text.clone(),
                })
                .collect(),
            bundle_stats: BundleStats {
                passage_tokens_used: bundle.passage_tokens_used,
                prompt_tokens: bundle.prompt_tokens,
                total_hits: bundle.total_hits,
                skipped_count: bundle.skipped_count,
                no_passages_fit: bundle.no_passages_fit,
                passage_budget: bundle.budget.passage_budget,
                context_limit: bundle.budget.context_limit,
                answer_reserve: bundle.budget.answer_reserve,
            },
            backend: self.backend.name().to_string(),
            timestamp: Utc::now(),
        };
        Ok((result, bundle))
    }

    /// Retrieval and assembly only; deterministic for a given index snapshot.
    pub fn build_prompt(&self, question: &str, options: &QueryOptions) -> Result<PromptBundle, QaError> {
        if question.trim().is_empty() {
            return Err(QaError::EmptyQuestion);
        }
        options.validate()?;

        let query = self
            .embedder
            .embed(question)
            .map_err(|e| QaError::at(Stage::Embed, e))?;

        let hits: Vec<(Passage, f64)> = {
            let state = self.state.read().unwrap();
            if state.index.is_empty() {
                return Err(QaError::EmptyCorpus);
            }
            let allowed: Option<HashSet<String>> = match &options.allowed_documents {
                None => None,
                Some(requested) => {
                    let known: HashSet<String> = state
                        .documents
                        .iter()
                        .map(|r| r.document.id.clone())
                        .filter(|id| requested.contains(id))
                        .collect();
                    if known.is_empty() {
                        return Err(QaError::EmptySelection);
                    }
                    Some(known)
                }
            };
            state
                .index
                .search(&query, options.top_k, allowed.as_ref())
                .map_err(|e| QaError::at(Stage::Retrieve, e))?
                .into_iter()
                .map(|hit| (state.passages[&hit.passage_id].clone(), hit.distance))
                .collect()
        };

        let refs: Vec<(&Passage, f64)> = hits.iter().map(|(p, d)| (p, *d)).collect();
        self.assembler
            .assemble(question, &refs, &options.budget, options.passage_order, self.counter.as_ref())
            .map_err(|e| QaError::at(Stage::Assemble, e))
    }

    /// Writes the vector index to `path` and the source documents to
    /// [`snapshot_documents_path`]`(path)`.
    pub fn save(&self, path: &Path) -> Result<(), QaError> {
        let state = self.state.read().unwrap();
        let snapshot = SnapshotManifest {
            format: SNAPSHOT_FORMAT,
            embedder: self.embedder.name().to_string(),
            dim: self.embedder.dim(),
            counter: self.counter.name().to_string(),
            policy: self.policy,
            documents: state.documents.iter().map(|r| r.document.clone()).collect(),
        };
        let persist = |e: String| QaError::at(Stage::Persist, StageError::Other(e));
        state
            .index
            .save(path)
            .map_err(|e| QaError::at(Stage::Persist, e))?;
        let json = serde_json::to_string_pretty(&snapshot).map_err(|e| persist(e.to_string()))?;
        let docs_path = snapshot_documents_path(path);
        fs::write(&docs_path, json).map_err(|e| persist(format!("{}: {e}", docs_path.display())))
    }

    /// Restores a saved engine. The embedder must match the one the snapshot
    /// was built with; documents are re-segmented and checked against the index.
    pub fn load(
        path: &Path,
        embedder: Arc<dyn EmbeddingProvider>,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, QaError> {
        let persist = |e: String| QaError::at(Stage::Persist, StageError::Other(e));
        let docs_path = snapshot_documents_path(path);
        let raw = fs::read_to_string(&docs_path).map_err(|e| persist(format!("{}: {e}", docs_path.display())))?;
        let manifest: SnapshotManifest =
            serde_json::from_str(&raw).map_err(|e| persist(format!("{}: {e}", docs_path.display())))?;
        if manifest.format != SNAPSHOT_FORMAT {
            return Err(persist(format!("unsupported snapshot format {}", manifest.format)));
        }
        if manifest.embedder != embedder.name() || manifest.dim != embedder.dim() {
            return Err(persist(format!(
                "snapshot was built with embedder {} (dim {}), not {} (dim {})",
                manifest.embedder,
                manifest.dim,
                embedder.name(),
                embedder.dim()
            )));
        }
        let index = VectorIndex::load(path, Some(embedder.dim())).map_err(|e| QaError::at(Stage::Persist, e))?;

        let engine = Engine::new(embedder, backend)
            .with_policy(manifest.policy)
            .map_err(|e| QaError::at(Stage::Segment, e))?;
        if manifest.counter != engine.counter.name() {
            return Err(persist(format!("snapshot used token counter {}", manifest.counter)));
        }
        {
            let mut state = engine.state.write().unwrap();
            for document in manifest.documents {
                let passages = segment_document(&document, &engine.policy, engine.counter.as_ref())
                    .map_err(|e| QaError::at(Stage::Segment, e))?;
                for p in &passages {
                    if !index.contains(&p.id) {
                        return Err(persist(format!("passage {} missing from index", p.id)));
                    }
                }
                let passage_ids = passages.iter().map(|p| p.id.clone()).collect();
                for p in passages {
                    state.passages.insert(p.id.clone(), p);
                }
                state.documents.push(DocumentRecord { document, passage_ids });
            }
            if state.passages.len() != index.len() {
                return Err(persist(format!(
                    "index holds {} entries but documents yield {} passages",
                    index.len(),
                    state.passages.len()
                )));
            }
            state.index = index;
        }
        Ok(engine)
    }
}

const SNAPSHOT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    format: u32,
    embedder: String,
    dim: usize,
    counter: String,
    policy: SegmentationPolicy,
    documents: Vec<Document>,
}

/// Sidecar holding the documents behind an index file: `<index>.docs.json`.
pub fn snapshot_documents_path(index_path: &Path) -> PathBuf {
    let mut name = index_path.as_os_str().to_owned();
    name.push(".docs.json");
    PathBuf::from(name)
}
