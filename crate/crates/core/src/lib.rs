//! Corpus-grounded question answering.
//!
//! Documents are segmented into token-bounded passages, embedded, and stored
//! in an exact cosine-distance index. A question retrieves the nearest
//! passages, which are packed into a fixed message template under a token
//! budget and sent to a chat-completion backend. The answer comes back with
//! the exact list of passages the backend saw.

pub mod corpus;
pub mod embeddings;
pub mod http;
pub mod llmclient;
pub mod probe;
pub mod promptkit;
pub mod qa;
pub mod segmenter;
pub mod vectorindex;

pub use corpus::{collect_document_paths, read_document_file, parse_plain_text, parse_structured_document, Document, Paragraph, ParagraphKind, Section};
pub use embeddings::{cosine_distance, hash_embed, EmbeddingProvider, EmbeddingVector, HashEmbedder};
pub use llmclient::{ChatBackend, CompletionRequest, CompletionResult, ScriptedMock};
pub use probe::{run_probe, ProbeReport, ProbeSpec};
pub use promptkit::{assemble_prompt, flatten_passage, PassageOrder, PromptBudget, PromptBundle};
pub use qa::{Engine, QaError, QueryOptions, QueryResult};
pub use segmenter::{segment_document, Passage, SegmentationPolicy, TokenCounter, WordRatioCounter};
pub use vectorindex::{ScoredHit, VectorIndex};
