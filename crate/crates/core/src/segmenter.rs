//! Paragraph-based passage segmentation.
//!
//! A section small enough to fit under `whole_section_max_tokens` becomes a
//! single passage. Larger sections are split by greedily merging adjacent
//! paragraphs until each passage reaches `merge_min_tokens`; this keeps the
//! bulleted lists common in negotiation texts from turning into dozens of
//! one-line passages. A leftover tail below the minimum is folded into the
//! previous passage. Passages never cross section boundaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Section};

/// Separator between merged paragraphs inside a passage.
pub const PARAGRAPH_SEPARATOR: &str = "\n";

pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Approximates model tokens as `ceil(4 * words / 3)`, so 150 words count as
/// 200 tokens and 2,250 words as 3,000.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WordRatioCounter;

impl WordRatioCounter {
    pub const NAME: &'static str = "word-ratio-4/3";
}

impl TokenCounter for WordRatioCounter {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn count(&self, text: &str) -> usize {
        default_token_count(text)
    }
}

pub fn default_token_count(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (4 * words).div_ceil(3)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("section has no paragraphs")]
    EmptySection,
    #[error("invalid segmentation policy: whole_section_max_tokens ({whole}) must exceed merge_min_tokens ({merge}) and both must be positive")]
    InvalidPolicy { whole: usize, merge: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationPolicy {
    pub whole_section_max_tokens: usize,
    pub merge_min_tokens: usize,
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        Self {
            whole_section_max_tokens: 200,
            merge_min_tokens: 100,
        }
    }
}

impl SegmentationPolicy {
    pub fn new(whole_section_max_tokens: usize, merge_min_tokens: usize) -> Result<Self, SegmentError> {
        let policy = Self {
            whole_section_max_tokens,
            merge_min_tokens,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.merge_min_tokens == 0 || self.whole_section_max_tokens <= self.merge_min_tokens {
            return Err(SegmentError::InvalidPolicy {
                whole: self.whole_section_max_tokens,
                merge: self.merge_min_tokens,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub document_id: String,
    pub document_title: String,
    pub heading_path: Vec<String>,
    pub text: String,
    pub token_count: usize,
    /// Position within the document.
    pub ordinal: usize,
    /// Index of the source section within the document.
    pub section_index: usize,
    /// Number of source paragraphs merged into this passage.
    pub paragraph_count: usize,
}

/// Identity of the document a section belongs to.
#[derive(Debug, Clone, Copy)]
pub struct DocMeta<'a> {
    pub document_id: &'a str,
    pub document_title: &'a str,
    pub section_index: usize,
}

pub fn passage_id(document_id: &str, ordinal: usize) -> String {
    format!("{document_id}:{ordinal}")
}

/// Segments one section. Ordinals (and ids) start at zero; `segment_document`
/// renumbers them across the whole document.
pub fn segment_section(
    section: &Section,
    meta: DocMeta<'_>,
    policy: &SegmentationPolicy,
    counter: &dyn TokenCounter,
) -> Result<Vec<Passage>, SegmentError> {
    policy.validate()?;
    if section.paragraphs.is_empty() {
        return Err(SegmentError::EmptySection);
    }

    let texts: Vec<&str> = section.paragraphs.iter().map(|p| p.text.as_str()).collect();
    let whole = texts.join(PARAGRAPH_SEPARATOR);
    if counter.count(&whole) < policy.whole_section_max_tokens {
        return Ok(vec![make_passage(meta, section, whole, texts.len(), 0, counter)]);
    }

    // (joined text, paragraph count)
    let mut groups: Vec<(String, usize)> = Vec::new();
    let mut buffer = String::new();
    let mut buffered = 0usize;
    for text in &texts {
        if buffered > 0 {
            buffer.push_str(PARAGRAPH_SEPARATOR);
        }
        buffer.push_str(text);
        buffered += 1;
        if counter.count(&buffer) >= policy.merge_min_tokens {
            groups.push((std::mem::take(&mut buffer), buffered));
            buffered = 0;
        }
    }
    if buffered > 0 {
        match groups.last_mut() {
            Some((last, n)) => {
                last.push_str(PARAGRAPH_SEPARATOR);
                last.push_str(&buffer);
                *n += buffered;
            }
            None => groups.push((buffer, buffered)),
        }
    }

    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, (text, n))| make_passage(meta, section, text, n, i, counter))
        .collect())
}

fn make_passage(
    meta: DocMeta<'_>,
    section: &Section,
    text: String,
    paragraph_count: usize,
    ordinal: usize,
    counter: &dyn TokenCounter,
) -> Passage {
    Passage {
        id: passage_id(meta.document_id, ordinal),
        document_id: meta.document_id.to_string(),
        document_title: meta.document_title.to_string(),
        heading_path: section.heading_path.clone(),
        token_count: counter.count(&text),
        text,
        ordinal,
        section_index: meta.section_index,
        paragraph_count,
    }
}

/// Segments every non-empty section and numbers the passages in document order.
pub fn segment_document(
    doc: &Document,
    policy: &SegmentationPolicy,
    counter: &dyn TokenCounter,
) -> Result<Vec<Passage>, SegmentError> {
    policy.validate()?;
    let mut out = Vec::new();
    for (section_index, section) in doc.sections.iter().enumerate() {
        if section.paragraphs.is_empty() {
            continue;
        }
        let meta = DocMeta {
            document_id: &doc.id,
            document_title: &doc.title,
            section_index,
        };
        for mut passage in segment_section(section, meta, policy, counter)? {
            passage.ordinal = out.len();
            passage.id = passage_id(&doc.id, passage.ordinal);
            out.push(passage);
        }
    }
    Ok(out)
}
