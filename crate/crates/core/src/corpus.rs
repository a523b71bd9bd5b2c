//! Source documents with their heading hierarchy.
//!
//! Documents arrive either in the structured interchange format (one JSON
//! object per document, usually produced by an external PDF extractor) or as
//! plain text that is split into sections with a heading heuristic. Paragraph
//! text is whitespace-normalized at parse time so that token counts and
//! assembled prompts are reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("malformed document at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("empty document: {0}")]
    EmptyDocument(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParagraphKind {
    Prose,
    ListItem,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub text: String,
    pub kind: ParagraphKind,
}

impl Paragraph {
    /// Builds a paragraph from raw text, normalizing whitespace. Returns `None`
    /// when nothing but whitespace remains.
    pub fn new(raw: &str, kind: ParagraphKind) -> Option<Self> {
        let text = normalize_whitespace(raw);
        if text.is_empty() {
            None
        } else {
            Some(Self { text, kind })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    /// Headings from outermost to innermost. Empty for front matter.
    pub heading_path: Vec<String>,
    pub paragraphs: Vec<Paragraph>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

impl Document {
    pub fn paragraph_count(&self) -> usize {
        self.sections.iter().map(|s| s.paragraphs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraph_count() == 0
    }

    /// Serializes to the interchange format.
    pub fn to_interchange(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serialization cannot fail")
    }
}

/// Collapses internal whitespace runs to single spaces and trims both ends.
pub fn normalize_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    #[serde(default)]
    id: Option<String>,
    title: String,
    #[serde(default)]
    sections: Vec<RawSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSection {
    #[serde(default)]
    heading_path: Vec<String>,
    #[serde(default)]
    paragraphs: Vec<RawParagraph>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParagraph {
    text: String,
    #[serde(default = "default_kind")]
    kind: ParagraphKind,
}

fn default_kind() -> ParagraphKind {
    ParagraphKind::Prose
}

/// Parses one interchange-format document.
///
/// The `id` field of the payload wins; `fallback_id` is used when the payload
/// has none. Paragraphs that normalize to nothing are dropped.
pub fn parse_structured_document(raw: &str, fallback_id: &str) -> Result<Document, CorpusError> {
    let parsed: RawDocument = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let id = parsed
        .id
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| fallback_id.trim().to_string());
    if id.is_empty() {
        return Err(CorpusError::Malformed {
            line: 1,
            column: 1,
            message: "document has no id".into(),
        });
    }
    let title = normalize_whitespace(&parsed.title);
    if title.is_empty() {
        return Err(CorpusError::EmptyDocument(format!("document {id} has an empty title")));
    }

    let mut sections = Vec::with_capacity(parsed.sections.len());
    for (i, raw_section) in parsed.sections.into_iter().enumerate() {
        let mut heading_path = Vec::with_capacity(raw_section.heading_path.len());
        for heading in &raw_section.heading_path {
            let heading = normalize_whitespace(heading);
            if heading.is_empty() {
                return Err(CorpusError::Malformed {
                    line: 1,
                    column: 1,
                    message: format!("section {i} of document {id} has an empty heading"),
                });
            }
            heading_path.push(heading);
        }
        let paragraphs = raw_section
            .paragraphs
            .iter()
            .filter_map(|p| Paragraph::new(&p.text, p.kind))
            .collect();
        sections.push(Section {
            heading_path,
            paragraphs,
        });
    }

    Ok(Document {
        id,
        title,
        sections,
    })
}

/// Parses unstructured text. Blank lines separate paragraphs; heading-like
/// lines open a new depth-1 section. Text before the first heading lands in a
/// section with an empty heading path.
pub fn parse_plain_text(raw: &str, title: &str, id: &str) -> Result<Document, CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(format!("document {id} has no text")));
    }
    let title = normalize_whitespace(title);
    if title.is_empty() {
        return Err(CorpusError::EmptyDocument(format!("document {id} has an empty title")));
    }

    let mut sections: Vec<Section> = Vec::new();
    let mut current = Section {
        heading_path: Vec::new(),
        paragraphs: Vec::new(),
    };
    let mut buffer: Vec<&str> = Vec::new();

    fn flush(buffer: &mut Vec<&str>, section: &mut Section) {
        if buffer.is_empty() {
            return;
        }
        let joined = buffer.join(" ");
        let kind = if is_list_item(buffer[0]) {
            ParagraphKind::ListItem
        } else {
            ParagraphKind::Prose
        };
        if let Some(p) = Paragraph::new(&joined, kind) {
            section.paragraphs.push(p);
        }
        buffer.clear();
    }

    for line in raw.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut buffer, &mut current);
        } else if is_heading(trimmed) {
            flush(&mut buffer, &mut current);
            let finished = std::mem::replace(
                &mut current,
                Section {
                    heading_path: vec![normalize_whitespace(trimmed)],
                    paragraphs: Vec::new(),
                },
            );
            if !finished.heading_path.is_empty() || !finished.paragraphs.is_empty() {
                sections.push(finished);
            }
        } else {
            buffer.push(trimmed);
        }
    }
    flush(&mut buffer, &mut current);
    if !current.heading_path.is_empty() || !current.paragraphs.is_empty() {
        sections.push(current);
    }

    Ok(Document {
        id: id.to_string(),
        title,
        sections,
    })
}

const MAX_HEADING_WORDS: usize = 15;
const MAX_NUMBERED_HEADING_WORDS: usize = 10;

/// Heading heuristic for plain text: an all-caps line, `Article N`,
/// `Part <roman numeral>`, or a short numbered heading such as `2.1 Scope`.
pub fn is_heading(line: &str) -> bool {
    let line = line.trim();
    let words: Vec<&str> = line.split_whitespace().collect();
    if words.is_empty() || words.len() > MAX_HEADING_WORDS {
        return false;
    }

    let letters: Vec<char> = line.chars().filter(|c| c.is_alphabetic()).collect();
    if letters.len() >= 2 && letters.iter().all(|c| !c.is_lowercase()) {
        return true;
    }

    if words.len() >= 2 {
        let head = words[0];
        if head == "Article" && words[1].trim_end_matches(['.', ':']).chars().all(|c| c.is_ascii_digit()) {
            return true;
        }
        if head == "Part" {
            let numeral = words[1].trim_end_matches(['.', ':']);
            if !numeral.is_empty() && numeral.chars().all(|c| "IVXLCDM".contains(c)) {
                return true;
            }
        }
    }

    is_numbered_heading(&words)
}

// "1 Introduction", "2.3 Scope of application", "4. Definitions"
fn is_numbered_heading(words: &[&str]) -> bool {
    if words.len() < 2 || words.len() > MAX_NUMBERED_HEADING_WORDS {
        return false;
    }
    let number = words[0].trim_end_matches('.');
    let numeric = !number.is_empty()
        && number
            .split('.')
            .all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_digit()));
    if !numeric {
        return false;
    }
    let starts_upper = words[1].chars().next().is_some_and(|c| c.is_uppercase());
    let last = words[words.len() - 1];
    let ends_like_sentence = last.ends_with(['.', ';', ',', ':']);
    starts_upper && !ends_like_sentence
}

fn is_list_item(line: &str) -> bool {
    let line = line.trim_start();
    if line.starts_with(['-', '*', '\u{2022}']) {
        return true;
    }
    // (a), (iv), a), i.
    if let Some(rest) = line.strip_prefix('(') {
        if let Some(end) = rest.find(')') {
            let label = &rest[..end];
            return !label.is_empty() && label.len() <= 4 && label.chars().all(|c| c.is_ascii_alphanumeric());
        }
    }
    false
}

/// Reads one document file. `.json` files use the interchange format with the
/// file stem as fallback id; anything else is plain text titled by its stem.
pub fn read_document_file(path: &Path) -> Result<Document, CorpusError> {
    let io = |e: std::io::Error| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let raw = fs::read_to_string(path).map_err(io)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if path.extension().is_some_and(|e| e == "json") {
        parse_structured_document(&raw, stem)
    } else {
        parse_plain_text(&raw, stem, stem)
    }
}

/// Expands directories (non-recursively) into their `.json`, `.txt` and `.md`
/// files, sorted by name. Plain file arguments are kept as given.
pub fn collect_document_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CorpusError> {
    let mut out = Vec::new();
    for path in paths {
        if path.is_dir() {
            let io = |e: std::io::Error| CorpusError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            };
            let mut found: Vec<PathBuf> = fs::read_dir(path)
                .map_err(io)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json" || e == "txt" || e == "md"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(path.clone());
        }
    }
    Ok(out)
}
