//! Prompt assembly under a token budget.
//!
//! Retrieved passages are flattened with their document title and heading
//! path, then packed greedily in hit order into the passage slot of the
//! message template. A passage that does not fit the remaining budget is
//! skipped and packing continues with later hits. Every byte outside the two
//! placeholders comes from `templates/analyst.template`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::{Passage, TokenCounter};

pub const PASSAGES_PLACEHOLDER: &str = "{PASSAGES}";
pub const QUESTION_PLACEHOLDER: &str = "{QUESTION}";
const ROLE_MARKER: &str = "=== ";

/// The shipped message template.
pub const ANALYST_TEMPLATE: &str = include_str!("../templates/analyst.template");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("hits must be sorted by ascending distance")]
    UnsortedHits,
    #[error("invalid budget: passage_budget ({passage_budget}) + answer_reserve ({answer_reserve}) must be below context_limit ({context_limit})")]
    InvalidBudget {
        passage_budget: usize,
        answer_reserve: usize,
        context_limit: usize,
    },
    #[error("prompt without passages needs {fixed_tokens} tokens, leaving no room under the context limit")]
    QuestionTooLong { fixed_tokens: usize },
    #[error("invalid template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(PromptError::Template(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub passage_budget: usize,
    pub context_limit: usize,
    pub answer_reserve: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            passage_budget: 3000,
            context_limit: 4097,
            answer_reserve: 512,
        }
    }
}

impl PromptBudget {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.passage_budget + self.answer_reserve >= self.context_limit {
            return Err(PromptError::InvalidBudget {
                passage_budget: self.passage_budget,
                answer_reserve: self.answer_reserve,
                context_limit: self.context_limit,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassageOrder {
    /// Hit order (ascending distance).
    #[default]
    Relevance,
    /// Grouped by document id, then by position within the document.
    Document,
}

impl std::str::FromStr for PassageOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relevance" => Ok(PassageOrder::Relevance),
            "document" => Ok(PassageOrder::Document),
            other => Err(format!("unknown passage order {other:?} (expected relevance or document)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedPassage {
    pub passage_id: String,
    pub document_id: String,
    pub document_title: String,
    pub ordinal: usize,
    pub distance: f64,
    pub flattened_text: String,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub included: Vec<PackedPassage>,
    pub passage_tokens_used: usize,
    /// Sum of the token counts of all message contents.
    pub prompt_tokens: usize,
    pub total_hits: usize,
    pub skipped_count: usize,
    /// Set when hits were offered but none fit the budget, or there were none.
    pub no_passages_fit: bool,
    pub budget: PromptBudget,
}

impl PromptBundle {
    pub fn included_passage_ids(&self) -> Vec<&str> {
        self.included.iter().map(|p| p.passage_id.as_str()).collect()
    }

    /// The flattened passages exactly as they appear in the prompt.
    pub fn passage_block(&self) -> String {
        self.included.iter().map(|p| p.flattened_text.as_str()).collect()
    }

    /// Plain-text rendering in the template file's own syntax.
    pub fn render(&self) -> String {
        render_messages(&self.messages)
    }
}

pub fn render_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(ROLE_MARKER);
        out.push_str(m.role.as_str());
        out.push('\n');
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

/// A parsed message template with `{PASSAGES}` and `{QUESTION}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    messages: Vec<ChatMessage>,
}

impl PromptTemplate {
    /// Parses `=== <role>` delimited messages. A message's content is every
    /// line up to the next marker, without the final line break.
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut messages: Vec<ChatMessage> = Vec::new();
        let mut lines: Vec<&str> = Vec::new();
        let mut role: Option<Role> = None;
        for line in source.lines() {
            if let Some(name) = line.strip_prefix(ROLE_MARKER) {
                if let Some(r) = role.take() {
                    messages.push(ChatMessage {
                        role: r,
                        content: lines.join("\n"),
                    });
                }
                lines.clear();
                role = Some(name.trim().parse()?);
            } else if role.is_some() {
                lines.push(line);
            } else if !line.trim().is_empty() {
                return Err(PromptError::Template("text before the first role marker".into()));
            }
        }
        if let Some(r) = role {
            messages.push(ChatMessage {
                role: r,
                content: lines.join("\n"),
            });
        }

        let count = |needle: &str| messages.iter().map(|m| m.content.matches(needle).count()).sum::<usize>();
        if count(PASSAGES_PLACEHOLDER) != 1 || count(QUESTION_PLACEHOLDER) != 1 {
            return Err(PromptError::Template(
                "template needs exactly one {PASSAGES} and one {QUESTION}".into(),
            ));
        }
        Ok(Self { messages })
    }

    pub fn analyst() -> Self {
        Self::parse(ANALYST_TEMPLATE).expect("shipped template is valid")
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn fill(&self, passages: &str, question: &str) -> Vec<ChatMessage> {
        self.messages
            .iter()
            .map(|m| ChatMessage {
                role: m.role,
                content: substitute(&m.content, passages, question),
            })
            .collect()
    }
}

// Placeholders are located in the template text only, so inserted text is
// never rescanned.
fn substitute(template: &str, passages: &str, question: &str) -> String {
    let mut slots: Vec<(usize, &str, &str)> = [(PASSAGES_PLACEHOLDER, passages), (QUESTION_PLACEHOLDER, question)]
        .into_iter()
        .filter_map(|(needle, value)| template.find(needle).map(|at| (at, needle, value)))
        .collect();
    slots.sort_by_key(|s| s.0);
    let mut out = String::with_capacity(template.len() + passages.len() + question.len());
    let mut cursor = 0;
    for (at, needle, value) in slots {
        out.push_str(&template[cursor..at]);
        out.push_str(value);
        cursor = at + needle.len();
    }
    out.push_str(&template[cursor..]);
    out
}

/// `From document "<title>":`, the heading path joined with ` > ` (when
/// present), the passage text, then a blank line.
pub fn flatten_passage(passage: &Passage) -> String {
    let mut out = format!("From document \"{}\":\n", passage.document_title);
    if !passage.heading_path.is_empty() {
        out.push_str(&passage.heading_path.join(" > "));
        out.push_str(":\n");
    }
    out.push_str(&passage.text);
    out.push_str("\n\n");
    out
}

pub fn prompt_tokens(messages: &[ChatMessage], counter: &dyn TokenCounter) -> usize {
    messages.iter().map(|m| counter.count(&m.content)).sum()
}

pub fn assemble_prompt(
    question: &str,
    hits: &[(&Passage, f64)],
    budget: &PromptBudget,
    counter: &dyn TokenCounter,
) -> Result<PromptBundle, PromptError> {
    PromptAssembler::new(PromptTemplate::analyst()).assemble(question, hits, budget, PassageOrder::Relevance, counter)
}

#[derive(Debug, Clone)]
pub struct PromptAssembler {
    template: PromptTemplate,
}

impl Default for PromptAssembler {
    fn default() -> Self {
        Self::new(PromptTemplate::analyst())
    }
}

impl PromptAssembler {
    pub fn new(template: PromptTemplate) -> Self {
        Self { template }
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn assemble(
        &self,
        question: &str,
        hits: &[(&Passage, f64)],
        budget: &PromptBudget,
        order: PassageOrder,
        counter: &dyn TokenCounter,
    ) -> Result<PromptBundle, PromptError> {
        if question.trim().is_empty() {
            return Err(PromptError::EmptyQuestion);
        }
        budget.validate()?;
        if hits.windows(2).any(|w| w[0].1 > w[1].1) {
            return Err(PromptError::UnsortedHits);
        }

        let fixed_tokens = prompt_tokens(&self.template.fill("", question), counter);
        let room = budget
            .context_limit
            .checked_sub(budget.answer_reserve + fixed_tokens)
            .filter(|&r| r > 0)
            .ok_or(PromptError::QuestionTooLong { fixed_tokens })?;
        let mut remaining = budget.passage_budget.min(room);

        let mut included = Vec::new();
        for (passage, distance) in hits {
            let flattened = flatten_passage(passage);
            let tokens = counter.count(&flattened);
            if tokens > remaining {
                continue;
            }
            remaining -= tokens;
            included.push(PackedPassage {
                passage_id: passage.id.clone(),
                document_id: passage.document_id.clone(),
                document_title: passage.document_title.clone(),
                ordinal: passage.ordinal,
                distance: *distance,
                flattened_text: flattened,
                tokens,
            });
        }

        if order == PassageOrder::Document {
            included.sort_by(|a, b| a.document_id.cmp(&b.document_id).then(a.ordinal.cmp(&b.ordinal)));
        }

        // A non-additive counter can make the filled prompt cost more than
        // the sum of its parts; shed the last passages until it fits.
        loop {
            let block: String = included.iter().map(|p| p.flattened_text.as_str()).collect();
            let messages = self.template.fill(&block, question);
            let total = prompt_tokens(&messages, counter);
            let passage_tokens_used = counter.count(&block);
            if (total + budget.answer_reserve <= budget.context_limit && passage_tokens_used <= budget.passage_budget)
                || included.is_empty()
            {
                let skipped_count = hits.len() - included.len();
                return Ok(PromptBundle {
                    messages,
                    no_passages_fit: included.is_empty(),
                    included,
                    passage_tokens_used,
                    prompt_tokens: total,
                    total_hits: hits.len(),
                    skipped_count,
                    budget: *budget,
                });
            }
            included.pop();
        }
    }
}
