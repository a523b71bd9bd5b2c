//! Paired-prompt probes: ask several wordings of a question under identical
//! settings and compare what was retrieved and what was answered.
//!
//! For every pair of variants the report gives the Jaccard overlap of the
//! included passage sets and a normalized token-level edit distance between
//! the answers. When both variants retrieved the same passages, any answer
//! divergence is attributed to generation rather than retrieval.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptkit::PassageOrder;
use crate::qa::{Engine, QaError, QueryOptions, QueryResult};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe spec: {0}")]
    Invalid(String),
    #[error("probe spec line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("variant {label}: {source}")]
    Variant {
        label: String,
        #[source]
        source: QaError,
    },
    #[error("report i/o on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub name: String,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub options: QueryOptions,
    #[serde(default = "one")]
    pub repetitions: usize,
}

fn one() -> usize {
    1
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.name.trim().is_empty() {
            return Err(ProbeError::Invalid("name is empty".into()));
        }
        if self.variants.len() < 2 {
            return Err(ProbeError::Invalid("a probe needs at least two variants".into()));
        }
        let mut labels = HashSet::new();
        for v in &self.variants {
            if v.label.trim().is_empty() {
                return Err(ProbeError::Invalid("variant label is empty".into()));
            }
            if !labels.insert(v.label.as_str()) {
                return Err(ProbeError::Invalid(format!("duplicate variant label {:?}", v.label)));
            }
            if v.question.trim().is_empty() {
                return Err(ProbeError::Invalid(format!("variant {:?} has no question", v.label)));
            }
        }
        if self.repetitions == 0 {
            return Err(ProbeError::Invalid("repetitions must be at least 1".into()));
        }
        self.options
            .validate()
            .map_err(|e| ProbeError::Invalid(e.to_string()))
    }

    /// Parses the probe file format:
    ///
    /// ```text
    /// # comment
    /// name: tone-pair
    /// temperature: 0.3
    /// top_k: 24
    /// repetitions: 1
    /// documents: all
    /// order: relevance
    ///
    /// [confrontational]
    /// The process is a failure. Please explain its shortcomings.
    ///
    /// [neutral]
    /// What are the criticisms of the process?
    /// ```
    ///
    /// Header keys come before the first `[label]`; all are optional except
    /// `name`. `documents` is `all` or a comma-separated id list. A variant's
    /// question is its non-blank lines joined with single spaces.
    pub fn parse(source: &str) -> Result<Self, ProbeError> {
        let mut name: Option<String> = None;
        let mut options = QueryOptions::default();
        let mut repetitions = 1usize;
        let mut variants: Vec<Variant> = Vec::new();
        let mut current: Option<(String, Vec<String>)> = None;

        fn finish(current: &mut Option<(String, Vec<String>)>, variants: &mut Vec<Variant>) {
            if let Some((label, lines)) = current.take() {
                variants.push(Variant {
                    label,
                    question: lines.join(" "),
                });
            }
        }

        for (i, raw_line) in source.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.trim();
            if line.starts_with('#') {
                continue;
            }
            if let Some(label) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(&mut current, &mut variants);
                current = Some((label.trim().to_string(), Vec::new()));
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if let Some((_, lines)) = current.as_mut() {
                lines.push(line.to_string());
                continue;
            }
            let err = |message: String| ProbeError::Parse { line: line_no, message };
            let (key, value) = line
                .split_once(':')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key: value` or `[label]`".into()))?;
            match key {
                "name" => name = Some(value.to_string()),
                "temperature" => {
                    options.temperature = value.parse().map_err(|_| err(format!("bad temperature {value:?}")))?
                }
                "top_k" => options.top_k = value.parse().map_err(|_| err(format!("bad top_k {value:?}")))?,
                "repetitions" => {
                    repetitions = value.parse().map_err(|_| err(format!("bad repetitions {value:?}")))?
                }
                "documents" => {
                    options.allowed_documents = if value == "all" {
                        None
                    } else {
                        Some(
                            value
                                .split(',')
                                .map(|s| s.trim().to_string())
                                .filter(|s| !s.is_empty())
                                .collect::<BTreeSet<_>>(),
                        )
                    }
                }
                "order" => options.passage_order = value.parse::<PassageOrder>().map_err(err)?,
                "passage_budget" => {
                    options.budget.passage_budget =
                        value.parse().map_err(|_| err(format!("bad passage_budget {value:?}")))?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        finish(&mut current, &mut variants);

        let spec = ProbeSpec {
            name: name.ok_or_else(|| ProbeError::Invalid("missing `name:`".into()))?,
            variants,
            options,
            repetitions,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceStage {
    /// The answers are identical.
    None,
    /// Same passages retrieved; the answers differ anyway.
    GenerationStage,
    /// Different passages retrieved.
    RetrievalStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTranscript {
    pub label: String,
    pub question: String,
    /// One result per repetition.
    pub results: Vec<QueryResult>,
    /// Mean pairwise answer divergence across repetitions; 0 for a single run.
    pub repetition_divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub retrieval_overlap: f64,
    pub answer_divergence: f64,
    pub divergence_stage: DivergenceStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub options: QueryOptions,
    pub repetitions: usize,
    pub variants: Vec<VariantTranscript>,
    pub pairs: Vec<PairComparison>,
}

impl ProbeReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairComparison> {
        self.pairs
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
    }
}

/// Jaccard index of two id sets; two empty sets overlap fully.
pub fn jaccard<T: AsRef<str>>(a: &[T], b: &[T]) -> f64 {
    let a: HashSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: HashSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Levenshtein distance over whitespace tokens divided by the longer token
/// count; 0 for two empty texts.
pub fn token_divergence(a: &str, b: &str) -> f64 {
    let a: Vec<&str> = a.split_whitespace().collect();
    let b: Vec<&str> = b.split_whitespace().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(&a, &b) as f64 / longest as f64
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut row = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(x != y);
            row[j + 1] = substitution.min(prev[j + 1] + 1).min(row[j] + 1);
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs every variant `repetitions` times with the spec's options. Variants
/// run on separate threads; the backend bounds actual request concurrency.
pub fn run_probe(engine: &Engine, spec: &ProbeSpec) -> Result<ProbeReport, ProbeError> {
    spec.validate()?;

    let outcomes: Vec<Result<Vec<QueryResult>, ProbeError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = spec
            .variants
            .iter()
            .map(|variant| {
                scope.spawn(move || {
                    (0..spec.repetitions)
                        .map(|_| {
                            engine
                                .answer_question(&variant.question, &spec.options)
                                .map_err(|source| ProbeError::Variant {
                                    label: variant.label.clone(),
                                    source,
                                })
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("probe worker panicked")).collect()
    });

    let mut variants = Vec::with_capacity(spec.variants.len());
    for (variant, outcome) in spec.variants.iter().zip(outcomes) {
        let results = outcome?;
        let mut rep_pairs = Vec::new();
        for i in 0..results.len() {
            for j in i + 1..results.len() {
                rep_pairs.push(token_divergence(&results[i].answer, &results[j].answer));
            }
        }
        variants.push(VariantTranscript {
            label: variant.label.clone(),
            question: variant.question.clone(),
            repetition_divergence: mean(rep_pairs.into_iter()),
            results,
        });
    }

    let mut pairs = Vec::new();
    for i in 0..variants.len() {
        for j in i + 1..variants.len() {
            pairs.push(compare(&variants[i], &variants[j]));
        }
    }

    Ok(ProbeReport {
        name: spec.name.clone(),
        options: spec.options.clone(),
        repetitions: spec.repetitions,
        variants,
        pairs,
    })
}

fn compare(a: &VariantTranscript, b: &VariantTranscript) -> PairComparison {
    let runs = a.results.iter().zip(&b.results);
    let retrieval_overlap = mean(runs.clone().map(|(x, y)| jaccard(&x.passage_ids(), &y.passage_ids())));
    let answer_divergence = mean(runs.map(|(x, y)| token_divergence(&x.answer, &y.answer)));
    let divergence_stage = if answer_divergence == 0.0 {
        DivergenceStage::None
    } else if retrieval_overlap == 1.0 {
        DivergenceStage::GenerationStage
    } else {
        DivergenceStage::RetrievalStage
    };
    PairComparison {
        a: a.label.clone(),
        b: b.label.clone(),
        retrieval_overlap,
        answer_divergence,
        divergence_stage,
    }
}

const JSON_FENCE: &str = "```json";

/// Writes a Markdown transcript followed by the full report as a fenced JSON
/// block, which [`read_report`] parses back.
pub fn export_report(report: &ProbeReport, path: &Path) -> Result<(), ProbeError> {
    let json = serde_json::to_string_pretty(report).map_err(|e| ProbeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = format!("# Probe report: {}\n\n", report.name);
    out.push_str(&format!(
        "Settings: temperature {}, top_k {}, passage order {:?}, repetitions {}, documents {}.\n\n",
        report.options.temperature,
        report.options.top_k,
        report.options.passage_order,
        report.repetitions,
        match &report.options.allowed_documents {
            None => "all".to_string(),
            Some(ids) => ids.iter().cloned().collect::<Vec<_>>().join(", "),
        }
    ));
    out.push_str("## Pairwise comparison\n\n| a | b | retrieval overlap | answer divergence | divergence stage |\n|---|---|---|---|---|\n");
    for p in &report.pairs {
        out.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:?} |\n",
            p.a, p.b, p.retrieval_overlap, p.answer_divergence, p.divergence_stage
        ));
    }
    for v in &report.variants {
        out.push_str(&format!("\n## Variant `{}`\n\nQuestion: {}\n", v.label, v.question));
        for (i, r) in v.results.iter().enumerate() {
            out.push_str(&format!("\n### Run {}\n\n{}\n\nSources:\n", i + 1, r.answer));
            for p in &r.included_passages {
                out.push_str(&format!(
                    "- {} ({}) distance {:.4}\n",
                    p.passage_id, p.document_title, p.distance
                ));
            }
        }
    }
    out.push_str("\n## Machine-readable report\n\n");
    out.push_str(JSON_FENCE);
    out.push('\n');
    out.push_str(&json);
    out.push_str("\n```\n");

    fs::write(path, out).map_err(|e| ProbeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_report(path: &Path) -> Result<ProbeReport, ProbeError> {
    let io = |message: String| ProbeError::Io {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    let start = text
        .rfind(&format!("\n{JSON_FENCE}\n"))
        .ok_or_else(|| io("no JSON block".into()))?
        + JSON_FENCE.len()
        + 2;
    let end = text[start..]
        .rfind("\n```")
        .ok_or_else(|| io("unterminated JSON block".into()))?;
    serde_json::from_str(&text[start..start + end]).map_err(|e| io(e.to_string()))
}
