//! Fixture loading and independent oracles shared by the integration tests.
//!
//! Nothing here calls into the search, packing, or segmentation code it is
//! used to check.

#![allow(dead_code)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use policyqa_core::corpus::{parse_structured_document, Document, Section};
use policyqa_core::embeddings::HashEmbedder;
use policyqa_core::llmclient::ScriptedMock;
use policyqa_core::qa::Engine;
use policyqa_core::segmenter::Passage;

pub const FIXTURE_QUESTION: &str = "What is the process for establishing a high seas marine protected area?";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_path(rel: &str) -> PathBuf {
    fixtures_dir().join(rel)
}

/// Fixture documents, ordered by file name.
pub fn fixture_documents() -> Vec<Document> {
    let mut paths: Vec<PathBuf> = fs::read_dir(fixture_path("corpus"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = fs::read_to_string(p).unwrap();
            let stem = p.file_stem().unwrap().to_str().unwrap();
            parse_structured_document(&raw, stem).unwrap()
        })
        .collect()
}

pub fn fixture_mock() -> ScriptedMock {
    ScriptedMock::parse_script(&fs::read_to_string(fixture_path("mock/answers.script")).unwrap()).unwrap()
}

pub fn fixture_engine() -> Engine {
    let engine = Engine::new(Arc::new(HashEmbedder::default()), Arc::new(fixture_mock()));
    for doc in fixture_documents() {
        engine.ingest(doc).unwrap();
    }
    engine
}

pub fn blessing() -> bool {
    std::env::var_os("POLICYQA_BLESS").is_some()
}

/// Compares `actual` with a checked-in golden file, or rewrites the file when
/// `POLICYQA_BLESS` is set.
pub fn check_golden(path: &Path, actual: &str) {
    if blessing() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("golden file {} unreadable ({e}); rerun with POLICYQA_BLESS=1", path.display()));
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map(|i| i + 1)
            .unwrap_or_else(|| expected.lines().count().min(actual.lines().count()) + 1);
        panic!("{} differs from output starting at line {line}", path.display());
    }
}

/// Word-ratio token count written out independently: ceil(4w/3).
pub fn oracle_tokens(text: &str) -> usize {
    let w = text.split_whitespace().count();
    (4 * w).div_ceil(3)
}

pub struct OracleEntry {
    pub passage_id: String,
    pub document_id: String,
    pub seq: u64,
    pub vector: Vec<f64>,
}

pub fn oracle_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    let d = 1.0 - dot / (na.sqrt() * nb.sqrt());
    d.clamp(0.0, 2.0)
}

/// Full sort over every entry by (distance, insertion sequence), truncated to k.
pub fn brute_force_knn(
    entries: &[OracleEntry],
    query: &[f64],
    k: usize,
    allowed: Option<&HashSet<String>>,
) -> Vec<(String, String, f64)> {
    let mut all: Vec<(f64, u64, &OracleEntry)> = entries
        .iter()
        .filter(|e| allowed.is_none_or(|a| a.contains(&e.document_id)))
        .map(|e| (oracle_cosine_distance(&e.vector, query), e.seq, e))
        .collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    all.into_iter()
        .take(k)
        .map(|(d, _, e)| (e.passage_id.clone(), e.document_id.clone(), d))
        .collect()
}

/// Greedy skip-and-continue packing over pre-computed costs.
pub fn oracle_pack(costs: &[usize], budget: usize) -> Vec<usize> {
    let mut left = budget;
    let mut chosen = Vec::new();
    for (i, &c) in costs.iter().enumerate() {
        if c <= left {
            left -= c;
            chosen.push(i);
        }
    }
    chosen
}

/// Flattened-passage layout written out independently.
pub fn oracle_flatten(title: &str, heading_path: &[String], text: &str) -> String {
    let mut s = String::new();
    s += "From document \"";
    s += title;
    s += "\":\n";
    if !heading_path.is_empty() {
        s += &heading_path.join(" > ");
        s += ":\n";
    }
    s += text;
    s += "\n\n";
    s
}

/// Re-derives the expected grouping of a section's paragraphs (as paragraph
/// counts per passage) from the two segmentation rules.
pub fn oracle_groups(section: &Section, whole_max: usize, merge_min: usize) -> Vec<usize> {
    let texts: Vec<&str> = section.paragraphs.iter().map(|p| p.text.as_str()).collect();
    if texts.is_empty() {
        return vec![];
    }
    if oracle_tokens(&texts.join("\n")) < whole_max {
        return vec![texts.len()];
    }
    let mut groups = Vec::new();
    let mut start = 0;
    for end in 1..=texts.len() {
        if oracle_tokens(&texts[start..end].join("\n")) >= merge_min {
            groups.push(end - start);
            start = end;
        }
    }
    if start < texts.len() {
        match groups.last_mut() {
            Some(last) => *last += texts.len() - start,
            None => groups.push(texts.len() - start),
        }
    }
    groups
}

/// FNV-1a 64 feature hashing, written out independently of the embedder.
pub fn oracle_hash_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let lower = text.to_lowercase();
    for term in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in term.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Expected prompt provenance for a hash-embedded engine: brute-force top-k
/// over the stored (f32) vectors, then greedy packing in relevance order.
pub fn oracle_provenance(
    passages: &[Passage],
    question: &str,
    allowed: Option<&HashSet<String>>,
    top_k: usize,
    passage_budget: usize,
) -> Vec<String> {
    let entries: Vec<OracleEntry> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| OracleEntry {
            passage_id: p.id.clone(),
            document_id: p.document_id.clone(),
            seq: i as u64,
            vector: oracle_hash_embed(&p.text, 256).iter().map(|&x| f64::from(x as f32)).collect(),
        })
        .collect();
    let hits = brute_force_knn(&entries, &oracle_hash_embed(question, 256), top_k, allowed);
    let costs: Vec<usize> = hits
        .iter()
        .map(|(id, _, _)| {
            let p = passages.iter().find(|p| &p.id == id).unwrap();
            oracle_tokens(&oracle_flatten(&p.document_title, &p.heading_path, &p.text))
        })
        .collect();
    oracle_pack(&costs, passage_budget).into_iter().map(|i| hits[i].0.clone()).collect()
}
