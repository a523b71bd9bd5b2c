mod common;

use common::*;
use policyqa_core::promptkit::{PromptTemplate, ANALYST_TEMPLATE};
use policyqa_core::qa::QueryOptions;
use policyqa_core::segmenter::{segment_document, SegmentationPolicy, WordRatioCounter};
use serde_json::json;

#[test]
fn fixture_passages_match_golden() {
    for doc in fixture_documents() {
        let passages = segment_document(&doc, &SegmentationPolicy::default(), &WordRatioCounter).unwrap();

        // The grouping must agree with the rules re-derived by the oracle.
        for (si, section) in doc.sections.iter().enumerate() {
            let got: Vec<usize> = passages
                .iter()
                .filter(|p| p.section_index == si)
                .map(|p| p.paragraph_count)
                .collect();
            assert_eq!(got, oracle_groups(section, 200, 100), "{} section {si}", doc.id);
        }

        let mut golden = serde_json::to_value(&doc).unwrap();
        golden["passages"] = json!(passages);
        let text = serde_json::to_string_pretty(&golden).unwrap() + "\n";
        check_golden(&fixture_path(&format!("golden/passages/{}.json", doc.id)), &text);
    }
}

#[test]
fn fixture_prompt_matches_golden() {
    let engine = fixture_engine();
    let bundle = engine.build_prompt(FIXTURE_QUESTION, &QueryOptions::default()).unwrap();
    check_golden(&fixture_path("golden/prompt.txt"), &bundle.render());

    assert!(bundle.passage_tokens_used <= 3000);
    assert!(bundle.prompt_tokens + 512 <= 4097);
    assert!(!bundle.no_passages_fit);

    // Masking the passage block and the question gives back the template.
    let masked = bundle
        .render()
        .replacen(&bundle.passage_block(), "{PASSAGES}", 1)
        .replacen(FIXTURE_QUESTION, "{QUESTION}", 1);
    assert_eq!(masked, ANALYST_TEMPLATE);
}

#[test]
fn template_file_is_the_shipped_one() {
    let on_disk = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/analyst.template")).unwrap();
    assert_eq!(on_disk, ANALYST_TEMPLATE);
    assert_eq!(PromptTemplate::analyst().messages().len(), 4);
}
