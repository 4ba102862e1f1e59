mod common;

use std::collections::HashMap;

use common::*;
use confcheck::prompts::{TemplateId, TemplateSet};
use regex::Regex;

fn golden(name: &str) -> String {
    std::fs::read_to_string(golden_dir().join(name)).unwrap()
}

/// Golden prompts store double quotes escaped as `\"`.
fn unescape_quotes(text: &str) -> String {
    text.replace("\\\"", "\"")
}

fn shipped(id: TemplateId) -> String {
    TemplateSet::default().get(id).body().to_string()
}

#[test]
fn plain_templates_match_goldens_verbatim() {
    let cases = [
        ("prompt1_verbal_confidence.txt", TemplateId::VerbalConfidence),
        ("prompt2_verdict_token.txt", TemplateId::VerdictToken),
        ("prompt4_targeted_query.txt", TemplateId::TargetedQuery),
        ("prompt5_reflection_query.txt", TemplateId::ReflectionQuery),
        ("prompt6_deep_verdict.txt", TemplateId::DeepVerdict),
    ];
    for (file, id) in cases {
        let expected = unescape_quotes(&golden(file));
        assert_eq!(shipped(id), expected.trim_end_matches('\n'), "{id} differs from {file}");
    }
}

/// Concatenate the adjacent string literals of one entry of the golden
/// rationale dictionary.
fn rationale_literal(source: &str, key: &str) -> String {
    let entry = Regex::new(&format!(r#"(?s)"{key}":\s*\((.*?)\),"#)).unwrap();
    let body = &entry.captures(source).unwrap()[1];
    let literal = Regex::new(r#""((?:[^"\\]|\\.)*)""#).unwrap();
    literal
        .captures_iter(body)
        .map(|c| c[1].to_string())
        .collect::<String>()
        .replace("\\n", "\n")
        .replace("\\\"", "\"")
}

#[test]
fn rationale_templates_match_golden_dictionary() {
    let source = golden("prompt3_reasoning_consistency.txt");
    assert_eq!(shipped(TemplateId::RationaleTrue), rationale_literal(&source, "true"));
    assert_eq!(shipped(TemplateId::RationaleFalse), rationale_literal(&source, "false"));
}

#[test]
fn shipped_files_match_builtin_defaults() {
    let from_disk = TemplateSet::load_dir(&templates_dir()).unwrap();
    assert_eq!(from_disk.digest(), TemplateSet::default().digest());
}

#[test]
fn rendering_resolves_escaped_braces_and_labels() {
    let set = TemplateSet::default();
    let text = set
        .render(TemplateId::DeepVerdict, &[("statement", DEEP)])
        .unwrap();
    assert!(text.contains("{\n    \"final_answer\": \"True\" or \"False\"\n}"));
    assert!(text.ends_with(&format!("STATEMENT:\n{DEEP}")));
    assert!(!text.contains("PLACEHOLDER"));

    let text = set
        .render(TemplateId::TargetedQuery, &[("premise", "p {x}"), ("hypothesis", "h")])
        .unwrap();
    assert!(text.contains("Premise: \"p {x}\""));

    let relabeled = TemplateSet::default().with_labels("Factual", "Non-factual");
    let text = relabeled
        .render(TemplateId::VerbalConfidence, &[("statement", DIRECT)])
        .unwrap();
    assert!(text.contains("either \"Factual\" or \"Non-factual\""));
    assert!(text.contains("{\n  \"final_answer\""));
}

#[test]
fn every_template_renders_with_its_placeholders() {
    let set = TemplateSet::default();
    for id in TemplateId::ALL {
        let names: HashMap<String, String> = set
            .get(id)
            .placeholders()
            .into_iter()
            .map(|p| (p.to_string(), format!("<{p}>")))
            .collect();
        let text = set.get(id).render(&names).unwrap();
        for value in names.values() {
            assert!(text.contains(value.as_str()), "{id} dropped {value}");
        }
        assert!(set.get(id).render(&HashMap::new()).is_err() || names.is_empty());
    }
}
