#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use confcheck::backends::mock::{LlmRule, MockReply, NliFixture, NliRule, SearchRule};
use confcheck::backends::{
    BackendSettings, Backends, EvidenceSnippet, MockFixture, MockLlm, MockNli, MockSearch, NliScores,
};
use confcheck::datasets::Claim;
use confcheck::prompts::TemplateSet;
use confcheck::Label;

pub const DIRECT: &str = "The Eiffel Tower is located in Paris.";
pub const CONTRA: &str = "Sydney is the capital of Australia.";
pub const REFLECT: &str = "The Great Wall of China is visible from space.";
pub const DEEP: &str = "Marie Curie won three Nobel Prizes.";

pub const VERDICT_MARK: &str = "Return only the name of the label";
pub const SUPPORT_MARK: &str = "Strongly support";
pub const REFUTE_MARK: &str = "Strongly refute";
pub const TARGETED_MARK: &str = "strongly contradict each other";
pub const REFLECT_MARK: &str = "suggest a focused search query";
pub const DEEP_QUERY_MARK: &str = "Write one concise web search query";
pub const SUFFICIENCY_MARK: &str = "\"assessment\"";

pub const CONTRA_QUERY: &str = "capital of Australia Canberra or Sydney";
pub const REFLECT_QUERY: &str = "Great Wall visible from low Earth orbit";
pub const DEEP_QUERIES: [&str; 3] = [
    "Marie Curie Nobel Prizes count",
    "Marie Curie Nobel Prize physics chemistry",
    "Marie Curie third Nobel Prize",
];

pub fn snippet(title: &str, text: &str, rank: usize) -> EvidenceSnippet {
    EvidenceSnippet {
        title: title.into(),
        url: format!("https://example.org/{}", title.to_lowercase().replace(' ', "-")),
        snippet: text.into(),
        rank,
    }
}

pub fn scores(contradiction: f64) -> NliScores {
    let rest = 1.0 - contradiction;
    NliScores {
        entailment: rest / 2.0,
        neutral: rest / 2.0,
        contradiction,
    }
}

pub fn claim(id: &str, text: &str, gold: Option<Label>) -> Claim {
    Claim {
        id: id.into(),
        text: text.into(),
        gold,
        source: "fixture".into(),
        hops: None,
    }
}

pub fn quadrant_claims() -> Vec<Claim> {
    vec![
        claim("q1-direct", DIRECT, Some(Label::True)),
        claim("q2-contradiction", CONTRA, Some(Label::False)),
        claim("q3-reflection", REFLECT, Some(Label::False)),
        claim("q4-deep", DEEP, Some(Label::False)),
    ]
}

fn rationales(tag: &str, side: &str) -> Vec<MockReply> {
    (0..3)
        .map(|i| MockReply::text(format!("{tag}-{side}-{i}: argument number {i} about the claim.")))
        .collect()
}

fn verdict(label: &str) -> MockReply {
    MockReply::text(format!(
        "Reasoning about the statement.\n{{\n    \"final_answer\": \"{label}\"\n}}"
    ))
}

fn scoring_rules(claim: &str, tag: &str, dist: &[(&str, f64)]) -> Vec<LlmRule> {
    vec![
        LlmRule::new([claim, VERDICT_MARK], vec![MockReply::distribution(dist)]),
        LlmRule::new([claim, SUPPORT_MARK], rationales(tag, "sup")),
        LlmRule::new([claim, REFUTE_MARK], rationales(tag, "ref")),
    ]
}

/// Four claims, one per routing quadrant at the default thresholds.
///
/// - direct: certainty 0.92, consistency 0.9
/// - contradiction: certainty 0.85, consistency 0.18, max pair (0, 1)
/// - reflection: certainty 0.10, consistency 0.9
/// - deep: certainty 0.05, consistency 0.3; insufficient, insufficient, sufficient
pub fn quadrant_fixture() -> MockFixture {
    let mut llm = Vec::new();
    llm.extend(scoring_rules(DIRECT, "eiffel", &[("True", 0.95), ("False", 0.03)]));

    llm.extend(scoring_rules(CONTRA, "syd", &[("False", 0.9), ("True", 0.05)]));
    llm.push(LlmRule::new(
        [TARGETED_MARK, "syd-sup-0", "syd-ref-1"],
        vec![MockReply::text(format!("\"{CONTRA_QUERY}\""))],
    ));
    llm.push(LlmRule::new([CONTRA, "EVIDENCE:", "final_answer"], vec![verdict("False")]));

    llm.extend(scoring_rules(REFLECT, "wall", &[("True", 0.45), ("False", 0.40), ("Yes", 0.05)]));
    llm.push(LlmRule::new(
        [REFLECT, REFLECT_MARK],
        vec![MockReply::text(format!("{{\"search_query\": \"{REFLECT_QUERY}\"}}"))],
    ));
    llm.push(LlmRule::new([REFLECT, "EVIDENCE:", "final_answer"], vec![verdict("False")]));

    llm.extend(scoring_rules(DEEP, "curie", &[("False", 0.5), ("True", 0.45)]));
    llm.push(LlmRule::new(
        [DEEP, DEEP_QUERY_MARK],
        DEEP_QUERIES.iter().map(|q| MockReply::text(*q)).collect(),
    ));
    llm.push(LlmRule::new(
        [DEEP, SUFFICIENCY_MARK],
        vec![
            MockReply::text("{\"assessment\": \"insufficient\"}"),
            MockReply::text("{\"assessment\": \"insufficient\"}"),
            MockReply::text("{\"assessment\": \"sufficient\"}"),
        ],
    ));
    llm.push(LlmRule::new([DEEP, "EVIDENCE:", "final_answer"], vec![verdict("False")]));

    let nli = NliFixture {
        rules: vec![
            NliRule::new(Some("syd-sup-0"), Some("syd-ref-1"), scores(0.99)),
            NliRule::new(Some("syd-ref-1"), Some("syd-sup-0"), scores(0.97)),
            NliRule::new(Some("syd-"), None, scores(0.8)),
            NliRule::new(Some("curie-"), None, scores(0.7)),
        ],
        default: scores(0.1),
    };

    let search = vec![
        SearchRule::exact(
            CONTRA_QUERY,
            vec![
                snippet("Canberra", "Canberra is the capital city of Australia.", 1),
                snippet("Sydney", "Sydney is the largest city in Australia.", 2),
            ],
        ),
        SearchRule::exact(
            REFLECT_QUERY,
            vec![snippet("Great Wall myth", "The wall is not visible to the naked eye from orbit.", 1)],
        ),
        SearchRule::exact(
            DEEP_QUERIES[0],
            vec![snippet("Curie prizes", "Curie received two Nobel Prizes.", 1)],
        ),
        SearchRule::exact(
            DEEP_QUERIES[1],
            vec![
                snippet("Physics 1903", "Curie shared the 1903 Nobel Prize in Physics.", 1),
                snippet("Chemistry 1911", "Curie won the 1911 Nobel Prize in Chemistry.", 2),
            ],
        ),
        SearchRule::exact(
            DEEP_QUERIES[2],
            vec![snippet("No third prize", "No person has been awarded a third Curie Nobel.", 1)],
        ),
    ];

    MockFixture { llm, nli, search }
}

/// Backends over mocks, keeping handles for call counting.
pub struct Instrumented {
    pub backends: Backends,
    pub llm: Arc<MockLlm>,
    pub nli: Arc<MockNli>,
    pub search: Arc<MockSearch>,
}

pub fn instrumented(fixture: MockFixture) -> Instrumented {
    let (llm, nli, search) = fixture.into_backends();
    let (llm, nli, search) = (Arc::new(llm), Arc::new(nli), Arc::new(search));
    let backends = Backends::new(
        llm.clone(),
        nli.clone(),
        search.clone(),
        Arc::new(TemplateSet::default()),
        BackendSettings::default(),
    );
    Instrumented {
        backends,
        llm,
        nli,
        search,
    }
}

/// Fixture file, dataset and config for driving the binary.
pub struct CliWorkspace {
    pub dir: tempfile::TempDir,
}

impl CliWorkspace {
    pub fn new(fixture: &MockFixture, claims: &[Claim], extra_config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("mock.json"),
            serde_json::to_string_pretty(fixture).unwrap(),
        )
        .unwrap();
        confcheck::datasets::save_claims(&dir.path().join("claims.jsonl"), claims).unwrap();
        let config = format!(
            "{extra_config}\n\n[llm]\nkind = \"mock\"\nfixture = \"mock.json\"\n\n[nli]\nkind = \"mock\"\nfixture = \"mock.json\"\n\n[search]\nkind = \"mock\"\nfixture = \"mock.json\"\n"
        );
        std::fs::write(dir.path().join("config.toml"), config).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn templates_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("templates")
}
