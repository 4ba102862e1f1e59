//! Per-claim scoring and the four verification procedures.

use std::collections::BTreeMap;
use std::future::Future;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{BackendError, Backends, CallLedger, EvidenceSnippet, Side};
use crate::datasets::Claim;
use crate::label::Label;
use crate::prompts::{PromptError, TemplateId};
use crate::router::{route, RoutingThresholds, Strategy};
use crate::signals::{
    aggregate_class_probabilities, certainty_with_policy, log_margin, logistic_margin,
    most_contradictory_pair, reasoning_consistency, ConfidenceSignals, ContradictionMatrix,
    DegeneratePolicy, RationaleSet, SignalError, VerdictLexicon,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k_rationales: usize,
    pub thresholds: RoutingThresholds,
    pub deep_budget: usize,
    pub search_k: usize,
    pub lexicon: VerdictLexicon,
    pub degenerate_policy: DegeneratePolicy,
    pub margin_scale: f64,
    /// Also elicit a verbalized confidence per claim.
    pub verbal: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_rationales: 3,
            thresholds: RoutingThresholds::default(),
            deep_budget: 3,
            search_k: 5,
            lexicon: VerdictLexicon::default(),
            degenerate_policy: DegeneratePolicy::Zero,
            margin_scale: 1.0,
            verbal: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerbalConfidence {
    pub confidence: f64,
    pub predicted: Option<Label>,
}

/// Everything the consistency stage produced for one claim.
#[derive(Debug, Clone)]
pub struct ScoredClaim {
    pub signals: ConfidenceSignals,
    pub rationales: RationaleSet,
    pub matrix: ContradictionMatrix,
    pub degenerate: bool,
    pub verbal: Option<VerbalConfidence>,
    pub warnings: Vec<String>,
    pub ledger: CallLedger,
}

/// One line of `score` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub id: String,
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    pub certainty: f64,
    pub consistency: f64,
    pub pcc: f64,
    pub p_true: f64,
    pub p_false: f64,
    pub margin: f64,
    pub certainty_logistic: f64,
    /// Verdict implied by the class probabilities.
    pub predicted: Label,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbal_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbal_predicted: Option<Label>,
    pub llm_calls: usize,
    pub nli_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub claim_id: String,
    pub claim: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    /// Absent when the claim could not be verified.
    pub verdict: Option<Label>,
    pub strategy: Strategy,
    pub signals: ConfidenceSignals,
    pub queries: Vec<String>,
    pub evidence: Vec<EvidenceSnippet>,
    pub llm_calls: usize,
    pub search_calls: usize,
    pub nli_calls: usize,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl VerificationResult {
    fn new(claim: &Claim, strategy: Strategy, signals: ConfidenceSignals) -> Self {
        Self {
            claim_id: claim.id.clone(),
            claim: claim.text.clone(),
            gold: claim.gold,
            verdict: None,
            strategy,
            signals,
            queries: Vec::new(),
            evidence: Vec::new(),
            llm_calls: 0,
            search_calls: 0,
            nli_calls: 0,
            iterations: 0,
            warnings: Vec::new(),
            error: None,
            correct: None,
        }
    }

    fn finish(mut self, verdict: Option<Label>, ledger: &CallLedger) -> Self {
        self.verdict = verdict;
        self.llm_calls = ledger.llm_calls;
        self.search_calls = ledger.search_calls;
        self.nli_calls = ledger.nli_calls;
        self.correct = match (verdict, self.gold) {
            (Some(v), Some(g)) => Some(v == g),
            _ => None,
        };
        self
    }
}

/// A claim that failed before producing a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimFailure {
    pub claim_id: String,
    pub error: String,
}

/// Every strategy's verdict on one claim, for threshold calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub id: String,
    pub gold: Option<Label>,
    pub certainty: f64,
    pub consistency: f64,
    pub outcomes: BTreeMap<Strategy, Option<Label>>,
}

/// Parse the first JSON object in `text`: the whole text, else the span
/// from the first `{` to the last `}`.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let trimmed = text.trim();
    if let Ok(Value::Object(map)) = serde_json::from_str(trimmed) {
        return Some(map);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&trimmed[start..=end]) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

fn json_string_field(text: &str, field: &str) -> Option<String> {
    extract_json_object(text)?
        .get(field)?
        .as_str()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Whether `needle` occurs in `haystack` delimited by non-alphanumerics.
fn contains_word(haystack: &str, needle: &str) -> bool {
    let haystack = haystack.to_lowercase();
    let needle = needle.to_lowercase();
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(&needle).any(|(at, _)| {
        let before = haystack[..at].chars().next_back();
        let after = haystack[at + needle.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Trim whitespace and one layer of surrounding quotes from a generated query.
pub fn clean_query(raw: &str) -> String {
    let t = raw.trim();
    let t = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .or_else(|| t.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')))
        .unwrap_or(t);
    t.trim().to_string()
}

/// Numbered evidence lines, `[n] title \u{2014} snippet (url)`.
pub fn evidence_lines(evidence: &[EvidenceSnippet]) -> String {
    evidence
        .iter()
        .enumerate()
        .map(|(i, e)| format!("[{}] {} \u{2014} {} ({})", i + 1, e.title, e.snippet, e.url))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn evidence_block(evidence: &[EvidenceSnippet]) -> String {
    if evidence.is_empty() {
        "EVIDENCE:\nno evidence found".to_string()
    } else {
        format!("EVIDENCE:\n{}", evidence_lines(evidence))
    }
}

const JSON_REMINDER: &str = "\n\nRespond with only the JSON object.";

pub struct Verifier {
    pub backends: Backends,
    pub config: PipelineConfig,
}

impl Verifier {
    pub fn new(backends: Backends, config: PipelineConfig) -> Self {
        Self { backends, config }
    }

    fn label_from_answer(&self, answer: &str) -> Option<Label> {
        let t = &self.backends.templates;
        let answer = answer.trim();
        if answer.eq_ignore_ascii_case(t.factual_label()) {
            Some(Label::True)
        } else if answer.eq_ignore_ascii_case(t.non_factual_label()) {
            Some(Label::False)
        } else {
            None
        }
    }

    /// Exactly one of the two labels appears as a word.
    fn scan_for_label(&self, text: &str) -> Option<Label> {
        let t = &self.backends.templates;
        match (
            contains_word(text, t.factual_label()),
            contains_word(text, t.non_factual_label()),
        ) {
            (true, false) => Some(Label::True),
            (false, true) => Some(Label::False),
            _ => None,
        }
    }

    /// Certainty, consistency and their combination for one claim.
    /// Costs `1 + 2K` LLM calls and `2K^2` NLI calls.
    pub async fn score(&self, claim: &Claim) -> Result<ScoredClaim, PipelineError> {
        let mut ledger = CallLedger::default();
        let mut warnings = Vec::new();
        let cfg = &self.config;
        let b = &self.backends;

        let dist = b.verdict_distribution(&mut ledger, &claim.text).await?;
        let probs = aggregate_class_probabilities(&dist, &cfg.lexicon);
        let outcome = certainty_with_policy(&dist, &cfg.lexicon, cfg.degenerate_policy)?;
        if outcome.degenerate {
            warnings.push("degenerate verdict distribution; certainty set to 0".to_string());
        }

        let k = cfg.k_rationales;
        let supporting = b.rationales(&mut ledger, &claim.text, Side::Supporting, k).await?;
        let refuting = b.rationales(&mut ledger, &claim.text, Side::Refuting, k).await?;
        let rationales = RationaleSet::new(supporting, refuting)?;

        let mut forward = vec![vec![0.0; k]; k];
        let mut backward = vec![vec![0.0; k]; k];
        for (i, pos) in rationales.supporting().iter().enumerate() {
            for (j, neg) in rationales.refuting().iter().enumerate() {
                forward[i][j] = b.nli_classify(&mut ledger, pos, neg).await?.contradiction;
                backward[i][j] = b.nli_classify(&mut ledger, neg, pos).await?.contradiction;
            }
        }
        let matrix = ContradictionMatrix::from_directional(forward, backward)?;
        let consistency = reasoning_consistency(&matrix).clamp(0.0, 1.0);
        let signals = ConfidenceSignals::new(outcome.certainty, consistency, probs.p_true, probs.p_false)?
            .with_margin(log_margin(probs.p_true, probs.p_false));

        let verbal = if cfg.verbal {
            let v = self.verbal_confidence(&mut ledger, claim).await?;
            if v.is_none() {
                warnings.push("verbal confidence response could not be parsed".to_string());
            }
            v
        } else {
            None
        };

        Ok(ScoredClaim {
            signals,
            rationales,
            matrix,
            degenerate: outcome.degenerate,
            verbal,
            warnings,
            ledger,
        })
    }

    async fn verbal_confidence(
        &self,
        ledger: &mut CallLedger,
        claim: &Claim,
    ) -> Result<Option<VerbalConfidence>, PipelineError> {
        let prompt = self
            .backends
            .templates
            .render(TemplateId::VerbalConfidence, &[("statement", &claim.text)])?;
        let text = self.backends.generate(ledger, &prompt, 0).await?;
        let Some(obj) = extract_json_object(&text) else {
            return Ok(None);
        };
        let confidence = match obj.get("confidence") {
            Some(Value::Number(n)) => n.as_f64(),
            Some(Value::String(s)) => s.trim().parse().ok(),
            _ => None,
        };
        Ok(confidence
            .filter(|c| (0.0..=1.0).contains(c))
            .map(|confidence| VerbalConfidence {
                confidence,
                predicted: obj
                    .get("final_answer")
                    .and_then(Value::as_str)
                    .and_then(|a| self.label_from_answer(a)),
            }))
    }

    pub fn signal_record(&self, claim: &Claim, scored: &ScoredClaim) -> SignalRecord {
        let s = &scored.signals;
        SignalRecord {
            id: claim.id.clone(),
            claim: claim.text.clone(),
            gold: claim.gold,
            certainty: s.certainty,
            consistency: s.consistency,
            pcc: s.pcc,
            p_true: s.class_prob_true,
            p_false: s.class_prob_false,
            margin: s.margin.unwrap_or_else(|| log_margin(s.class_prob_true, s.class_prob_false)),
            certainty_logistic: logistic_margin(
                s.class_prob_true,
                s.class_prob_false,
                self.config.margin_scale,
            ),
            predicted: s.parametric_verdict(),
            degenerate: scored.degenerate,
            verbal_confidence: scored.verbal.map(|v| v.confidence),
            verbal_predicted: scored.verbal.and_then(|v| v.predicted),
            llm_calls: scored.ledger.llm_calls,
            nli_calls: scored.ledger.nli_calls,
        }
    }

    /// Verdict from the stored distribution; no backend calls.
    pub fn direct_answer(&self, claim: &Claim, signals: &ConfidenceSignals, ledger: &CallLedger) -> VerificationResult {
        VerificationResult::new(claim, Strategy::DirectAnswer, *signals)
            .finish(Some(signals.parametric_verdict()), ledger)
    }

    /// Evidence-conditioned verdict: evidence block, blank line, verdict prompt.
    async fn verdict_with_evidence(
        &self,
        ledger: &mut CallLedger,
        claim: &Claim,
        evidence: &[EvidenceSnippet],
        warnings: &mut Vec<String>,
    ) -> Result<Option<Label>, PipelineError> {
        let body = self
            .backends
            .templates
            .render(TemplateId::DeepVerdict, &[("statement", &claim.text)])?;
        let prompt = format!("{}\n\n{}", evidence_block(evidence), body);
        let first = self.backends.generate(ledger, &prompt, 0).await?;
        if let Some(label) = json_string_field(&first, "final_answer").and_then(|a| self.label_from_answer(&a)) {
            return Ok(Some(label));
        }
        let retry = self
            .backends
            .generate(ledger, &format!("{prompt}{JSON_REMINDER}"), 1)
            .await?;
        if let Some(label) = json_string_field(&retry, "final_answer").and_then(|a| self.label_from_answer(&a)) {
            return Ok(Some(label));
        }
        match self.scan_for_label(&retry) {
            Some(label) => {
                warnings.push("verdict recovered by label scan".to_string());
                Ok(Some(label))
            }
            None => {
                warnings.push("verdict could not be parsed; claim unverified".to_string());
                Ok(None)
            }
        }
    }

    pub async fn targeted_contradiction(
        &self,
        claim: &Claim,
        signals: &ConfidenceSignals,
        matrix: &ContradictionMatrix,
        rationales: &RationaleSet,
        ledger: &mut CallLedger,
    ) -> Result<VerificationResult, PipelineError> {
        let mut result = VerificationResult::new(claim, Strategy::TargetedContradiction, *signals);
        let (i, j) = most_contradictory_pair(matrix);
        let prompt = self.backends.templates.render(
            TemplateId::TargetedQuery,
            &[
                ("premise", &rationales.supporting()[i]),
                ("hypothesis", &rationales.refuting()[j]),
            ],
        )?;
        let mut query = clean_query(&self.backends.generate(ledger, &prompt, 0).await?);
        if query.is_empty() {
            result.warnings.push("empty generated query; searching the claim text".to_string());
            query = claim.text.clone();
        }
        let evidence = self
            .backends
            .web_search(ledger, &query, self.config.search_k)
            .await?;
        result.queries.push(query);
        if evidence.is_empty() {
            result.warnings.push("search returned no evidence".to_string());
        }
        let verdict = self
            .verdict_with_evidence(ledger, claim, &evidence, &mut result.warnings)
            .await?;
        result.evidence = evidence;
        Ok(result.finish(verdict, ledger))
    }

    pub async fn targeted_reflection(
        &self,
        claim: &Claim,
        signals: &ConfidenceSignals,
        ledger: &mut CallLedger,
    ) -> Result<VerificationResult, PipelineError> {
        let mut result = VerificationResult::new(claim, Strategy::TargetedReflection, *signals);
        let prompt = self
            .backends
            .templates
            .render(TemplateId::ReflectionQuery, &[("statement", &claim.text)])?;
        let mut query = json_string_field(&self.backends.generate(ledger, &prompt, 0).await?, "search_query");
        if query.is_none() {
            let retry = self
                .backends
                .generate(ledger, &format!("{prompt}{JSON_REMINDER}"), 1)
                .await?;
            query = json_string_field(&retry, "search_query");
        }
        let Some(query) = query else {
            result.error = Some(
                "QueryParseError: reflection response lacks a search_query field after one reprompt"
                    .to_string(),
            );
            return Ok(result.finish(None, ledger));
        };
        let evidence = self
            .backends
            .web_search(ledger, &query, self.config.search_k)
            .await?;
        result.queries.push(query);
        if evidence.is_empty() {
            result.warnings.push("search returned no evidence".to_string());
        }
        let verdict = self
            .verdict_with_evidence(ledger, claim, &evidence, &mut result.warnings)
            .await?;
        result.evidence = evidence;
        Ok(result.finish(verdict, ledger))
    }

    /// Query, retrieve and assess sufficiency for at most `budget` rounds,
    /// then issue an evidence-conditioned verdict.
    pub async fn deep_search(
        &self,
        claim: &Claim,
        signals: &ConfidenceSignals,
        budget: usize,
        ledger: &mut CallLedger,
    ) -> Result<VerificationResult, PipelineError> {
        let budget = budget.max(1);
        let mut result = VerificationResult::new(claim, Strategy::DeepSearch, *signals);
        let mut evidence: Vec<EvidenceSnippet> = Vec::new();
        let mut sufficient = false;
        let templates = &self.backends.templates;

        while result.iterations < budget && !sufficient {
            result.iterations += 1;
            let gathered = if evidence.is_empty() {
                "none".to_string()
            } else {
                evidence_lines(&evidence)
            };
            let prompt = templates.render(
                TemplateId::DeepQuery,
                &[("statement", &claim.text), ("evidence", &gathered)],
            )?;
            let mut query = clean_query(&self.backends.generate(ledger, &prompt, 0).await?);
            if query.is_empty() {
                result.warnings.push("empty generated query; searching the claim text".to_string());
                query = claim.text.clone();
            }
            let hits = self
                .backends
                .web_search(ledger, &query, self.config.search_k)
                .await?;
            result.queries.push(query);
            for hit in hits {
                if !evidence.iter().any(|e| e.url == hit.url && e.snippet == hit.snippet) {
                    evidence.push(hit);
                }
            }

            let prompt = templates.render(
                TemplateId::DeepSufficiency,
                &[("statement", &claim.text), ("evidence", &evidence_lines(&evidence))],
            )?;
            let answer = self.backends.generate(ledger, &prompt, 0).await?;
            sufficient = match json_string_field(&answer, "assessment") {
                Some(a) => a.eq_ignore_ascii_case("sufficient"),
                None => {
                    result.warnings.push(format!(
                        "unparseable sufficiency answer in iteration {}",
                        result.iterations
                    ));
                    false
                }
            };
        }
        if !sufficient {
            result.warnings.push("deep-search budget exhausted".to_string());
        }
        if evidence.is_empty() {
            result.warnings.push("search returned no evidence".to_string());
        }
        let verdict = self
            .verdict_with_evidence(ledger, claim, &evidence, &mut result.warnings)
            .await?;
        result.evidence = evidence;
        Ok(result.finish(verdict, ledger))
    }

    async fn run_strategy(
        &self,
        strategy: Strategy,
        claim: &Claim,
        scored: &ScoredClaim,
        ledger: &mut CallLedger,
    ) -> Result<VerificationResult, PipelineError> {
        let s = &scored.signals;
        match strategy {
            Strategy::DirectAnswer => Ok(self.direct_answer(claim, s, ledger)),
            Strategy::TargetedContradiction => {
                self.targeted_contradiction(claim, s, &scored.matrix, &scored.rationales, ledger)
                    .await
            }
            Strategy::TargetedReflection => self.targeted_reflection(claim, s, ledger).await,
            Strategy::DeepSearch => {
                self.deep_search(claim, s, self.config.deep_budget, ledger)
                    .await
            }
        }
    }

    /// Score, route and run the selected strategy. Counters cover the whole
    /// claim, scoring included.
    pub async fn verify(&self, claim: &Claim) -> Result<VerificationResult, PipelineError> {
        let scored = self.score(claim).await?;
        let strategy = route(&scored.signals, &self.config.thresholds);
        let mut ledger = scored.ledger;
        let mut result = self.run_strategy(strategy, claim, &scored, &mut ledger).await?;
        let mut warnings = scored.warnings.clone();
        warnings.append(&mut result.warnings);
        result.warnings = warnings;
        Ok(result)
    }

    /// Score once and run every strategy on the same signals.
    pub async fn verify_all_strategies(&self, claim: &Claim) -> Result<OutcomeRecord, PipelineError> {
        let scored = self.score(claim).await?;
        let mut outcomes = BTreeMap::new();
        for strategy in Strategy::ALL {
            let mut ledger = CallLedger::default();
            let result = self.run_strategy(strategy, claim, &scored, &mut ledger).await?;
            outcomes.insert(strategy, result.verdict);
        }
        Ok(OutcomeRecord {
            id: claim.id.clone(),
            gold: claim.gold,
            certainty: scored.signals.certainty,
            consistency: scored.signals.consistency,
            outcomes,
        })
    }
}

/// Apply `f` to every item with at most `parallelism` in flight; outputs
/// keep input order.
pub async fn run_ordered<'a, T, R, F, Fut>(items: &'a [T], parallelism: usize, f: F) -> Vec<R>
where
    F: Fn(&'a T) -> Fut,
    Fut: Future<Output = R>,
{
    stream::iter(items.iter().map(f))
        .buffered(parallelism.max(1))
        .collect()
        .await
}
