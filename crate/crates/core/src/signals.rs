//! Confidence signals computed from raw backend outputs.
//!
//! Internal certainty is read off the verdict-token distribution, reasoning
//! consistency off the NLI contradiction grid between rationales written
//! under opposite assumptions, and the two are merged by a harmonic mean.
//! Everything here is a pure function.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::Label;

/// Tolerance on the total mass of a (possibly truncated) distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;
/// Smoothing added to class probabilities before taking logs.
pub const MARGIN_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("token distribution is empty")]
    EmptyDistribution,
    #[error("token probability {prob} for {token:?} is outside [0, 1]")]
    ProbabilityOutOfRange { token: String, prob: f64 },
    #[error("token distribution mass {0} exceeds 1")]
    ExcessMass(f64),
    #[error("verdict lexicon sets must be non-empty and disjoint")]
    InvalidLexicon,
    #[error("no verdict token found in the distribution")]
    DegenerateDistribution,
    #[error("rationale sets must have the same non-zero length and no empty texts")]
    InvalidRationales,
    #[error("contradiction matrix must be a non-empty square grid with entries in [0, 1]")]
    InvalidMatrix,
    #[error("signal value {0} is outside [0, 1]")]
    OutOfRange(f64),
}

/// Next-token distribution at the verdict position, sorted by descending
/// probability. Ties keep their input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<(String, f64)>,
}

impl TokenDistribution {
    pub fn new(mut entries: Vec<(String, f64)>) -> Result<Self, SignalError> {
        if entries.is_empty() {
            return Err(SignalError::EmptyDistribution);
        }
        let mut mass = 0.0;
        for (token, prob) in &entries {
            if !(0.0..=1.0).contains(prob) {
                return Err(SignalError::ProbabilityOutOfRange {
                    token: token.clone(),
                    prob: *prob,
                });
            }
            mass += prob;
        }
        if mass > 1.0 + MASS_TOLERANCE {
            return Err(SignalError::ExcessMass(mass));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The two most probable tokens, if the distribution has two entries.
    pub fn top_two(&self) -> Option<(&str, &str)> {
        match self.entries.as_slice() {
            [first, second, ..] => Some((first.0.as_str(), second.0.as_str())),
            _ => None,
        }
    }
}

/// Strip surrounding whitespace and case-fold.
pub fn normalize_token(token: &str) -> String {
    token.trim().to_lowercase()
}

/// Disjoint token sets that signal a True or a False verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LexiconSpec", into = "LexiconSpec")]
pub struct VerdictLexicon {
    true_tokens: BTreeSet<String>,
    false_tokens: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct LexiconSpec {
    true_tokens: Vec<String>,
    false_tokens: Vec<String>,
}

impl TryFrom<LexiconSpec> for VerdictLexicon {
    type Error = SignalError;

    fn try_from(spec: LexiconSpec) -> Result<Self, Self::Error> {
        VerdictLexicon::new(spec.true_tokens, spec.false_tokens)
    }
}

impl From<VerdictLexicon> for LexiconSpec {
    fn from(lexicon: VerdictLexicon) -> Self {
        LexiconSpec {
            true_tokens: lexicon.true_tokens.into_iter().collect(),
            false_tokens: lexicon.false_tokens.into_iter().collect(),
        }
    }
}

impl VerdictLexicon {
    pub fn new<I, J, S, T>(true_tokens: I, false_tokens: J) -> Result<Self, SignalError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let true_tokens: BTreeSet<String> = true_tokens
            .into_iter()
            .map(|t| normalize_token(t.as_ref()))
            .collect();
        let false_tokens: BTreeSet<String> = false_tokens
            .into_iter()
            .map(|t| normalize_token(t.as_ref()))
            .collect();
        if true_tokens.is_empty()
            || false_tokens.is_empty()
            || !true_tokens.is_disjoint(&false_tokens)
        {
            return Err(SignalError::InvalidLexicon);
        }
        Ok(Self {
            true_tokens,
            false_tokens,
        })
    }

    /// Verdict class of a raw token, after normalization.
    pub fn classify(&self, token: &str) -> Option<Label> {
        let token = normalize_token(token);
        if self.true_tokens.contains(&token) {
            Some(Label::True)
        } else if self.false_tokens.contains(&token) {
            Some(Label::False)
        } else {
            None
        }
    }

    pub fn true_tokens(&self) -> impl Iterator<Item = &str> {
        self.true_tokens.iter().map(String::as_str)
    }

    pub fn false_tokens(&self) -> impl Iterator<Item = &str> {
        self.false_tokens.iter().map(String::as_str)
    }
}

impl Default for VerdictLexicon {
    fn default() -> Self {
        Self::new(["true", "yes"], ["false", "no"]).expect("default lexicon is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub p_true: f64,
    pub p_false: f64,
}

/// Sum the raw probability mass of each verdict class. No renormalization
/// over the visible top-k.
pub fn aggregate_class_probabilities(
    dist: &TokenDistribution,
    lexicon: &VerdictLexicon,
) -> ClassProbabilities {
    let mut p_true = 0.0;
    let mut p_false = 0.0;
    for (token, prob) in dist.entries() {
        match lexicon.classify(token) {
            Some(Label::True) => p_true += prob,
            Some(Label::False) => p_false += prob,
            None => {}
        }
    }
    ClassProbabilities { p_true, p_false }
}

/// Internal certainty of the verdict token.
///
/// 1 when the two most probable tokens belong to the same verdict class,
/// otherwise the absolute gap between the aggregated class probabilities.
pub fn internal_certainty(
    dist: &TokenDistribution,
    lexicon: &VerdictLexicon,
) -> Result<f64, SignalError> {
    let probs = aggregate_class_probabilities(dist, lexicon);
    let top_classes = dist
        .top_two()
        .map(|(a, b)| (lexicon.classify(a), lexicon.classify(b)));

    if let Some((Some(a), Some(b))) = top_classes {
        if a == b {
            return Ok(1.0);
        }
    }

    if probs.p_true == 0.0 && probs.p_false == 0.0 {
        let first_is_verdict = lexicon.classify(&dist.entries()[0].0).is_some();
        let second_is_verdict = matches!(top_classes, Some((_, Some(_))));
        if !first_is_verdict && !second_is_verdict {
            return Err(SignalError::DegenerateDistribution);
        }
    }
    Ok((probs.p_true - probs.p_false).abs().min(1.0))
}

/// What to do when the verdict prompt yields no verdict token at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneratePolicy {
    /// Treat as maximal uncertainty (certainty 0) and flag it.
    #[default]
    Zero,
    /// Surface [`SignalError::DegenerateDistribution`].
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertaintyOutcome {
    pub certainty: f64,
    pub degenerate: bool,
}

pub fn certainty_with_policy(
    dist: &TokenDistribution,
    lexicon: &VerdictLexicon,
    policy: DegeneratePolicy,
) -> Result<CertaintyOutcome, SignalError> {
    match internal_certainty(dist, lexicon) {
        Ok(certainty) => Ok(CertaintyOutcome {
            certainty,
            degenerate: false,
        }),
        Err(SignalError::DegenerateDistribution) if policy == DegeneratePolicy::Zero => {
            tracing::warn!("degenerate verdict distribution; certainty set to 0");
            Ok(CertaintyOutcome {
                certainty: 0.0,
                degenerate: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// Log-probability margin `ln(p_true + eps) - ln(p_false + eps)`.
pub fn log_margin(p_true: f64, p_false: f64) -> f64 {
    (p_true + MARGIN_EPSILON).ln() - (p_false + MARGIN_EPSILON).ln()
}

/// Logistic squashing of the log-probability margin, `1 / (1 + exp(-m / scale))`.
pub fn logistic_margin(p_true: f64, p_false: f64, scale: f64) -> f64 {
    let m = log_margin(p_true, p_false);
    1.0 / (1.0 + (-m / scale).exp())
}

/// `K` rationales written assuming the claim is true and `K` assuming it is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleSet {
    supporting: Vec<String>,
    refuting: Vec<String>,
}

impl RationaleSet {
    pub fn new(supporting: Vec<String>, refuting: Vec<String>) -> Result<Self, SignalError> {
        if supporting.is_empty()
            || supporting.len() != refuting.len()
            || supporting.iter().chain(&refuting).any(|r| r.is_empty())
        {
            return Err(SignalError::InvalidRationales);
        }
        Ok(Self {
            supporting,
            refuting,
        })
    }

    pub fn k(&self) -> usize {
        self.supporting.len()
    }

    pub fn supporting(&self) -> &[String] {
        &self.supporting
    }

    pub fn refuting(&self) -> &[String] {
        &self.refuting
    }
}

/// Cross-assumption contradiction grid. `forward[i][j]` is the contradiction
/// probability of (supporting i -> refuting j), `backward[i][j]` of
/// (refuting j -> supporting i).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContradictionMatrix {
    pair_scores: Vec<Vec<f64>>,
    forward: Vec<Vec<f64>>,
    backward: Vec<Vec<f64>>,
}

fn check_grid(grid: &[Vec<f64>]) -> Result<usize, SignalError> {
    let k = grid.len();
    if k == 0 {
        return Err(SignalError::InvalidMatrix);
    }
    for row in grid {
        if row.len() != k || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SignalError::InvalidMatrix);
        }
    }
    Ok(k)
}

impl ContradictionMatrix {
    pub fn from_directional(
        forward: Vec<Vec<f64>>,
        backward: Vec<Vec<f64>>,
    ) -> Result<Self, SignalError> {
        let k = check_grid(&forward)?;
        if check_grid(&backward)? != k {
            return Err(SignalError::InvalidMatrix);
        }
        let pair_scores = forward
            .iter()
            .zip(&backward)
            .map(|(f, b)| f.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect())
            .collect();
        Ok(Self {
            pair_scores,
            forward,
            backward,
        })
    }

    /// Matrix whose two directions agree, so `pair_scores == scores`.
    pub fn symmetric(scores: Vec<Vec<f64>>) -> Result<Self, SignalError> {
        Self::from_directional(scores.clone(), scores)
    }

    pub fn k(&self) -> usize {
        self.pair_scores.len()
    }

    pub fn pair_scores(&self) -> &[Vec<f64>] {
        &self.pair_scores
    }

    pub fn forward(&self) -> &[Vec<f64>] {
        &self.forward
    }

    pub fn backward(&self) -> &[Vec<f64>] {
        &self.backward
    }

    /// Swap the roles of the two rationale sets.
    pub fn transposed(&self) -> Self {
        let t = |g: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..g.len())
                .map(|i| (0..g.len()).map(|j| g[j][i]).collect())
                .collect()
        };
        Self::from_directional(t(&self.backward), t(&self.forward))
            .expect("transpose of a valid matrix is valid")
    }
}

/// One minus the mean symmetrized contradiction over all `K^2` pairs.
pub fn reasoning_consistency(matrix: &ContradictionMatrix) -> f64 {
    let k = matrix.k() as f64;
    let total: f64 = matrix.pair_scores().iter().flatten().sum();
    1.0 - total / (k * k)
}

/// Harmonic mean of certainty and consistency; 0 when both are 0.
pub fn combine_pcc(certainty: f64, consistency: f64) -> f64 {
    let sum = certainty + consistency;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * certainty * consistency / sum
    }
}

/// Indices of the largest pair score; ties go to the smallest `(i, j)`.
pub fn most_contradictory_pair(matrix: &ContradictionMatrix) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for (i, row) in matrix.pair_scores().iter().enumerate() {
        for (j, &score) in row.iter().enumerate() {
            if score > best_score {
                best_score = score;
                best = (i, j);
            }
        }
    }
    best
}

/// Router input: certainty, consistency and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSignals {
    pub certainty: f64,
    pub consistency: f64,
    pub pcc: f64,
    pub class_prob_true: f64,
    pub class_prob_false: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

impl ConfidenceSignals {
    pub fn new(
        certainty: f64,
        consistency: f64,
        class_prob_true: f64,
        class_prob_false: f64,
    ) -> Result<Self, SignalError> {
        for v in [certainty, consistency] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SignalError::OutOfRange(v));
            }
        }
        Ok(Self {
            certainty,
            consistency,
            pcc: combine_pcc(certainty, consistency),
            class_prob_true,
            class_prob_false,
            margin: None,
        })
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = Some(margin);
        self
    }

    /// Parametric verdict: argmax of the class probabilities, ties to False.
    pub fn parametric_verdict(&self) -> Label {
        if self.class_prob_true > self.class_prob_false {
            Label::True
        } else {
            Label::False
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(entries: &[(&str, f64)]) -> TokenDistribution {
        TokenDistribution::new(entries.iter().map(|(t, p)| (t.to_string(), *p)).collect())
            .unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn class_probabilities_sum_case_folded_tokens() {
        let lex = VerdictLexicon::default();
        let d = dist(&[("True", 0.5), ("true", 0.2), ("the", 0.2), ("False", 0.1)]);
        let p = aggregate_class_probabilities(&d, &lex);
        assert!(close(p.p_true, 0.7) && close(p.p_false, 0.1));

        let p = aggregate_class_probabilities(&dist(&[("banana", 1.0)]), &lex);
        assert_eq!((p.p_true, p.p_false), (0.0, 0.0));

        let p = aggregate_class_probabilities(&dist(&[("False", 0.6), ("FALSE", 0.3)]), &lex);
        assert!(close(p.p_true, 0.0) && close(p.p_false, 0.9));
    }

    #[test]
    fn whitespace_is_stripped_before_lookup() {
        let lex = VerdictLexicon::default();
        let p = aggregate_class_probabilities(&dist(&[(" True", 0.4), ("\nno ", 0.3)]), &lex);
        assert!(close(p.p_true, 0.4) && close(p.p_false, 0.3));
    }

    #[test]
    fn certainty_cases() {
        let lex = VerdictLexicon::default();
        assert_eq!(
            internal_certainty(&dist(&[("True", 0.6), ("true", 0.25)]), &lex).unwrap(),
            1.0
        );
        let tau = internal_certainty(&dist(&[("True", 0.7), ("False", 0.3)]), &lex).unwrap();
        assert!((tau - 0.4).abs() < 1e-12);
        let tau = internal_certainty(&dist(&[("True", 0.5), ("False", 0.5)]), &lex).unwrap();
        assert_eq!(tau, 0.0);
    }

    #[test]
    fn single_entry_uses_margin_case() {
        let lex = VerdictLexicon::default();
        let tau = internal_certainty(&dist(&[("True", 0.9)]), &lex).unwrap();
        assert!(close(tau, 0.9));
    }

    #[test]
    fn degenerate_distribution() {
        let lex = VerdictLexicon::default();
        let d = dist(&[("banana", 0.6), ("apple", 0.3)]);
        assert_eq!(
            internal_certainty(&d, &lex),
            Err(SignalError::DegenerateDistribution)
        );
        let out = certainty_with_policy(&d, &lex, DegeneratePolicy::Zero).unwrap();
        assert_eq!(out.certainty, 0.0);
        assert!(out.degenerate);
        assert!(certainty_with_policy(&d, &lex, DegeneratePolicy::Strict).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert_eq!(
            TokenDistribution::new(vec![]),
            Err(SignalError::EmptyDistribution)
        );
        assert!(TokenDistribution::new(vec![("a".into(), 1.2)]).is_err());
        assert!(TokenDistribution::new(vec![("a".into(), 0.7), ("b".into(), 0.7)]).is_err());
        let d = dist(&[("b", 0.2), ("a", 0.5), ("c", 0.2)]);
        let order: Vec<&str> = d.entries().iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn lexicon_validation() {
        assert!(VerdictLexicon::new(["true"], ["TRUE"]).is_err());
        assert!(VerdictLexicon::new(Vec::<String>::new(), ["no"]).is_err());
        let lex: VerdictLexicon =
            serde_json::from_str(r#"{"true_tokens":["Yes"],"false_tokens":["no"]}"#).unwrap();
        assert_eq!(lex.classify("YES"), Some(Label::True));
    }

    #[test]
    fn logistic_examples() {
        assert!(close(logistic_margin(0.4, 0.4, 3.0), 0.5));
        assert!((logistic_margin(0.9, 0.1, 1.0) - 0.9).abs() < 1e-9);
        assert!((logistic_margin(0.1, 0.9, 1.0) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn consistency_examples() {
        let m = ContradictionMatrix::from_directional(vec![vec![0.8]], vec![vec![0.6]]).unwrap();
        assert!(close(m.pair_scores()[0][0], 0.7));
        assert!(close(reasoning_consistency(&m), 0.3));
        let m = ContradictionMatrix::symmetric(vec![vec![0.0; 3]; 3]).unwrap();
        assert_eq!(reasoning_consistency(&m), 1.0);
        let m = ContradictionMatrix::symmetric(vec![vec![0.5; 2]; 2]).unwrap();
        assert!(close(reasoning_consistency(&m), 0.5));
    }

    #[test]
    fn matrix_validation() {
        assert!(ContradictionMatrix::symmetric(vec![]).is_err());
        assert!(ContradictionMatrix::symmetric(vec![vec![0.1, 0.2]]).is_err());
        assert!(ContradictionMatrix::symmetric(vec![vec![1.5]]).is_err());
        assert!(
            ContradictionMatrix::from_directional(vec![vec![0.1]], vec![vec![0.1; 2]; 2]).is_err()
        );
    }

    #[test]
    fn pcc_examples() {
        assert_eq!(combine_pcc(1.0, 1.0), 1.0);
        assert_eq!(combine_pcc(0.0, 0.9), 0.0);
        assert_eq!(combine_pcc(0.0, 0.0), 0.0);
        assert!(close(combine_pcc(0.5, 1.0), 2.0 / 3.0));
    }

    #[test]
    fn contradictory_pair_examples() {
        let m = ContradictionMatrix::symmetric(vec![vec![0.1, 0.9], vec![0.3, 0.2]]).unwrap();
        assert_eq!(most_contradictory_pair(&m), (0, 1));
        let m = ContradictionMatrix::symmetric(vec![vec![0.5]]).unwrap();
        assert_eq!(most_contradictory_pair(&m), (0, 0));
        let m = ContradictionMatrix::symmetric(vec![vec![0.7; 2]; 2]).unwrap();
        assert_eq!(most_contradictory_pair(&m), (0, 0));
    }

    #[test]
    fn rationale_set_validation() {
        assert!(RationaleSet::new(vec!["a".into()], vec!["b".into()]).is_ok());
        assert!(RationaleSet::new(vec![], vec![]).is_err());
        assert!(RationaleSet::new(vec!["a".into()], vec!["b".into(), "c".into()]).is_err());
        assert!(RationaleSet::new(vec!["".into()], vec!["b".into()]).is_err());
    }

    #[test]
    fn signals_reject_out_of_range() {
        assert!(ConfidenceSignals::new(1.1, 0.5, 0.0, 0.0).is_err());
        let s = ConfidenceSignals::new(0.5, 1.0, 0.6, 0.4).unwrap();
        assert!(close(s.pcc, 2.0 / 3.0));
        assert_eq!(s.parametric_verdict(), Label::True);
        let tie = ConfidenceSignals::new(0.0, 1.0, 0.5, 0.5).unwrap();
        assert_eq!(tie.parametric_verdict(), Label::False);
    }

    fn grid(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, k), k)
    }

    proptest! {
        #[test]
        fn consistency_invariant_under_transposition(
            (f, b) in (1usize..5).prop_flat_map(|k| (grid(k), grid(k)))
        ) {
            let m = ContradictionMatrix::from_directional(f, b).unwrap();
            let g1 = reasoning_consistency(&m);
            let g2 = reasoning_consistency(&m.transposed());
            prop_assert!((g1 - g2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&g1));
        }

        #[test]
        fn logistic_is_antisymmetric(p in 0.0f64..=1.0, q in 0.0f64..=1.0, s in 0.01f64..10.0) {
            prop_assume!(p > 0.0 || q > 0.0);
            let sum = logistic_margin(p, q, s) + logistic_margin(q, p, s);
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pair_selection_hits_maximum(g in (1usize..6).prop_flat_map(grid)) {
            let m = ContradictionMatrix::symmetric(g.clone()).unwrap();
            let (i, j) = most_contradictory_pair(&m);
            let max = g.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(g[i][j], max);
        }
    }
}
