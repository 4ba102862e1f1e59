//! Quadrant routing of (certainty, consistency) onto a verification strategy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::f1_from_pairs;
use crate::label::Label;
use crate::signals::ConfidenceSignals;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{name} must lie in the open interval (0, 1), got {value}")]
pub struct ThresholdError {
    pub name: &'static str,
    pub value: f64,
}

/// Decision thresholds: `alpha` on certainty, `beta` on consistency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct RoutingThresholds {
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawThresholds> for RoutingThresholds {
    type Error = ThresholdError;

    fn try_from(raw: RawThresholds) -> Result<Self, Self::Error> {
        Self::new(raw.alpha, raw.beta)
    }
}

impl RoutingThresholds {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, ThresholdError> {
        for (name, value) in [("alpha", alpha), ("beta", beta)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(ThresholdError { name, value });
            }
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Default for RoutingThresholds {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    DirectAnswer,
    TargetedContradiction,
    TargetedReflection,
    DeepSearch,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::DirectAnswer,
        Strategy::TargetedContradiction,
        Strategy::TargetedReflection,
        Strategy::DeepSearch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DirectAnswer => "DirectAnswer",
            Strategy::TargetedContradiction => "TargetedContradiction",
            Strategy::TargetedReflection => "TargetedReflection",
            Strategy::DeepSearch => "DeepSearch",
        }
    }

    /// Certainty side of the quadrant (true for the `certainty >= alpha` half).
    pub fn high_certainty(self) -> bool {
        matches!(self, Strategy::DirectAnswer | Strategy::TargetedContradiction)
    }

    pub fn high_consistency(self) -> bool {
        matches!(self, Strategy::DirectAnswer | Strategy::TargetedReflection)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Route raw certainty and consistency values. Boundaries are inclusive on
/// the high side.
pub fn route_values(certainty: f64, consistency: f64, thresholds: &RoutingThresholds) -> Strategy {
    match (certainty >= thresholds.alpha, consistency >= thresholds.beta) {
        (true, true) => Strategy::DirectAnswer,
        (true, false) => Strategy::TargetedContradiction,
        (false, true) => Strategy::TargetedReflection,
        (false, false) => Strategy::DeepSearch,
    }
}

pub fn route(signals: &ConfidenceSignals, thresholds: &RoutingThresholds) -> Strategy {
    route_values(signals.certainty, signals.consistency, thresholds)
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("no labeled outcomes to calibrate on")]
    EmptyInput,
    #[error("grid step {0} must split (0, 1) into at least two equal parts")]
    InvalidStep(f64),
}

/// One labeled claim with the verdict each strategy produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub certainty: f64,
    pub consistency: f64,
    pub gold: Label,
    pub outcomes: BTreeMap<Strategy, Option<Label>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub alpha: f64,
    pub beta: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: RoutingThresholds,
    pub macro_f1: f64,
    pub surface: Vec<SurfacePoint>,
}

/// Interior grid points `i/n`, `0 < i < n`, for `step = 1/n`.
pub fn grid_values(step: f64) -> Result<Vec<f64>, CalibrationError> {
    if !(step.is_finite() && step > 0.0) {
        return Err(CalibrationError::InvalidStep(step));
    }
    let n = (1.0 / step).round();
    if n < 2.0 || (n * step - 1.0).abs() > 1e-9 {
        return Err(CalibrationError::InvalidStep(step));
    }
    let n = n as usize;
    Ok((1..n).map(|i| i as f64 / n as f64).collect())
}

fn routed_macro_f1(samples: &[CalibrationSample], thresholds: &RoutingThresholds) -> f64 {
    f1_from_pairs(samples.iter().map(|s| {
        let strategy = route_values(s.certainty, s.consistency, thresholds);
        (s.outcomes.get(&strategy).copied().flatten(), s.gold)
    }))
    .macro_f1
}

/// Grid search for the thresholds maximizing macro-F1 of the routed
/// verdicts. Ties prefer larger `alpha + beta`, then larger `alpha`.
pub fn calibrate(samples: &[CalibrationSample], step: f64) -> Result<Calibration, CalibrationError> {
    let grid = grid_values(step)?;
    if samples.is_empty() {
        return Err(CalibrationError::EmptyInput);
    }
    let mut surface = Vec::with_capacity(grid.len() * grid.len());
    let mut best: Option<SurfacePoint> = None;
    for &alpha in &grid {
        for &beta in &grid {
            let thresholds = RoutingThresholds::new(alpha, beta).expect("grid is interior");
            let point = SurfacePoint {
                alpha,
                beta,
                macro_f1: routed_macro_f1(samples, &thresholds),
            };
            surface.push(point);
            let better = match best {
                None => true,
                Some(b) => {
                    let key = |p: &SurfacePoint| (p.alpha + p.beta, p.alpha, p.beta);
                    if (point.macro_f1 - b.macro_f1).abs() <= 1e-12 {
                        key(&point) > key(&b)
                    } else {
                        point.macro_f1 > b.macro_f1
                    }
                }
            };
            if better {
                best = Some(point);
            }
        }
    }
    let best = best.expect("grid is non-empty");
    Ok(Calibration {
        thresholds: RoutingThresholds::new(best.alpha, best.beta).expect("grid is interior"),
        macro_f1: best.macro_f1,
        surface,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn signals(t: f64, g: f64) -> ConfidenceSignals {
        ConfidenceSignals::new(t, g, 0.5, 0.5).unwrap()
    }

    #[test]
    fn quadrant_examples() {
        let th = RoutingThresholds::default();
        assert_eq!(route(&signals(0.9, 0.9), &th), Strategy::DirectAnswer);
        assert_eq!(route(&signals(0.9, 0.1), &th), Strategy::TargetedContradiction);
        assert_eq!(route(&signals(0.1, 0.9), &th), Strategy::TargetedReflection);
        assert_eq!(route(&signals(0.1, 0.1), &th), Strategy::DeepSearch);
        assert_eq!(route(&signals(0.5, 0.5), &th), Strategy::DirectAnswer);
    }

    #[test]
    fn thresholds_must_be_open_interval() {
        assert!(RoutingThresholds::new(1.0, 0.5).is_err());
        assert!(RoutingThresholds::new(0.5, 0.0).is_err());
        assert!(RoutingThresholds::new(f64::NAN, 0.5).is_err());
        assert!(serde_json::from_str::<RoutingThresholds>(r#"{"alpha":1.0,"beta":0.5}"#).is_err());
        let th: RoutingThresholds = serde_json::from_str(r#"{"alpha":0.3,"beta":0.6}"#).unwrap();
        assert_eq!((th.alpha(), th.beta()), (0.3, 0.6));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
    }

    fn sample(t: f64, g: f64, gold: Label, right: &[Strategy]) -> CalibrationSample {
        CalibrationSample {
            certainty: t,
            consistency: g,
            gold,
            outcomes: Strategy::ALL
                .into_iter()
                .map(|s| (s, Some(if right.contains(&s) { gold } else { gold.negate() })))
                .collect(),
        }
    }

    #[test]
    fn grid_step_validation() {
        assert_eq!(grid_values(0.25).unwrap(), vec![0.25, 0.5, 0.75]);
        assert_eq!(grid_values(0.05).unwrap().len(), 19);
        assert_eq!(grid_values(1.0), Err(CalibrationError::InvalidStep(1.0)));
        assert_eq!(grid_values(0.3), Err(CalibrationError::InvalidStep(0.3)));
        assert!(grid_values(0.0).is_err());
    }

    #[test]
    fn direct_only_fixture_drives_thresholds_to_minimum() {
        let direct = [Strategy::DirectAnswer];
        let samples = vec![
            sample(0.05, 0.05, Label::True, &direct),
            sample(0.3, 0.9, Label::False, &direct),
            sample(0.8, 0.2, Label::True, &direct),
            sample(0.6, 0.6, Label::False, &direct),
        ];
        let c = calibrate(&samples, 0.05).unwrap();
        assert_eq!((c.thresholds.alpha(), c.thresholds.beta()), (0.05, 0.05));
        assert_eq!(c.macro_f1, 1.0);
        assert_eq!(c.surface.len(), 19 * 19);
    }

    #[test]
    fn ties_prefer_larger_thresholds() {
        // every strategy is right, so the whole surface ties
        let samples = vec![sample(0.5, 0.5, Label::True, &Strategy::ALL), sample(0.2, 0.7, Label::False, &Strategy::ALL)];
        let c = calibrate(&samples, 0.05).unwrap();
        assert_eq!((c.thresholds.alpha(), c.thresholds.beta()), (0.95, 0.95));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert_eq!(calibrate(&[], 0.05), Err(CalibrationError::EmptyInput));
    }

    proptest! {
        #[test]
        fn raising_certainty_never_lowers_quadrant(
            t in 0.0f64..=1.0, dt in 0.0f64..=1.0, g in 0.0f64..=1.0,
            a in 0.01f64..0.99, b in 0.01f64..0.99,
        ) {
            let th = RoutingThresholds::new(a, b).unwrap();
            let before = route_values(t, g, &th);
            let after = route_values((t + dt).min(1.0), g, &th);
            prop_assert!(!before.high_certainty() || after.high_certainty());
            prop_assert_eq!(before.high_consistency(), after.high_consistency());
        }

        #[test]
        fn raising_consistency_never_lowers_quadrant(
            t in 0.0f64..=1.0, g in 0.0f64..=1.0, dg in 0.0f64..=1.0,
            a in 0.01f64..0.99, b in 0.01f64..0.99,
        ) {
            let th = RoutingThresholds::new(a, b).unwrap();
            let before = route_values(t, g, &th);
            let after = route_values(t, (g + dg).min(1.0), &th);
            prop_assert!(!before.high_consistency() || after.high_consistency());
            prop_assert_eq!(before.high_certainty(), after.high_certainty());
        }
    }
}
