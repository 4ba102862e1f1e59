//! Calibration and classification metrics over a run.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::Label;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("bin count must be at least 1")]
    InvalidBins,
    #[error("all predictions share one correctness value")]
    DegenerateLabels,
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub claim_id: String,
    pub confidence: f64,
    pub predicted: Label,
    pub gold: Label,
    pub correct: bool,
}

impl ScoredPrediction {
    pub fn new(
        claim_id: impl Into<String>,
        confidence: f64,
        predicted: Label,
        gold: Label,
    ) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(EvalError::ConfidenceOutOfRange(confidence));
        }
        Ok(Self {
            claim_id: claim_id.into(),
            confidence,
            predicted,
            gold,
            correct: predicted == gold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub ece: f64,
    /// Absent when every prediction has the same correctness.
    pub auroc: Option<f64>,
    pub bins: Vec<ReliabilityBin>,
    pub f1_true: f64,
    pub f1_false: f64,
    pub macro_f1: f64,
}

/// 1-based index of the bin `((m-1)/M, m/M]` holding `p`; 0 goes to bin 1.
pub fn bin_index(p: f64, bins: usize) -> usize {
    let m_total = bins as f64;
    let mut m = ((p * m_total).ceil() as usize).clamp(1, bins);
    // ceil can land one off when p*M is not exact in floating point
    while m > 1 && (m - 1) as f64 / m_total >= p {
        m -= 1;
    }
    while m < bins && (m as f64) / m_total < p {
        m += 1;
    }
    m
}

pub fn expected_calibration_error(
    preds: &[ScoredPrediction],
    bins: usize,
) -> Result<(f64, Vec<ReliabilityBin>), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if bins == 0 {
        return Err(EvalError::InvalidBins);
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sums = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for p in preds {
        let m = bin_index(p.confidence, bins) - 1;
        counts[m] += 1;
        conf_sums[m] += p.confidence;
        correct[m] += usize::from(p.correct);
    }
    let n = preds.len() as f64;
    let mut ece = 0.0;
    let mut out = Vec::with_capacity(bins);
    for m in 0..bins {
        let (mean_confidence, accuracy) = if counts[m] == 0 {
            (0.0, 0.0)
        } else {
            let c = counts[m] as f64;
            (conf_sums[m] / c, correct[m] as f64 / c)
        };
        if counts[m] > 0 {
            ece += counts[m] as f64 / n * (accuracy - mean_confidence).abs();
        }
        out.push(ReliabilityBin {
            lower: m as f64 / bins as f64,
            upper: (m + 1) as f64 / bins as f64,
            count: counts[m],
            mean_confidence,
            accuracy,
        });
    }
    Ok((ece, out))
}

fn class_counts(preds: &[ScoredPrediction]) -> Result<(usize, usize), EvalError> {
    let pos = preds.iter().filter(|p| p.correct).count();
    let neg = preds.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Mann-Whitney statistic: probability a correct prediction outscores an
/// incorrect one, ties counting one half.
pub fn auroc(preds: &[ScoredPrediction]) -> Result<f64, EvalError> {
    let (pos, neg) = class_counts(preds)?;
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));

    // sum over correct predictions of (#incorrect below + half #incorrect tied)
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].confidence == order[i].confidence {
            j += 1;
        }
        let group = &order[i..j];
        let group_pos = group.iter().filter(|p| p.correct).count();
        let group_neg = group.len() - group_pos;
        wins += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// ROC staircase, one point per distinct threshold (predict "correct" when
/// `confidence >= threshold`), from (0, 0) to (1, 1).
pub fn roc_points(preds: &[ScoredPrediction]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (pos, neg) = class_counts(preds)?;
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = order[i].confidence;
        while i < order.len() && order[i].confidence == threshold {
            if order[i].correct {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub f1_true: f64,
    pub f1_false: f64,
    pub macro_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-label F1 over `(predicted, gold)` pairs. A missing prediction counts
/// as a miss for its gold label and a false positive for neither.
pub fn f1_from_pairs<I>(pairs: I) -> F1Scores
where
    I: IntoIterator<Item = (Option<Label>, Label)>,
{
    // [label][tp, fp, fn]
    let mut c = [[0usize; 3]; 2];
    let slot = |l: Label| usize::from(l == Label::False);
    for (predicted, gold) in pairs {
        match predicted {
            Some(p) if p == gold => c[slot(gold)][0] += 1,
            Some(p) => {
                c[slot(p)][1] += 1;
                c[slot(gold)][2] += 1;
            }
            None => c[slot(gold)][2] += 1,
        }
    }
    let f1_true = f1(c[0][0], c[0][1], c[0][2]);
    let f1_false = f1(c[1][0], c[1][1], c[1][2]);
    F1Scores {
        f1_true,
        f1_false,
        macro_f1: (f1_true + f1_false) / 2.0,
    }
}

pub fn f1_scores(preds: &[ScoredPrediction]) -> F1Scores {
    f1_from_pairs(preds.iter().map(|p| (Some(p.predicted), p.gold)))
}

pub fn calibration_report(
    preds: &[ScoredPrediction],
    bins: usize,
) -> Result<CalibrationReport, EvalError> {
    let (ece, bin_table) = expected_calibration_error(preds, bins)?;
    let auroc = match auroc(preds) {
        Ok(a) => Some(a),
        Err(EvalError::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    let f = f1_scores(preds);
    Ok(CalibrationReport {
        n: preds.len(),
        ece,
        auroc,
        bins: bin_table,
        f1_true: f.f1_true,
        f1_false: f.f1_false,
        macro_f1: f.macro_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub score: f64,
    pub correct: bool,
}

pub fn export_score_distribution(preds: &[ScoredPrediction]) -> Vec<ScoreRecord> {
    preds
        .iter()
        .map(|p| ScoreRecord {
            score: p.confidence,
            correct: p.correct,
        })
        .collect()
}

/// Write records as CSV; the header is written even when `rows` is empty.
pub fn write_csv<W: Write, T: Serialize>(
    out: W,
    header: &[&str],
    rows: &[T],
) -> Result<(), csv::Error> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(header)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn score_distribution_csv<W: Write>(out: W, preds: &[ScoredPrediction]) -> Result<(), csv::Error> {
    write_csv(out, &["score", "correct"], &export_score_distribution(preds))
}
