//! Evaluation metrics: Dice, confusion-matrix rates, ROC- and PR-AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScreenError};
use crate::raster::BinaryMask;
use crate::Label;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// Tally decisions at a strict `score > threshold` cut.
    pub fn from_scores(scores: &[(f64, Label)], threshold: f64) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for &(score, label) in scores {
            let predicted_positive = score > threshold;
            match (predicted_positive, label) {
                (true, Label::Positive) => c.true_pos += 1,
                (true, Label::Negative) => c.false_pos += 1,
                (false, Label::Positive) => c.false_neg += 1,
                (false, Label::Negative) => c.true_neg += 1,
            }
        }
        c
    }
}

/// Sensitivity and specificity; a rate whose denominator is empty is
/// reported as `None` rather than a silent zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn sens_spec(counts: &ConfusionCounts) -> Rates {
    let pos = counts.true_pos + counts.false_neg;
    let neg = counts.true_neg + counts.false_pos;
    Rates {
        sensitivity: (pos > 0).then(|| counts.true_pos as f64 / pos as f64),
        specificity: (neg > 0).then(|| counts.true_neg as f64 / neg as f64),
    }
}

/// Dice coefficient `2TP / (2TP + FP + FN)` over mask pixels. Two empty
/// masks agree perfectly and score 1.0.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(ScreenError::Validation(format!(
            "dice: mask dimensions {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if 2 * tp + fp + fne == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fne) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AucKind {
    Roc,
    Pr,
}

fn split_check(scores: &[(f64, Label)]) -> Result<(usize, usize)> {
    let n_pos = scores.iter().filter(|(_, l)| *l == Label::Positive).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ScreenError::Validation(
            "auc requires both classes present".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

/// ROC-AUC via the rank statistic (ties get mid-ranks), or PR-AUC via
/// step-wise interpolation sweeping unique thresholds in descending order.
pub fn auc(scores: &[(f64, Label)], kind: AucKind) -> Result<f64> {
    let (n_pos, n_neg) = split_check(scores)?;
    match kind {
        AucKind::Roc => {
            let mut sorted: Vec<(f64, Label)> = scores.to_vec();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
            let mut rank_sum_pos = 0.0;
            let mut i = 0;
            while i < sorted.len() {
                let mut j = i;
                while j < sorted.len() && sorted[j].0 == sorted[i].0 {
                    j += 1;
                }
                // Ranks are 1-based; tied scores share the mid-rank.
                let mid_rank = (i + 1 + j) as f64 / 2.0;
                for item in &sorted[i..j] {
                    if item.1 == Label::Positive {
                        rank_sum_pos += mid_rank;
                    }
                }
                i = j;
            }
            let n_pos = n_pos as f64;
            let n_neg = n_neg as f64;
            Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
        }
        AucKind::Pr => {
            let mut sorted: Vec<(f64, Label)> = scores.to_vec();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            let mut i = 0;
            while i < sorted.len() {
                let mut j = i;
                while j < sorted.len() && sorted[j].0 == sorted[i].0 {
                    if sorted[j].1 == Label::Positive {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                    j += 1;
                }
                let recall = tp as f64 / n_pos as f64;
                let precision = tp as f64 / (tp + fp) as f64;
                area += (recall - prev_recall) * precision;
                prev_recall = recall;
                i = j;
            }
            Ok(area)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(bits: &[u8], w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_bits(w, h, 0, bits.iter().map(|&b| b != 0).collect()).unwrap()
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = mask_from(&[1, 1, 0, 0], 2, 2);
        let b = mask_from(&[0, 0, 1, 1], 2, 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_formula_case() {
        // TP=2, FP=1, FN=1 -> 4/6
        let pred = mask_from(&[1, 1, 1, 0, 0, 0], 6, 1);
        let truth = mask_from(&[1, 1, 0, 1, 0, 0], 6, 1);
        assert!((dice(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dice_empty_vs_empty_is_one() {
        let a = mask_from(&[0, 0], 2, 1);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let a = mask_from(&[1, 0, 1, 1, 0, 0], 3, 2);
        let b = mask_from(&[1, 1, 0, 1, 0, 1], 3, 2);
        assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
    }

    #[test]
    fn dice_dimension_mismatch() {
        let a = mask_from(&[1], 1, 1);
        let b = mask_from(&[1, 0], 2, 1);
        assert!(dice(&a, &b).is_err());
    }

    #[test]
    fn rates_closed_forms() {
        let r = sens_spec(&ConfusionCounts {
            true_pos: 99,
            false_neg: 3,
            true_neg: 50,
            false_pos: 0,
        });
        assert!((r.sensitivity.unwrap() - 99.0 / 102.0).abs() < 1e-12);
        assert!((r.sensitivity.unwrap() - 0.9706).abs() < 1e-4);
        assert_eq!(r.specificity, Some(1.0));

        let r = sens_spec(&ConfusionCounts {
            true_pos: 5,
            false_neg: 0,
            true_neg: 0,
            false_pos: 0,
        });
        assert_eq!(r.sensitivity, Some(1.0));
        assert_eq!(r.specificity, None);
    }

    #[test]
    fn roc_auc_hand_case() {
        let scores = vec![
            (0.9, Label::Positive),
            (0.4, Label::Positive),
            (0.6, Label::Negative),
            (0.1, Label::Negative),
        ];
        assert!((auc(&scores, AucKind::Roc).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_both_kinds() {
        let scores = vec![
            (0.9, Label::Positive),
            (0.8, Label::Positive),
            (0.2, Label::Negative),
            (0.1, Label::Negative),
        ];
        assert_eq!(auc(&scores, AucKind::Roc).unwrap(), 1.0);
        assert_eq!(auc(&scores, AucKind::Pr).unwrap(), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let scores = vec![(0.9, Label::Positive), (0.8, Label::Positive)];
        assert!(auc(&scores, AucKind::Roc).is_err());
    }

    #[test]
    fn roc_invariant_under_monotone_transform() {
        let scores: Vec<(f64, Label)> = (0..40)
            .map(|i| {
                let s = (i as f64 * 0.7).sin() * 0.5 + 0.5;
                let l = if (i * 13) % 3 == 0 { Label::Positive } else { Label::Negative };
                (s, l)
            })
            .collect();
        let mapped: Vec<(f64, Label)> = scores
            .iter()
            .map(|&(s, l)| (s.powi(3) * 2.0 + 1.0, l))
            .collect();
        let a = auc(&scores, AucKind::Roc).unwrap();
        let b = auc(&mapped, AucKind::Roc).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn confusion_uses_strict_threshold() {
        let scores = vec![(0.74, Label::Positive), (0.75, Label::Positive)];
        let c = ConfusionCounts::from_scores(&scores, 0.74);
        assert_eq!(c.true_pos, 1);
        assert_eq!(c.false_neg, 1);
    }
}
