//! Detection metrics.
//!
//! Average precision is the step-wise sum `Σ_k (R_k − R_{k−1})·P_k` over
//! the distinct scores in descending order. Examples sharing a score enter
//! at the same threshold, so the value does not depend on input order and
//! a constant scorer gets exactly the positive prevalence.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Result};

pub const AP_CONVENTION: &str = "step-interp-v1";

/// Average precision of `scores` for the positives marked in `labels`.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure_input!(scores.len() == labels.len(), "one label per score required");
    ensure_input!(scores.iter().all(|s| !s.is_nan()), "scores must not be NaN");
    let positives = labels.iter().filter(|&&l| l).count();
    ensure_input!(positives > 0, "average precision needs at least one positive");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("not NaN"));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let before = tp;
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        if tp > before {
            let recall_gain = (tp - before) as f64 / positives as f64;
            ap += recall_gain * tp as f64 / seen as f64;
        }
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
}

/// Per-class precision and recall; classes never predicted get precision 0.
pub fn class_stats(predicted: &[usize], truth: &[usize], classes: usize) -> Vec<ClassStats> {
    let mut tp = vec![0usize; classes];
    let mut pred = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        pred[p] += 1;
        support[t] += 1;
        tp[t] += (p == t) as usize;
    }
    (0..classes)
        .map(|c| ClassStats {
            precision: if pred[c] == 0 { 0.0 } else { tp[c] as f64 / pred[c] as f64 },
            recall: if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 },
            support: support[c],
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Real-vs-fake evaluation summary; class 0 is real, class 1 is fake.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    #[serde(rename = "ap")]
    pub average_precision: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassStats>,
    pub n_real: usize,
    pub n_fake: usize,
    pub convention: String,
}

impl DetectorMetrics {
    /// Metrics from fake-class probabilities; accuracy thresholds at 0.5.
    pub fn from_scores(real: &[f64], fake: &[f64]) -> Result<Self> {
        ensure_input!(!real.is_empty() && !fake.is_empty(), "evaluation needs real and fake examples");
        let scores: Vec<f64> = real.iter().chain(fake).copied().collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| i >= real.len()).collect();
        let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let predicted: Vec<usize> = scores.iter().map(|&s| (s > 0.5) as usize).collect();
        Ok(Self {
            average_precision: average_precision(&scores, &labels)?,
            accuracy: accuracy(&predicted, &truth),
            per_class: class_stats(&predicted, &truth, 2),
            n_real: real.len(),
            n_fake: fake.len(),
            convention: String::from(AP_CONVENTION),
        })
    }
}

/// Multi-class evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
    pub per_class: Vec<ClassStats>,
}

impl MulticlassMetrics {
    pub fn new(predicted: &[usize], truth: &[usize], classes: usize) -> Self {
        let per_class = class_stats(predicted, truth, classes);
        let present: Vec<&ClassStats> = per_class.iter().filter(|c| c.support > 0).collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| c.recall).sum::<f64>() / present.len() as f64
        };
        Self {
            accuracy: accuracy(predicted, truth),
            mean_class_accuracy: mean,
            per_class,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Precision at every positive, averaged, for a list already in rank order.
    fn brute(labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut hits = 0.0;
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l {
                hits += 1.0;
                total += hits / (i + 1) as f64;
            }
        }
        total / pos
    }

    #[test]
    fn hand_enumerated_list() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert_relative_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exhaustive_short_lists() {
        for n in 1..=8usize {
            for mask in 1u32..(1 << n) {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
                let ap = average_precision(&scores, &labels).unwrap();
                assert!((ap - brute(&labels)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_scores_give_prevalence() {
        let labels = [true, false, false, true, false];
        assert_relative_eq!(average_precision(&[0.3; 5], &labels).unwrap(), 0.4, epsilon = 1e-12);
        assert!(average_precision(&[0.3; 2], &[false, false]).is_err());
    }

    #[test]
    fn worst_rankings_can_fall_below_prevalence() {
        // Prevalence 2/3, but a negative ranked first gives (1/2 + 2/3) / 2.
        let ap = average_precision(&[0.9, 0.5, 0.1], &[false, true, true]).unwrap();
        assert_relative_eq!(ap, 7.0 / 12.0, epsilon = 1e-12);
        assert!(ap < 2.0 / 3.0);
    }

    #[test]
    fn detector_metrics() {
        let m = DetectorMetrics::from_scores(&[0.1, 0.2, 0.6], &[0.7, 0.9]).unwrap();
        assert_eq!(m.average_precision, 1.0);
        assert_relative_eq!(m.accuracy, 0.8);
        assert_relative_eq!(m.per_class[1].precision, 2.0 / 3.0);
        assert_eq!(m.per_class[1].recall, 1.0);
        assert_eq!(m.convention, AP_CONVENTION);
        assert!(DetectorMetrics::from_scores(&[], &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn monotone_invariance_and_bounds(raw in proptest::collection::vec((0u8..6, any::<bool>()), 1..30)) {
            prop_assume!(raw.iter().any(|r| r.1));
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let ap = average_precision(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            prop_assert!((ap - average_precision(&warped, &labels).unwrap()).abs() < 1e-12);
            prop_assert!(ap <= 1.0 + 1e-12);
            prop_assert!(ap > 0.0 && ap.is_finite());
        }
    }
}
