//! Multi-label evaluation: ranking-based average precision per class, mAP
//! over classes with positives, and precision/recall at a score threshold.

use crate::error::{CapsError, Result};

pub const SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// AP per class; `None` for classes with zero positives (excluded from mAP).
    pub per_class_ap: Vec<Option<f64>>,
    /// Unweighted mean of per-class AP over classes with >= 1 positive.
    pub map: f64,
    /// Precision at the fixed score threshold, per class (1.0 when nothing
    /// is predicted positive).
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub classes_without_positives: Vec<usize>,
}

/// Ranking AP: order samples by descending score (ties broken by sample
/// index), average the precision at each positive rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / positives as f64)
}

/// `scores` and `labels` are n_samples x J.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(CapsError::Data("mean_average_precision: no samples".into()));
    }
    let j_n = scores[0].len();
    if scores.len() != labels.len()
        || scores.iter().any(|s| s.len() != j_n)
        || labels.iter().any(|l| l.len() != j_n)
    {
        return Err(CapsError::Data("mean_average_precision: ragged score/label matrix".into()));
    }
    let mut per_class_ap = Vec::with_capacity(j_n);
    let mut per_class_precision = Vec::with_capacity(j_n);
    let mut per_class_recall = Vec::with_capacity(j_n);
    let mut without = Vec::new();
    for j in 0..j_n {
        let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[j] != 0).collect();
        let ap = average_precision(&s, &l);
        if ap.is_none() {
            without.push(j);
        }
        per_class_ap.push(ap);
        let predicted = s.iter().filter(|&&v| v >= SCORE_THRESHOLD).count();
        let tp = s
            .iter()
            .zip(&l)
            .filter(|&(&v, &lab)| v >= SCORE_THRESHOLD && lab)
            .count();
        let pos = l.iter().filter(|&&v| v).count();
        per_class_precision.push(if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 });
        per_class_recall.push(if pos == 0 { 1.0 } else { tp as f64 / pos as f64 });
    }
    let with: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if with.is_empty() {
        0.0
    } else {
        with.iter().sum::<f64>() / with.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        map,
        per_class_precision,
        per_class_recall,
        classes_without_positives: without,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_ranking_is_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn hand_ranked_five_sixths() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn all_positive_is_one() {
        let ap = average_precision(&[0.1, 0.9, 0.5], &[true, true, true]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn no_positives_excluded_and_flagged() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let labels = vec![vec![1, 0], vec![1, 0]];
        let rep = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(rep.classes_without_positives, vec![1]);
        assert!(rep.per_class_ap[1].is_none());
        assert_eq!(rep.map, rep.per_class_ap[0].unwrap());
    }

    #[test]
    fn ties_broken_by_sample_index() {
        // Equal scores: sample 0 ranks first. Positive at index 1 with the
        // same score lands at rank 2 -> precision 1/2.
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_precision_recall() {
        let scores = vec![vec![0.9], vec![0.6], vec![0.4], vec![0.2]];
        let labels = vec![vec![1], vec![0], vec![1], vec![0]];
        let rep = mean_average_precision(&scores, &labels).unwrap();
        assert!((rep.per_class_precision[0] - 0.5).abs() < 1e-12);
        assert!((rep.per_class_recall[0] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn map_invariant_under_monotone_transforms(
            raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l));
            let base = average_precision(&scores, &labels).unwrap();
            // Strictly increasing transforms preserve the ranking.
            let t1: Vec<f64> = scores.iter().map(|s| s * 3.0 + 1.0).collect();
            let t2: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert!((average_precision(&t1, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((average_precision(&t2, &labels).unwrap() - base).abs() < 1e-12);
        }
    }
}
