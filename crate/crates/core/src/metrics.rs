//! Ranking and classification metrics.

/// Area under the ROC curve by positive-negative pair counting, ties
/// scoring 0.5 (computed via midranks). `None` when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied scores share the mid rank
        let mid = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Some(u / (p * negatives as f64))
}

/// Predicted class from a probability vector. Binary heads use the 0.5
/// threshold on class 1 (a score of exactly 0.5 predicts positive);
/// otherwise the argmax, lowest index first on ties.
pub fn predict_class(probs: &[f64]) -> usize {
    if probs.len() == 2 {
        return usize::from(probs[1] >= 0.5);
    }
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Per-class precision/recall/F1 with one-vs-rest counting.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Summary {
    pub per_class: Vec<ClassStats>,
    /// F1 of the tp/fp/fn counts pooled over classes.
    pub micro_f1: f64,
    /// Unweighted mean of per-class F1 over the declared class set.
    pub macro_f1: f64,
}

pub fn classification_stats(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> F1Summary {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&pred, &label) in predictions.iter().zip(labels) {
        support[label] += 1;
        if pred == label {
            tp[label] += 1;
        } else {
            fp[pred] += 1;
            fneg[label] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let f1_of = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let per_class: Vec<ClassStats> = (0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fneg[c]);
            ClassStats {
                precision,
                recall,
                f1: f1_of(precision, recall),
                support: support[c],
            }
        })
        .collect();
    let tp_sum: usize = tp.iter().sum();
    let fp_sum: usize = fp.iter().sum();
    let fn_sum: usize = fneg.iter().sum();
    let micro_p = ratio(tp_sum, tp_sum + fp_sum);
    let micro_r = ratio(tp_sum, tp_sum + fn_sum);
    let micro_f1 = f1_of(micro_p, micro_r);
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes as f64;
    F1Summary {
        per_class,
        micro_f1,
        macro_f1,
    }
}
