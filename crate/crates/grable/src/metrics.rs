//! Binary classification metrics: ROC-AUC, F1 and threshold selection.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("scores and labels have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("labels contain only one class")]
    Degenerate,
    #[error("empty input")]
    Empty,
}

fn check<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::Degenerate);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank statistic, with midranks for ties:
/// `AUC = (R⁺ − n⁺(n⁺+1)/2) / (n⁺ n⁻)` where `R⁺` sums positive ranks.
pub fn roc_auc<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<S, MetricsError> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // midrank of the tie block [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let pos_f = pos as f64;
    let auc = (rank_sum_pos - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64);
    Ok(S::of_f64(auc))
}

/// F1 score of hard predictions; 0 when precision or recall is undefined.
pub fn f1<S: Scalar>(predictions: &[u8], labels: &[u8]) -> Result<S, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), labels.len()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(S::zero());
    }
    let tp = tp as f64;
    Ok(S::of_f64(2.0 * tp / (2.0 * tp + fp as f64 + fn_ as f64)))
}

/// Hard predictions at a threshold: positive iff `score >= threshold`.
pub fn predictions_at<S: Scalar>(scores: &[S], threshold: S) -> Vec<u8> {
    scores.iter().map(|&s| (s >= threshold) as u8).collect()
}

/// The F1-maximizing threshold on the given scores, with the F1 it attains.
/// Candidates are the midpoints between consecutive distinct scores plus one
/// value above the maximum (all-negative); ties break toward the higher
/// threshold, i.e. fewer predicted positives.
pub fn threshold_candidates<S: Scalar>(scores: &[S]) -> Vec<S> {
    let mut distinct: Vec<S> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    let two = S::of_f64(2.0);
    let mut candidates: Vec<S> = distinct
        .windows(2)
        .map(|w| (w[0] + w[1]) / two)
        .collect();
    candidates.push(*distinct.last().expect("non-empty") + S::one());
    candidates
}

pub fn select_threshold<S: Scalar>(scores: &[S], labels: &[u8]) -> Result<(S, S), MetricsError> {
    check(scores, labels)?;
    let mut best: Option<(S, S)> = None;
    for t in threshold_candidates(scores) {
        let score = f1::<S>(&predictions_at(scores, t), labels)?;
        let better = match best {
            None => true,
            Some((bt, bf)) => score > bf || (score == bf && t > bt),
        };
        if better {
            best = Some((t, score));
        }
    }
    Ok(best.expect("at least one candidate"))
}
