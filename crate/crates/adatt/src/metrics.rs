//! Evaluation metrics: AUC by rank statistics, normalized entropy, MSE.

use crate::error::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counted half. Computed from the rank-sum statistic in O(n log n).
///
/// Scores may be logits or probabilities; any strictly monotone transform
/// leaves the value unchanged. Errors when labels contain a single class.
pub fn auc(scores: &[f32], labels: &[f32]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape_mismatch(
            "auc",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {pos} positives / {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // average ranks over tied score groups, then sum positive ranks
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos as f64 * (pos as f64 + 1.0)) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Mean cross entropy of `probs` against `labels`, divided by the entropy of
/// the empirical base-rate predictor. 1.0 means no better than predicting
/// the base rate; lower is better.
///
/// Probabilities are clipped to `[1e-7, 1 - 1e-7]` before the logs. Errors
/// on single-class labels (the base-rate entropy would be zero).
pub fn normalized_entropy(probs: &[f32], labels: &[f32]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape_mismatch(
            "normalized_entropy",
            &[probs.len()],
            &[labels.len()],
        ));
    }
    if probs.is_empty() {
        return Err(Error::Metric("normalized entropy of empty input".into()));
    }
    let n = labels.len() as f64;
    let pos: f64 = labels.iter().map(|&y| y as f64).sum();
    let base = pos / n;
    if base == 0.0 || base == 1.0 {
        return Err(Error::Metric(
            "normalized entropy undefined for single-class labels".into(),
        ));
    }
    const CLIP: f64 = 1e-7;
    let mut ce = 0.0f64;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = (p as f64).clamp(CLIP, 1.0 - CLIP);
        ce -= y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln();
    }
    ce /= n;
    let base_entropy = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
    Ok(ce / base_entropy)
}

/// Mean squared error at double precision.
pub fn mse(preds: &[f32], targets: &[f32]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::shape_mismatch(
            "mse",
            &[preds.len()],
            &[targets.len()],
        ));
    }
    if preds.is_empty() {
        return Err(Error::Metric("mse of empty input".into()));
    }
    let s: f64 = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(s / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_ordering() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0.0, 1.0, 0.0, 1.0];
        // positives (0.4, 0.8) each beat both negatives except 0.4 > 0.35, 0.4 > 0.1
        let got = auc(&scores, &labels).unwrap();
        assert_eq!(got, 1.0);
    }

    #[test]
    fn auc_pair_enumeration_fixture() {
        // pairs: (0.9 vs 0.8) win, (0.1 vs 0.8) loss → 1/2
        let scores = [0.9, 0.8, 0.1];
        let labels = [1.0, 0.0, 1.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let labels = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auc_brute_force_agreement() {
        // independent oracle: enumerate every positive-negative pair
        let scores = [0.3f32, 0.7, 0.7, 0.2, 0.9, 0.5, 0.3];
        let labels = [0.0f32, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut wins = 0.0f64;
        let mut total = 0.0f64;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1.0 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0.0 {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let want = wins / total;
        let got = auc(&scores, &labels).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ne_is_one_for_base_rate_predictor() {
        let labels = [1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let base = labels.iter().sum::<f32>() / labels.len() as f32;
        let probs = vec![base; labels.len()];
        let got = normalized_entropy(&probs, &labels).unwrap();
        assert!((got - 1.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn ne_near_zero_for_confident_correct_predictions() {
        let labels = [1.0f32, 0.0, 1.0, 0.0];
        let probs = [1.0f32, 0.0, 1.0, 0.0]; // clipped internally
        let got = normalized_entropy(&probs, &labels).unwrap();
        assert!(got < 1e-5, "{got}");
    }

    #[test]
    fn ne_matches_double_precision_fixture() {
        let probs = [0.8f32, 0.2, 0.6, 0.4];
        let labels = [1.0f32, 0.0, 0.0, 1.0];
        // direct formula at f64
        let n = 4.0f64;
        let mut ce = 0.0f64;
        for (&p, &y) in probs.iter().zip(&labels) {
            ce -= y as f64 * (p as f64).ln() + (1.0 - y as f64) * (1.0 - p as f64).ln();
        }
        ce /= n;
        let base: f64 = 0.5;
        let denom = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
        let want = ce / denom;
        let got = normalized_entropy(&probs, &labels).unwrap();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn ne_single_class_is_undefined() {
        assert!(normalized_entropy(&[0.5, 0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let logits = [-2.0f32, 0.3, 1.7, -0.4, 0.0, 2.5];
        let labels = [0.0f32, 1.0, 1.0, 0.0, 1.0, 1.0];
        let sig: Vec<f32> = logits.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        assert_eq!(
            auc(&logits, &labels).unwrap(),
            auc(&sig, &labels).unwrap()
        );
    }
}
