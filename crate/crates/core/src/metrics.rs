//! Ranking and calibration metrics: AUC, logloss and relative improvement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped this far away from 0 and 1 before taking logs.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("AUC is undefined without both positive and negative labels ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("relative AUC improvement needs a base AUC above 0.5, got {0}")]
    BaseAuc(f64),
    #[error("relative logloss improvement needs a positive base logloss, got {0}")]
    BaseLogloss(f64),
}

/// AUC and logloss of one model on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub logloss: f64,
}

/// Area under the ROC curve via the Mann-Whitney rank sum.
///
/// Tied scores share their average rank, which is the same as giving a
/// positive/negative pair with equal scores half credit.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // ranks are 1-based; a tie group spanning positions [start, end) gets
    // the average rank (start + 1 + end) / 2
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let group_pos = order[start..end].iter().filter(|&&i| labels[i] > 0.5).count();
        positive_rank_sum += avg_rank * group_pos as f64;
        start = end;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP]`.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    if probs.len() != labels.len() {
        return Err(MetricError::Length {
            scores: probs.len(),
            labels: labels.len(),
        });
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn evaluate(probs: &[f64], labels: &[f64]) -> Result<Metrics, MetricError> {
    Ok(Metrics {
        auc: auc(probs, labels)?,
        logloss: logloss(probs, labels)?,
    })
}

/// Relative improvement of `target` over `base`, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaImpr {
    pub auc_pct: f64,
    pub logloss_pct: f64,
}

/// AUC gains are measured above the 0.5 random baseline; logloss gains are
/// the relative reduction.
pub fn relaimpr(target: &Metrics, base: &Metrics) -> Result<RelaImpr, MetricError> {
    if !(base.auc > 0.5) {
        return Err(MetricError::BaseAuc(base.auc));
    }
    if !(base.logloss > 0.0) {
        return Err(MetricError::BaseLogloss(base.logloss));
    }
    Ok(RelaImpr {
        auc_pct: ((target.auc - 0.5) / (base.auc - 0.5) - 1.0) * 100.0,
        logloss_pct: (base.logloss - target.logloss) / base.logloss * 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise oracle: every positive/negative pair scores 1 if ordered
    /// correctly and 1/2 if tied.
    fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi < 0.5 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj > 0.5 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn perfect_and_fully_tied() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(MetricError::SingleClass { .. })));
    }

    #[test]
    fn random_thousand_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<f64> = (0..1000).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let fast = auc(&scores, &labels).unwrap();
        assert!((fast - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_on_balanced_labels() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        let m = evaluate(&[0.5; 4], &labels).unwrap();
        assert_eq!(m.auc, 0.5);
        assert!((m.logloss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn relaimpr_examples() {
        let r = relaimpr(
            &Metrics { auc: 0.80, logloss: 0.3 },
            &Metrics { auc: 0.75, logloss: 0.4 },
        )
        .unwrap();
        assert!((r.auc_pct - 20.0).abs() < 1e-9);
        assert!((r.logloss_pct - 25.0).abs() < 1e-9);
        let same = Metrics { auc: 0.9, logloss: 0.2 };
        let r = relaimpr(&same, &same).unwrap();
        assert_eq!((r.auc_pct, r.logloss_pct), (0.0, 0.0));
        assert!(relaimpr(&same, &Metrics { auc: 0.5, logloss: 0.2 }).is_err());
    }

    fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        // few distinct score levels force heavy ties
        (2usize..300).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|s| s as f64 / 4.0 - 1.0), n),
                prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_auc_equals_pairwise_oracle((scores, mut labels) in scored_set()) {
            labels[0] = 1.0;
            labels[1] = 0.0;
            let fast = auc(&scores, &labels).unwrap();
            prop_assert!((fast - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_increasing_transforms((scores, mut labels) in scored_set()) {
            labels[0] = 1.0;
            labels[1] = 0.0;
            let base = auc(&scores, &labels).unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            prop_assert!((auc(&exp, &labels).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn flipping_labels_complements_auc((scores, mut labels) in scored_set()) {
            labels[0] = 1.0;
            labels[1] = 0.0;
            let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
            let sum = auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
