//! Training objectives: click logloss, the contrastive uniformity loss,
//! standard InfoNCE for comparison, cosine homogeneity losses and their
//! weighted total.
//!
//! All batch losses are means over the batch so that their weights do not
//! depend on the batch size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GraphResult, Shape, Tape, Var};
use crate::metrics::PROBABILITY_CLAMP;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be strictly positive, got {0}")]
    Temperature(f64),
    #[error("loss weight `{name}` must be finite and non-negative, got {value}")]
    Weight { name: &'static str, value: f64 },
}

/// Weights of the auxiliary objectives and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// contrastive (uniformity) weight
    pub alpha: f64,
    /// cosine weight between the main and Hadamard-product spaces
    pub beta1: f64,
    /// cosine weight between the main and inner-product spaces
    pub beta2: f64,
    /// temperature
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            beta1: 0.3,
            beta2: 0.2,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Temperature(self.tau));
        }
        for (name, value) in [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::Weight { name, value });
            }
        }
        Ok(())
    }

    /// Weights after removing the contrastive term and/or the cosine terms.
    pub fn effective(&self, drop_contrastive: bool, drop_cosine: bool) -> LossWeights {
        LossWeights {
            alpha: if drop_contrastive { 0.0 } else { self.alpha },
            beta1: if drop_cosine { 0.0 } else { self.beta1 },
            beta2: if drop_cosine { 0.0 } else { self.beta2 },
            tau: self.tau,
        }
    }
}

/// Per-batch loss values. `total = ctr + alpha*cl + beta1*cos1 + beta2*cos2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctr: f64,
    pub cl: f64,
    pub cos1: f64,
    pub cos2: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.ctr, self.cl, self.cos1, self.cos2]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean binary cross-entropy of probabilities `prob [B]` against 0/1 labels.
pub fn logloss<S: Scalar>(tape: &mut Tape<S>, prob: Var, labels: &[S]) -> GraphResult<Var> {
    let n = tape.shape(prob).numel();
    let shape = tape.shape(prob).clone();
    let eps = S::lit(PROBABILITY_CLAMP);
    let p = tape.clamp(prob, eps, S::one() - eps);
    let y = tape.leaf(shape.clone(), labels.to_vec())?;
    let not_y = tape.leaf(shape, labels.iter().map(|&l| S::one() - l).collect())?;
    debug_assert_eq!(labels.len(), n);
    let log_p = tape.log(p)?;
    let one = tape.scalar_leaf(S::one());
    let q = tape.sub(one, p)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean(ll, None)?;
    Ok(tape.scale(mean, -S::one()))
}

/// Row-wise cosine similarity of `a [B x d]` and `b [B x d]`, giving `[B]`.
///
/// A row with (near) zero norm has similarity 0 with everything.
pub fn cosine_rows<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> GraphResult<Var> {
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let prod = tape.mul(an, bn)?;
    tape.sum(prod, Some(1))
}

/// Cosine similarity of two vectors, as a scalar node.
pub fn cosine_sim<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> GraphResult<Var> {
    let ra = tape.reshape(a, Shape::matrix(1, tape.shape(a).numel()))?;
    let rb = tape.reshape(b, Shape::matrix(1, tape.shape(b).numel()))?;
    let s = cosine_rows(tape, ra, rb)?;
    tape.reshape(s, Shape::scalar())
}

/// `mean_i (1 - cos(V_i, V'_i))`.
pub fn cos_loss<S: Scalar>(tape: &mut Tape<S>, v: Var, v_aux: Var) -> GraphResult<Var> {
    let sims = cosine_rows(tape, v, v_aux)?;
    let one = tape.scalar_leaf(S::one());
    let gap = tape.sub(one, sims)?;
    tape.mean(gap, None)
}

fn log_denominators<S: Scalar>(tape: &mut Tape<S>, v1: Var, v2: Var, tau: f64) -> GraphResult<(Var, Var, Var)> {
    let a = tape.normalize_rows(v1)?;
    let b = tape.normalize_rows(v2)?;
    let lse = tape.lse_products(a, b, S::lit(1.0 / tau))?;
    Ok((a, b, lse))
}

/// Denominator-only InfoNCE between two auxiliary views.
///
/// Per instance `-log(exp(1/tau) / sum_j exp(sim(V'_i, V''_j)/tau))`, i.e.
/// `logsumexp_j(sim_ij/tau) - 1/tau`, averaged over the batch. The `j = i`
/// term stays in the denominator.
pub fn do_infonce<S: Scalar>(tape: &mut Tape<S>, v1: Var, v2: Var, tau: f64) -> GraphResult<Var> {
    let (_, _, lse) = log_denominators(tape, v1, v2, tau)?;
    let mean = tape.mean(lse, None)?;
    let shift = tape.scalar_leaf(S::lit(1.0 / tau));
    tape.sub(mean, shift)
}

/// Standard InfoNCE with the matching instance as the positive.
pub fn infonce<S: Scalar>(tape: &mut Tape<S>, v1: Var, v2: Var, tau: f64) -> GraphResult<Var> {
    let (a, b, lse) = log_denominators(tape, v1, v2, tau)?;
    let prod = tape.mul(a, b)?;
    let diag = tape.sum(prod, Some(1))?;
    let pos = tape.scale(diag, S::lit(1.0 / tau));
    let per = tape.sub(lse, pos)?;
    tape.mean(per, None)
}

/// Loss nodes entering the total; `None` marks a term that was not built.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ctr: Var,
    pub cl: Option<Var>,
    pub cos1: Option<Var>,
    pub cos2: Option<Var>,
}

/// Weighted sum of the terms. Terms that are absent or carry weight 0 are
/// left out of the graph entirely and reported as 0.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    terms: LossTerms,
    weights: &LossWeights,
) -> GraphResult<(Var, LossBreakdown)> {
    let mut total = terms.ctr;
    let mut breakdown = LossBreakdown {
        ctr: tape.scalar(terms.ctr).to_f64_lossy(),
        ..Default::default()
    };
    let weighted = [
        (terms.cl, weights.alpha, &mut breakdown.cl),
        (terms.cos1, weights.beta1, &mut breakdown.cos1),
        (terms.cos2, weights.beta2, &mut breakdown.cos2),
    ];
    for (term, weight, slot) in weighted {
        if let (Some(v), true) = (term, weight != 0.0) {
            *slot = tape.scalar(v).to_f64_lossy();
            let scaled = tape.scale(v, S::lit(weight));
            total = tape.add(total, scaled)?;
        }
    }
    breakdown.total = tape.scalar(total).to_f64_lossy();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(t: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        t.leaf(Shape::matrix(rows, cols), data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Literal evaluation of the uniformity loss as a ratio of exponentials.
    fn oracle_do_infonce(v1: &[f64], v2: &[f64], b: usize, d: usize, tau: f64) -> f64 {
        (0..b)
            .map(|i| {
                let denom: f64 = (0..b)
                    .map(|j| (oracle_cos(&v1[i * d..(i + 1) * d], &v2[j * d..(j + 1) * d]) / tau).exp())
                    .sum();
                -((1.0 / tau).exp() / denom).ln()
            })
            .sum::<f64>()
            / b as f64
    }

    #[test]
    fn logloss_examples() {
        let mut t = Tape::<f64>::new();
        let p = t.leaf(Shape::vector(1), vec![0.5]).unwrap();
        let l = logloss(&mut t, p, &[1.0]).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        let mut t = Tape::<f64>::new();
        let p = t.leaf(Shape::vector(2), vec![0.9, 0.1]).unwrap();
        let l = logloss(&mut t, p, &[1.0, 0.0]).unwrap();
        assert!((t.scalar(l) - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn logloss_gradient_wrt_logit_is_residual_over_batch() {
        let z = [0.3, -1.1, 2.0];
        let y = [1.0, 0.0, 0.0];
        let mut t = Tape::<f64>::new();
        let zv = t.leaf(Shape::vector(3), z.to_vec()).unwrap();
        let p = t.sigmoid(zv).unwrap();
        let l = logloss(&mut t, p, &y).unwrap();
        t.backward(l).unwrap();
        for i in 0..3 {
            let yhat = 1.0 / (1.0 + (-z[i]).exp());
            assert!((t.grad(zv)[i] - (yhat - y[i]) / 3.0).abs() < 1e-8);
        }
        let report = grad_check(
            |t, v| {
                let p = t.sigmoid(v[0])?;
                logloss(t, p, &y)
            },
            &[Tensor::new(Shape::vector(3), z.to_vec())],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn cosine_examples() {
        for (a, b, want) in [
            ([1.0, 2.0], [1.0, 2.0], 1.0),
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([1.0, 0.0], [-1.0, 0.0], -1.0),
        ] {
            let mut t = Tape::<f64>::new();
            let va = t.leaf(Shape::vector(2), a.to_vec()).unwrap();
            let vb = t.leaf(Shape::vector(2), b.to_vec()).unwrap();
            let s = cosine_sim(&mut t, va, vb).unwrap();
            assert!((t.scalar(s) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_similarity_is_zero() {
        let mut t = Tape::<f64>::new();
        let va = t.leaf(Shape::vector(2), vec![0.0, 0.0]).unwrap();
        let vb = t.leaf(Shape::vector(2), vec![1.0, 1.0]).unwrap();
        let s = cosine_sim(&mut t, va, vb).unwrap();
        assert_eq!(t.scalar(s), 0.0);
    }

    #[test]
    fn cos_loss_examples() {
        let v = vec![1.0, 2.0, -0.5, 0.3];
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, 2, 2, v.clone());
        let b = leaf(&mut t, 2, 2, v.clone());
        let l = cos_loss(&mut t, a, b).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);

        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let c = leaf(&mut t, 2, 2, neg);
        let l = cos_loss(&mut t, a, c).unwrap();
        assert!((t.scalar(l) - 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut t = Tape::<f64>::new();
            let a = leaf(&mut t, 5, 4, random(&mut rng, 20));
            let b = leaf(&mut t, 5, 4, random(&mut rng, 20));
            let l = { let v = cos_loss(&mut t, a, b).unwrap(); t.scalar(v) };
            assert!((0.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn do_infonce_single_aligned_pair_is_zero() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, 1, 3, vec![0.5, -1.0, 2.0]);
        let b = leaf(&mut t, 1, 3, vec![1.0, -2.0, 4.0]);
        let l = do_infonce(&mut t, a, b, 0.2).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn all_similarities_one_give_log_batch() {
        let row = [0.3, 0.4, -1.2];
        let data: Vec<f64> = row.iter().cycle().take(9).copied().collect();
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, 3, 3, data.clone());
        let b = leaf(&mut t, 3, 3, data);
        let d = do_infonce(&mut t, a, b, 0.2).unwrap();
        let n = infonce(&mut t, a, b, 0.2).unwrap();
        assert!((t.scalar(d) - 3f64.ln()).abs() < 1e-12);
        assert!((t.scalar(n) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_single_instance_is_zero() {
        let mut t = Tape::<f64>::new();
        let a = leaf(&mut t, 1, 2, vec![1.0, 0.0]);
        let b = leaf(&mut t, 1, 2, vec![0.3, 0.9]);
        let l = infonce(&mut t, a, b, 0.5).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn do_infonce_matches_ratio_form_and_infonce_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, d, tau) = (8, 16, 0.2);
        for _ in 0..25 {
            let v1 = random(&mut rng, b * d);
            let v2 = random(&mut rng, b * d);
            let mut t = Tape::<f64>::new();
            let a = leaf(&mut t, b, d, v1.clone());
            let c = leaf(&mut t, b, d, v2.clone());
            let dl = { let v = do_infonce(&mut t, a, c, tau).unwrap(); t.scalar(v) };
            let nl = { let v = infonce(&mut t, a, c, tau).unwrap(); t.scalar(v) };
            assert!((dl - oracle_do_infonce(&v1, &v2, b, d, tau)).abs() < 1e-10);
            let gap: f64 = (0..b)
                .map(|i| (oracle_cos(&v1[i * d..(i + 1) * d], &v2[i * d..(i + 1) * d]) - 1.0) / tau)
                .sum::<f64>()
                / b as f64;
            assert!(((dl - nl) - gap).abs() < 1e-10);
            assert!(nl >= -1e-12);
        }
    }

    /// Builds unit rows where `sim(V'_i, V''_j) = sims[i][j]` exactly: V'_i is
    /// the i-th basis vector and V''_j carries column j plus a slack coordinate.
    fn views_with_similarities(sims: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, usize) {
        let b = sims.len();
        let d = 2 * b;
        let mut v1 = vec![0.0; b * d];
        let mut v2 = vec![0.0; b * d];
        for i in 0..b {
            v1[i * d + i] = 1.0;
        }
        for j in 0..b {
            let mut used = 0.0;
            for i in 0..b {
                v2[j * d + i] = sims[i][j];
                used += sims[i][j] * sims[i][j];
            }
            v2[j * d + b + j] = (1.0 - used).sqrt();
        }
        (v1, v2, d)
    }

    #[test]
    fn raising_an_off_diagonal_similarity_raises_both_losses() {
        let base = vec![
            vec![0.3, 0.1, -0.2],
            vec![0.05, 0.2, 0.1],
            vec![-0.1, 0.15, 0.25],
        ];
        let eval = |sims: &[Vec<f64>]| {
            let (v1, v2, d) = views_with_similarities(sims);
            let mut t = Tape::<f64>::new();
            let a = leaf(&mut t, 3, d, v1);
            let c = leaf(&mut t, 3, d, v2);
            let dl = { let v = do_infonce(&mut t, a, c, 0.2).unwrap(); t.scalar(v) };
            let nl = { let v = infonce(&mut t, a, c, 0.2).unwrap(); t.scalar(v) };
            (dl, nl)
        };
        let (d0, n0) = eval(&base);
        for (i, j) in [(0, 1), (0, 2), (1, 0), (2, 1)] {
            let mut bumped = base.clone();
            bumped[i][j] += 1e-4;
            let (d1, n1) = eval(&bumped);
            assert!(d1 > d0, "pair ({i},{j})");
            assert!(n1 > n0, "pair ({i},{j})");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, d) = (3, 4);
        let params = vec![
            Tensor::new(Shape::matrix(b, d), random(&mut rng, b * d)),
            Tensor::new(Shape::matrix(b, d), random(&mut rng, b * d)),
        ];
        type Build = fn(&mut Tape<f64>, &[Var]) -> GraphResult<Var>;
        let builders: [(&str, Build); 3] = [
            ("do_infonce", |t, v| do_infonce(t, v[0], v[1], 0.2)),
            ("infonce", |t, v| infonce(t, v[0], v[1], 0.2)),
            ("cos_loss", |t, v| cos_loss(t, v[0], v[1])),
        ];
        for (name, build) in builders {
            let report = grad_check(build, &params, 1e-6, 1e-5).unwrap();
            assert!(report.passed(), "{name}: {report:?}");
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut t = Tape::<f64>::new();
        let ctr = t.scalar_leaf(0.4);
        let cl = t.scalar_leaf(1.5);
        let w = LossWeights {
            alpha: 0.2,
            beta1: 0.0,
            beta2: 0.0,
            tau: 0.2,
        };
        let terms = LossTerms {
            ctr,
            cl: Some(cl),
            cos1: None,
            cos2: None,
        };
        let (v, br) = total_loss(&mut t, terms, &w).unwrap();
        assert!((t.scalar(v) - 0.7).abs() < 1e-12);
        assert_eq!(br.total, t.scalar(v));

        let zero = LossWeights {
            alpha: 0.0,
            ..w
        };
        let (v, br) = total_loss(&mut t, terms, &zero).unwrap();
        assert_eq!(t.scalar(v), 0.4);
        assert_eq!(br.cl, 0.0);
    }

    #[test]
    fn decomposition_identity_on_random_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut t = Tape::<f64>::new();
            let vals: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..3.0)).collect();
            let w = LossWeights {
                alpha: rng.gen_range(0.0..1.0),
                beta1: rng.gen_range(0.0..1.0),
                beta2: rng.gen_range(0.0..1.0),
                tau: 0.2,
            };
            let terms = LossTerms {
                ctr: t.scalar_leaf(vals[0]),
                cl: Some(t.scalar_leaf(vals[1])),
                cos1: Some(t.scalar_leaf(vals[2])),
                cos2: Some(t.scalar_leaf(vals[3])),
            };
            let (_, br) = total_loss(&mut t, terms, &w).unwrap();
            let expect = br.ctr + w.alpha * br.cl + w.beta1 * br.cos1 + w.beta2 * br.cos2;
            assert!((br.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_validation_and_ablation_masks() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            tau: 0.0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(LossError::Temperature(0.0)));
        let e = LossWeights::default().effective(true, true);
        assert_eq!((e.alpha, e.beta1, e.beta2), (0.0, 0.0, 0.0));
    }
}
