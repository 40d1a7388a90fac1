//! Embedding table, sign-aligned perturbation and pairwise product views.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphResult, Shape, Tape, Tensor, Var};
use crate::data::Batch;
use crate::scalar::Scalar;

/// Standard deviation of the Gaussian embedding initializer.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

/// How perturbation noise is shared across an instance's fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// An independent draw for every coordinate of every field.
    #[default]
    PerCoordinate,
    /// One `d`-vector per instance, reused by all fields.
    FieldShared,
}

/// Layout of the stacked per-field tables: field `i` owns rows
/// `offsets[i] .. offsets[i] + vocab_sizes[i]` of one `[R x d]` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingLayout {
    pub vocab_sizes: Vec<usize>,
    pub dim: usize,
    offsets: Vec<usize>,
}

impl EmbeddingLayout {
    pub fn new(vocab_sizes: Vec<usize>, dim: usize) -> Self {
        assert!(dim >= 1 && !vocab_sizes.is_empty() && vocab_sizes.iter().all(|&s| s >= 1));
        let offsets = vocab_sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        EmbeddingLayout {
            vocab_sizes,
            dim,
            offsets,
        }
    }

    pub fn fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.vocab_sizes.iter().sum()
    }

    pub fn shape(&self) -> Shape {
        Shape::matrix(self.total_rows(), self.dim)
    }

    /// Table rows touched by a batch, instance-major.
    pub fn rows(&self, batch: &Batch) -> Vec<usize> {
        let f = self.fields();
        assert_eq!(batch.field_count, f, "batch field count does not match the embedding layout");
        batch
            .indices
            .iter()
            .enumerate()
            .map(|(k, &ix)| self.offsets[k % f] + ix as usize)
            .collect()
    }

    /// `N(0, EMBEDDING_INIT_STD^2)` entries.
    pub fn init<S: Scalar>(&self, rng: &mut impl Rng) -> Tensor<S> {
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
        let data = (0..self.total_rows() * self.dim).map(|_| S::lit(normal.sample(rng))).collect();
        Tensor::new(self.shape(), data)
    }

    /// Differentiable lookup: `[B x f*d]`, each row the concatenation of the
    /// instance's field embeddings.
    pub fn lookup<S: Scalar>(&self, tape: &mut Tape<S>, table: Var, batch: &Batch) -> GraphResult<Var> {
        tape.gather(table, &self.rows(batch), batch.len())
    }
}

/// Noise `u * sign(e)` for every entry of `e [B x f*d]` with `u ~ U(0,1)`.
pub fn perturbation<S: Scalar>(e: &[S], fields: usize, dim: usize, mode: NoiseMode, rng: &mut impl Rng) -> Vec<S> {
    let width = fields * dim;
    assert!(width > 0 && e.len() % width == 0);
    let mut out = Vec::with_capacity(e.len());
    let mut shared = vec![0.0f64; dim];
    for row in e.chunks(width) {
        if mode == NoiseMode::FieldShared {
            shared.iter_mut().for_each(|u| *u = rng.gen::<f64>());
        }
        for (k, &x) in row.iter().enumerate() {
            let u = match mode {
                NoiseMode::PerCoordinate => rng.gen::<f64>(),
                NoiseMode::FieldShared => shared[k % dim],
            };
            let sign = if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            out.push(S::lit(u) * sign);
        }
    }
    out
}

/// `E' = E + u * sign(E)`. The noise enters as a constant leaf, so gradients
/// pass straight through to `E`.
pub fn perturb<S: Scalar>(
    tape: &mut Tape<S>,
    e: Var,
    fields: usize,
    dim: usize,
    mode: NoiseMode,
    rng: &mut impl Rng,
) -> GraphResult<Var> {
    let noise = perturbation(tape.value(e), fields, dim, mode, rng);
    let shape = tape.shape(e).clone();
    let noise = tape.leaf(shape, noise)?;
    tape.add(e, noise)
}

/// Number of field pairs `(i, j)` with `i <= j`.
pub fn pair_count(fields: usize) -> usize {
    fields * (fields + 1) / 2
}

/// Hadamard-product view `[B x P*d]` and inner-product view `[B x P]`.
pub fn products<S: Scalar>(tape: &mut Tape<S>, e: Var, fields: usize, dim: usize) -> GraphResult<(Var, Var)> {
    let ep = tape.pair_hadamard(e, fields, dim)?;
    let ip = tape.pair_inner(e, fields, dim)?;
    Ok((ep, ip))
}
