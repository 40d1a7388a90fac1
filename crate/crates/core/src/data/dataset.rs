use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Index-encoded instances: `N x f` field indices plus 0/1 labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    field_count: usize,
    vocab_sizes: Vec<usize>,
    indices: Vec<u32>,
    labels: Vec<f64>,
}

impl EncodedDataset {
    /// Checks every index against its field's vocabulary size and every label
    /// for being 0 or 1.
    pub fn new(vocab_sizes: Vec<usize>, indices: Vec<u32>, labels: Vec<f64>) -> Result<Self, DataError> {
        let f = vocab_sizes.len();
        if f == 0 {
            return Err(DataError::Config("dataset has no fields".into()));
        }
        if indices.len() != labels.len() * f {
            return Err(DataError::Config(format!(
                "{} indices for {} rows of {f} fields",
                indices.len(),
                labels.len()
            )));
        }
        for (k, &ix) in indices.iter().enumerate() {
            let field = k % f;
            if ix as usize >= vocab_sizes[field] {
                return Err(DataError::Config(format!(
                    "row {} field {field}: index {ix} outside vocabulary of size {}",
                    k / f,
                    vocab_sizes[field]
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(DataError::Config(format!("label {bad} is not 0 or 1")));
        }
        Ok(EncodedDataset {
            field_count: f,
            vocab_sizes,
            indices,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn field_count(&self) -> usize {
        self.field_count
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.field_count..(i + 1) * self.field_count]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn subset(&self, rows: &[usize]) -> EncodedDataset {
        let mut indices = Vec::with_capacity(rows.len() * self.field_count);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            indices.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        EncodedDataset {
            field_count: self.field_count,
            vocab_sizes: self.vocab_sizes.clone(),
            indices,
            labels,
        }
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let sub = self.subset(rows);
        Batch {
            rows: rows.to_vec(),
            indices: sub.indices,
            labels: sub.labels,
            field_count: self.field_count,
        }
    }

    /// Shuffled mini-batches for one epoch. The order depends only on
    /// `(seed, epoch)`, and every instance appears exactly once.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be at least 1");
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Batches {
            data: self,
            order,
            batch_size,
            next: 0,
        }
    }

    /// Batches in storage order, for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be at least 1");
        Batches {
            data: self,
            order: (0..self.len()).collect(),
            batch_size,
            next: 0,
        }
    }
}

/// A mini-batch of `B` instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// positions of the instances in their dataset
    pub rows: Vec<usize>,
    /// `B x f` field indices, instance-major
    pub indices: Vec<u32>,
    pub labels: Vec<f64>,
    pub field_count: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Batches<'a> {
    data: &'a EncodedDataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.data.batch(&self.order[self.next..end]);
        self.next = end;
        Some(batch)
    }
}

/// Train/validation/test ratios and the shuffle seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [f64; 3], seed: u64) -> Result<Self, DataError> {
        let spec = SplitSpec { ratios, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(DataError::Config(format!("split ratios must be non-negative: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Sizes for `n` rows: validation and test sizes are `n * ratio` rounded
    /// to the nearest integer, the remainder goes to training.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3], DataError> {
        self.validate()?;
        let val = (n as f64 * self.ratios[1]).round() as usize;
        let test = (n as f64 * self.ratios[2]).round() as usize;
        let train = n.checked_sub(val + test).unwrap_or(0);
        if train == 0 || val == 0 || test == 0 {
            return Err(DataError::Config(format!(
                "split of {n} rows by {:?} leaves an empty partition ({train}, {val}, {test})",
                self.ratios
            )));
        }
        Ok([train, val, test])
    }

    /// Shuffles `0..n` with the seed and cuts it into train/val/test.
    pub fn partition(&self, n: usize) -> Result<[Vec<usize>; 3], DataError> {
        let [train, val, _] = self.sizes(n)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let test = order.split_off(train + val);
        let valid = order.split_off(train);
        Ok([order, valid, test])
    }
}
