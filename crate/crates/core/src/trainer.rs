//! Adam, the epoch loop with plateau decay and early stopping, evaluation.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{Batch, EncodedDataset};
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::{evaluate as score, MetricError, Metrics};
use crate::model::{Model, ModelError, EMBEDDING_PARAM};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("numeric failure at epoch {epoch}, step {step}: {detail}")]
    Numeric { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { config, m, v, t: 0 }
    }

    /// Bias-corrected update of `param` (tensor `index`) over the given
    /// entries. The step counter must already have been advanced.
    fn update_range<S: Scalar>(&mut self, index: usize, param: &mut [S], grad: &[S], range: std::ops::Range<usize>, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        for k in range {
            let g = grad[k].to_f64_lossy();
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            param[k] -= S::lit(step);
        }
    }
}

/// One Adam step over named parameters. Tensors listed in `sparse_rows`
/// (`(tensor index, row width, touched rows)`) only update the touched rows;
/// every other tensor is updated densely.
///
/// A non-finite gradient aborts before any parameter changes and names the
/// offending tensor.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState,
    names: &[String],
    params: &mut [crate::autodiff::Tensor<S>],
    grads: &[Vec<S>],
    lr: f64,
    sparse_rows: Option<(usize, usize, &BTreeSet<usize>)>,
) -> Result<(), String> {
    for (name, g) in names.iter().zip(grads) {
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(format!("non-finite gradient in `{name}` at entry {k}"));
        }
    }
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        match sparse_rows {
            Some((si, width, rows)) if si == i => {
                for &r in rows {
                    state.update_range(i, &mut p.data, g, r * width..(r + 1) * width, lr);
                }
            }
            _ => {
                let n = p.data.len();
                state.update_range(i, &mut p.data, g, 0..n, lr);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    #[default]
    Auc,
    Logloss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// multiplier applied to the learning rate after an epoch without improvement
    pub lr_decay: f64,
    pub stop_metric: StopMetric,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 10_000,
            eval_batch_size: 10_000,
            patience: 2,
            max_epochs: 100,
            lr_decay: 0.1,
            stop_metric: StopMetric::Auc,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_ctr: f64,
    pub train_cl: f64,
    pub train_cos1: f64,
    pub train_cos2: f64,
    pub val_auc: f64,
    pub val_logloss: f64,
    /// learning rate used during the epoch
    pub lr: f64,
    pub seconds: f64,
}

/// Loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,train_total,train_ctr,train_cl,train_cos1,train_cos2,val_auc,val_logloss,lr,seconds";

impl TrainLog {
    pub fn epochs_jsonl(&self) -> String {
        jsonl(&self.epochs)
    }

    pub fn steps_jsonl(&self) -> String {
        jsonl(&self.steps)
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from(EPOCH_CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.train_total,
                r.train_ctr,
                r.train_cl,
                r.train_cos1,
                r.train_cos2,
                r.val_auc,
                r.val_logloss,
                r.lr,
                r.seconds
            ));
        }
        out
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Everything [`train`] produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// parameters from the epoch with the best validation score
    pub best: Model<S>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    pub log: TrainLog,
    /// whether early stopping ended the run
    pub early_stopped: bool,
}

/// Full-pass AUC and logloss with noise disabled.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &EncodedDataset, batch_size: usize) -> Result<Metrics, TrainError> {
    let probs = predict_all(model, data, batch_size)?;
    Ok(score(&probs, data.labels())?)
}

pub fn predict_all<S: Scalar>(model: &Model<S>, data: &EncodedDataset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    if data.vocab_sizes() != &model.embedding.vocab_sizes[..] {
        return Err(TrainError::Config(format!(
            "dataset vocabulary sizes {:?} do not match the model's {:?}",
            data.vocab_sizes(),
            model.embedding.vocab_sizes
        )));
    }
    let mut probs = Vec::with_capacity(data.len());
    for batch in data.sequential_batches(batch_size) {
        probs.extend(model.predict(&batch)?);
    }
    Ok(probs)
}

fn improved(metric: StopMetric, new: &Metrics, best: Option<&Metrics>) -> bool {
    match (metric, best) {
        (_, None) => true,
        (StopMetric::Auc, Some(b)) => new.auc > b.auc,
        (StopMetric::Logloss, Some(b)) => new.logloss < b.logloss,
    }
}

/// One forward/backward pass and Adam update on a batch.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    state: &mut AdamState,
    batch: &Batch,
    weights: &LossWeights,
    lr: f64,
    noise: &mut ChaCha8Rng,
) -> Result<LossBreakdown, String> {
    let mut tape = Tape::new();
    tape.set_retain_grads(false);
    let vars = model.bind(&mut tape).map_err(|e| e.to_string())?;
    let (loss, breakdown, _) = model
        .objective(&mut tape, &vars, batch, weights, Some(noise))
        .map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<S>> = vars.iter().map(|&v| tape.grad(v).into_owned()).collect();
    drop(tape);
    let emb = model.params.position(EMBEDDING_PARAM).expect("embedding parameter");
    let rows: BTreeSet<usize> = model.embedding.rows(batch).into_iter().collect();
    let width = model.embedding.dim;
    let names = model.params.names().to_vec();
    adam_step(state, &names, model.params.tensors_mut(), &grads, lr, Some((emb, width, &rows)))?;
    Ok(breakdown)
}

/// Trains from `model`'s current parameters. After every epoch the
/// validation split is scored; an epoch without strict improvement
/// multiplies the learning rate by `lr_decay`, and `patience` such epochs in
/// a row stop the run.
pub fn train<S: Scalar>(
    mut model: Model<S>,
    train_data: &EncodedDataset,
    valid: &EncodedDataset,
    weights: &LossWeights,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    weights.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    for (name, d) in [("training", train_data), ("validation", valid)] {
        if d.is_empty() {
            return Err(TrainError::Config(format!("{name} split is empty")));
        }
        if d.vocab_sizes() != &model.embedding.vocab_sizes[..] {
            return Err(TrainError::Config(format!(
                "{name} split vocabulary sizes {:?} do not match the model's {:?}",
                d.vocab_sizes(),
                model.embedding.vocab_sizes
            )));
        }
    }
    let mut state = AdamState::new(cfg.adam, model.params.tensors().iter().map(|t| t.numel()));
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(u64::MAX);
    let mut lr = cfg.lr;
    let mut log = TrainLog::default();
    let mut best = model.clone();
    let mut best_val: Option<Metrics> = None;
    let mut best_epoch = None;
    let mut strikes = 0;
    let mut early_stopped = false;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut sums = LossBreakdown::default();
        for (step, batch) in train_data.batches(cfg.batch_size, seed, epoch as u64).enumerate() {
            let b = train_step(&mut model, &mut state, &batch, weights, lr, &mut noise)
                .map_err(|detail| TrainError::Numeric { epoch, step, detail })?;
            let n = batch.len() as f64;
            sums.total += b.total * n;
            sums.ctr += b.ctr * n;
            sums.cl += b.cl * n;
            sums.cos1 += b.cos1 * n;
            sums.cos2 += b.cos2 * n;
            log.steps.push(StepRecord {
                epoch,
                step,
                batch_size: batch.len(),
                loss: b,
            });
        }
        let val = evaluate(&model, valid, cfg.eval_batch_size).map_err(|e| match e {
            TrainError::Model(m) => TrainError::Numeric {
                epoch,
                step: usize::MAX,
                detail: format!("validation: {m}"),
            },
            other => other,
        })?;
        let n = train_data.len() as f64;
        let record = EpochRecord {
            epoch,
            train_total: sums.total / n,
            train_ctr: sums.ctr / n,
            train_cl: sums.cl / n,
            train_cos1: sums.cos1 / n,
            train_cos2: sums.cos2 / n,
            val_auc: val.auc,
            val_logloss: val.logloss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
        if improved(cfg.stop_metric, &val, best_val.as_ref()) {
            best_val = Some(val);
            best_epoch = Some(epoch);
            best = model.clone();
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= cfg.patience {
                early_stopped = true;
                break;
            }
            lr *= cfg.lr_decay;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val,
        log,
        early_stopped,
    })
}
