//! Release gate: gradient checks, loss and structural identities, and the
//! AUC oracle, each reported as a named pass/fail line.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_with, Activation, GraphError, GraphResult, Shape, Tape, Tensor, Var};
use crate::data::Batch;
use crate::embedding::{pair_count, products};
use crate::losses::{do_infonce, infonce, logloss, total_loss, LossTerms, LossWeights};
use crate::metrics::auc;
use crate::model::{through_connect, Model, ModelConfig};

pub const FD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const TIME_BUDGET: Duration = Duration::from_secs(60);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Gradients,
    Losses,
    Structure,
    Auc,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub group: Group,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn group_passed(&self, g: Group) -> bool {
        self.checks.iter().filter(|c| c.group == g).all(|c| c.passed)
    }

    pub fn over_budget(&self) -> bool {
        self.seconds > TIME_BUDGET.as_secs_f64()
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Recorder {
    checks: Vec<Check>,
}

impl Recorder {
    fn push(&mut self, group: Group, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            group,
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn bound(&mut self, group: Group, name: &str, err: f64, tol: f64) {
        self.push(group, name, err < tol, format!("max error {err:.3e} (tolerance {tol:.0e})"));
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.numel();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

type Builder = fn(&mut Tape<f64>, &[Var]) -> GraphResult<Var>;

/// One entry per differentiable operation: the scalar graph around it and
/// the shapes and input range of its parameters.
fn op_cases() -> Vec<(&'static str, Builder, Vec<Shape>, (f64, f64))> {
    let m = Shape::matrix;
    let v = Shape::vector;
    vec![
        ("matmul", |t, p| { let y = t.matmul(p[0], p[1])?; let y = t.tanh(y)?; t.sum(y, None) }, vec![m(3, 4), m(4, 2)], (-2.0, 2.0)),
        ("add", |t, p| { let y = t.add(p[0], p[1])?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![v(5), v(5)], (-2.0, 2.0)),
        ("sub", |t, p| { let y = t.sub(p[0], p[1])?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![v(5), v(5)], (-2.0, 2.0)),
        ("mul", |t, p| { let y = t.mul(p[0], p[1])?; t.sum(y, None) }, vec![m(2, 3), m(2, 3)], (-2.0, 2.0)),
        ("mul_scalar_broadcast", |t, p| { let y = t.mul(p[0], p[1])?; let y = t.tanh(y)?; t.sum(y, None) }, vec![m(2, 3), Shape::scalar()], (-2.0, 2.0)),
        ("leaky_relu", |t, p| { let y = t.leaky_relu(p[0])?; let y = t.mul(y, p[1])?; t.sum(y, None) }, vec![v(6), v(6)], (-2.0, 2.0)),
        ("relu", |t, p| { let y = t.relu(p[0])?; let y = t.mul(y, p[1])?; t.sum(y, None) }, vec![v(6), v(6)], (-2.0, 2.0)),
        ("tanh", |t, p| { let y = t.tanh(p[0])?; let y = t.mul(y, p[1])?; t.sum(y, None) }, vec![v(6), v(6)], (-2.0, 2.0)),
        ("sigmoid", |t, p| { let y = t.sigmoid(p[0])?; let y = t.mul(y, p[1])?; t.sum(y, None) }, vec![v(6), v(6)], (-2.0, 2.0)),
        ("log", |t, p| { let y = t.log(p[0])?; t.sum(y, None) }, vec![v(6)], (0.2, 2.0)),
        ("exp", |t, p| { let y = t.exp(p[0])?; t.sum(y, None) }, vec![v(6)], (-2.0, 2.0)),
        ("scale", |t, p| { let y = t.scale(p[0], -1.7); let y = t.mul(y, y)?; t.sum(y, None) }, vec![v(4)], (-2.0, 2.0)),
        ("clamp", |t, p| { let y = t.clamp(p[0], -1.0, 1.0); let y = t.mul(y, p[1])?; t.sum(y, None) }, vec![v(6), v(6)], (-2.0, 2.0)),
        ("sum_axis0", |t, p| { let y = t.sum(p[0], Some(0))?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![m(3, 4)], (-2.0, 2.0)),
        ("mean_axis1", |t, p| { let y = t.mean(p[0], Some(1))?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![m(3, 4)], (-2.0, 2.0)),
        ("concat", |t, p| { let y = t.concat(&[p[0], p[1]], 1)?; let y = t.tanh(y)?; let y = t.mul(y, y)?; t.mean(y, None) }, vec![m(2, 3), m(2, 1)], (-2.0, 2.0)),
        ("reshape", |t, p| { let y = t.reshape(p[0], Shape::matrix(3, 2))?; let y = t.matmul(y, p[1])?; t.sum(y, None) }, vec![v(6), m(2, 2)], (-2.0, 2.0)),
        ("gather", |t, p| { let y = t.gather(p[0], &[0, 2, 2, 1], 2)?; let y = t.tanh(y)?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![m(3, 2)], (-2.0, 2.0)),
        ("pair_hadamard", |t, p| { let y = t.pair_hadamard(p[0], 3, 2)?; let y = t.tanh(y)?; t.sum(y, None) }, vec![m(2, 6)], (-2.0, 2.0)),
        ("pair_inner", |t, p| { let y = t.pair_inner(p[0], 3, 2)?; let y = t.tanh(y)?; t.sum(y, None) }, vec![m(2, 6)], (-2.0, 2.0)),
        ("normalize_rows", |t, p| { let y = t.normalize_rows(p[0])?; let y = t.mul(y, p[1])?; t.sum(y, None) }, vec![m(3, 4), m(3, 4)], (-2.0, 2.0)),
        ("lse_products", |t, p| { let y = t.lse_products(p[0], p[1], 0.7)?; t.sum(y, None) }, vec![m(3, 4), m(5, 4)], (-2.0, 2.0)),
        ("dense_leaky_relu", |t, p| { let y = t.dense(p[0], p[1], p[2], Activation::LeakyRelu)?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![m(3, 4), m(4, 2), v(2)], (-2.0, 2.0)),
        ("dense_relu", |t, p| { let y = t.dense(p[0], p[1], p[2], Activation::Relu)?; let y = t.mul(y, y)?; t.sum(y, None) }, vec![m(3, 4), m(4, 2), v(2)], (-2.0, 2.0)),
        ("dense_tanh", |t, p| { let y = t.dense(p[0], p[1], p[2], Activation::Tanh)?; t.sum(y, None) }, vec![m(3, 4), m(4, 2), v(2)], (-2.0, 2.0)),
        ("dense_sigmoid", |t, p| { let y = t.dense(p[0], p[1], p[2], Activation::Sigmoid)?; t.sum(y, None) }, vec![m(3, 4), m(4, 2), v(2)], (-2.0, 2.0)),
        ("add_row", |t, p| { let y = t.add_row(p[0], p[1])?; let y = t.tanh(y)?; t.sum(y, None) }, vec![m(3, 2), v(2)], (-2.0, 2.0)),
    ]
}

const TRIALS_PER_OP: usize = 4;

fn check_op_gradients(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let mut trials = 0;
    for (name, build, shapes, (lo, hi)) in op_cases() {
        let mut worst = 0.0f64;
        let mut failed = None;
        for _ in 0..TRIALS_PER_OP {
            let params: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(rng, s.clone(), lo, hi)).collect();
            match grad_check(build, &params, FD_EPS, GRAD_TOL) {
                Ok(rep) => worst = worst.max(rep.max_rel_error()),
                Err(e) => failed = Some(e.to_string()),
            }
            trials += 1;
        }
        match failed {
            Some(e) => r.push(Group::Gradients, format!("grad {name}"), false, e),
            None => r.bound(Group::Gradients, &format!("grad {name}"), worst, GRAD_TOL),
        }
    }
    r.push(Group::Gradients, "randomized gradient trials", trials >= 100, format!("{trials} trials"));
}

fn check_linearity(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let x = random_tensor(rng, Shape::matrix(3, 4), -2.0, 2.0);
    let (a, b) = (1.7, -0.6);
    let grads = |coef: (f64, f64)| -> GraphResult<Vec<f64>> {
        let mut t = Tape::new();
        let v = t.leaf(x.shape.clone(), x.data.clone())?;
        let f = t.tanh(v)?;
        let f = t.sum(f, None)?;
        let g = t.mul(v, v)?;
        let g = t.mean(g, None)?;
        let fa = t.scale(f, coef.0);
        let gb = t.scale(g, coef.1);
        let root = t.add(fa, gb)?;
        t.backward(root)?;
        Ok(t.grad(v).into_owned())
    };
    let result = (|| {
        let both = grads((a, b))?;
        let gf = grads((1.0, 0.0))?;
        let gg = grads((0.0, 1.0))?;
        Ok::<f64, GraphError>(
            both.iter()
                .zip(gf.iter().zip(&gg))
                .map(|(s, (f, g))| (s - (a * f + b * g)).abs())
                .fold(0.0, f64::max),
        )
    })();
    match result {
        Ok(err) => r.bound(Group::Gradients, "backward linearity", err, 1e-10),
        Err(e) => r.push(Group::Gradients, "backward linearity", false, e.to_string()),
    }
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        embedding_dim: 3,
        value_dim: 4,
        hidden_dims: vec![5, 4],
        ..ModelConfig::default()
    }
}

fn synthetic_batch(rng: &mut ChaCha8Rng, b: usize, vocab: &[usize]) -> Batch {
    let f = vocab.len();
    Batch {
        rows: (0..b).collect(),
        indices: (0..b * f).map(|k| rng.gen_range(0..vocab[k % f]) as u32).collect(),
        labels: (0..b).map(|i| (i % 2) as f64).collect(),
        field_count: f,
    }
}

fn check_tape_determinism(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let vocab = [4, 3, 5];
    let model = Model::<f64>::new(small_model_config(), vocab.to_vec(), 17).expect("model");
    let batch = synthetic_batch(rng, 6, &vocab);
    let run = || {
        let mut t = Tape::new();
        let vars = model.bind(&mut t).ok()?;
        let mut noise = ChaCha8Rng::seed_from_u64(4);
        let (loss, _, fwd) = model
            .objective(&mut t, &vars, &batch, &LossWeights::default(), Some(&mut noise))
            .ok()?;
        let mut vals = t.value(fwd.logit).to_vec();
        vals.push(t.scalar(loss));
        Some(vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    let (a, b) = (run(), run());
    r.push(Group::Gradients, "tape replay is bit-identical", a.is_some() && a == b, "two builds, same seeds");
}

fn check_full_model_gradient(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let vocab = [4, 3, 5];
    let model = Model::<f64>::new(small_model_config(), vocab.to_vec(), 13).expect("model");
    let batch = synthetic_batch(rng, 4, &vocab);
    let mut params = model.params.tensors().to_vec();
    // larger embeddings keep the pairwise products well away from zero
    params[0].data.iter_mut().for_each(|x| *x *= 50.0);
    let weights = LossWeights::default();
    let rep = grad_check(
        |t, vars| {
            let mut noise = ChaCha8Rng::seed_from_u64(42);
            let (loss, _, _) = model
                .objective(t, vars, &batch, &weights, Some(&mut noise))
                .map_err(|e| GraphError::Contract(e.to_string()))?;
            Ok(loss)
        },
        &params,
        FD_EPS,
        GRAD_TOL,
    );
    match rep {
        Ok(rep) => r.bound(Group::Gradients, "full model loss, 4-instance batch", rep.max_rel_error(), GRAD_TOL),
        Err(e) => r.push(Group::Gradients, "full model loss, 4-instance batch", false, e.to_string()),
    }
}

fn check_loss_heads(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let z = Tensor::new(Shape::vector(1), vec![rng.gen_range(-2.0..2.0)]);
    let rep = grad_check(
        |t, p| {
            let prob = t.sigmoid(p[0])?;
            logloss(t, prob, &[1.0])
        },
        &[z],
        FD_EPS,
        1e-6,
    );
    match rep {
        Ok(rep) => r.bound(Group::Gradients, "logloss head, one instance", rep.max_rel_error(), 1e-6),
        Err(e) => r.push(Group::Gradients, "logloss head, one instance", false, e.to_string()),
    }
    let a = random_tensor(rng, Shape::matrix(3, 5), -2.0, 2.0);
    let b = random_tensor(rng, Shape::matrix(3, 5), -2.0, 2.0);
    let rep = grad_check(|t, p| do_infonce(t, p[0], p[1], 0.2), &[a, b], FD_EPS, 1e-5);
    match rep {
        Ok(rep) => r.bound(Group::Gradients, "uniformity loss, batch of 3", rep.max_rel_error(), 1e-5),
        Err(e) => r.push(Group::Gradients, "uniformity loss, batch of 3", false, e.to_string()),
    }
}

fn check_negative_control(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let x = random_tensor(rng, Shape::vector(8), -2.0, -0.1);
    let build = |t: &mut Tape<f64>, p: &[Var]| {
        let y = t.leaky_relu(p[0])?;
        t.sum(y, None)
    };
    let rep = grad_check_with(build, &[x], FD_EPS, GRAD_TOL, |t| t.corrupt_leaky_relu_backward(0.02));
    let caught = matches!(&rep, Ok(rep) if !rep.passed());
    r.push(
        Group::Gradients,
        "corrupted leaky slope is detected",
        caught,
        "backward slope 0.02 against forward 0.01",
    );
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Pairwise cosine similarities computed with plain loops.
fn sims(v1: &[f64], v2: &[f64], b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|i| (0..b).map(|j| cos(&v1[i * d..(i + 1) * d], &v2[j * d..(j + 1) * d])).collect())
        .collect()
}

fn check_loss_identities(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let mut ratio_err = 0.0f64;
    let mut gap_err = 0.0f64;
    let mut total_err = 0.0f64;
    let mut failure = None;
    for _ in 0..100 {
        let b = rng.gen_range(1..10);
        let d = rng.gen_range(2..12);
        let tau: f64 = rng.gen_range(0.1..1.0);
        let v1: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v2: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = sims(&v1, &v2, b, d);
        // the loss written as a ratio of exponentials
        let ratio: f64 = (0..b)
            .map(|i| -((1.0 / tau).exp() / s[i].iter().map(|x| (x / tau).exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / b as f64;
        let gap: f64 = (0..b).map(|i| (s[i][i] - 1.0) / tau).sum::<f64>() / b as f64;
        let res = (|| -> GraphResult<(f64, f64, f64)> {
            let mut t = Tape::new();
            let a = t.leaf(Shape::matrix(b, d), v1.clone())?;
            let c = t.leaf(Shape::matrix(b, d), v2.clone())?;
            let dl = do_infonce(&mut t, a, c, tau)?;
            let il = infonce(&mut t, a, c, tau)?;
            let ctr = t.scalar_leaf(rng.gen_range(0.0..2.0));
            let c1 = t.scalar_leaf(rng.gen_range(0.0..2.0));
            let c2 = t.scalar_leaf(rng.gen_range(0.0..2.0));
            let w = LossWeights {
                alpha: rng.gen_range(0.0..1.0),
                beta1: rng.gen_range(0.0..1.0),
                beta2: rng.gen_range(0.0..1.0),
                tau,
            };
            let (_, bd) = total_loss(
                &mut t,
                LossTerms {
                    ctr,
                    cl: Some(dl),
                    cos1: Some(c1),
                    cos2: Some(c2),
                },
                &w,
            )?;
            let recomposed = bd.ctr + w.alpha * bd.cl + w.beta1 * bd.cos1 + w.beta2 * bd.cos2;
            Ok((t.scalar(dl), t.scalar(il), (bd.total - recomposed).abs()))
        })();
        match res {
            Ok((dl, il, terr)) => {
                ratio_err = ratio_err.max((dl - ratio).abs());
                gap_err = gap_err.max(((dl - il) - gap).abs());
                total_err = total_err.max(terr);
            }
            Err(e) => failure = Some(e.to_string()),
        }
    }
    if let Some(e) = failure {
        r.push(Group::Losses, "loss identities", false, e);
        return;
    }
    r.bound(Group::Losses, "uniformity loss equals its log-sum-exp rewrite (100 batches)", ratio_err, 1e-10);
    r.bound(Group::Losses, "InfoNCE gap identity (100 batches)", gap_err, 1e-10);
    r.bound(Group::Losses, "weighted total decomposition (100 batches)", total_err, 1e-12);
}

fn check_structure(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    for _ in 0..20 {
        let (f, d, b) = (rng.gen_range(1..8), rng.gen_range(1..6), rng.gen_range(1..5));
        let mut t = Tape::<f64>::new();
        let vals: Vec<f64> = (0..b * f * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let Ok(e) = t.leaf(Shape::matrix(b, f * d), vals) else { continue };
        let Ok((ep, ip)) = products(&mut t, e, f, d) else {
            counts_ok = false;
            continue;
        };
        let p = pair_count(f);
        counts_ok &= p == f * (f + 1) / 2 && t.shape(ip).cols() == p && t.shape(ep).cols() == p * d;
        for (blocks, inner) in t.value(ep).chunks(p * d).zip(t.value(ip).chunks(p)) {
            for (blk, &s) in blocks.chunks(d).zip(inner) {
                worst = worst.max((blk.iter().sum::<f64>() - s).abs());
            }
        }
    }
    r.bound(Group::Structure, "Hadamard blocks sum to inner products", worst, 1e-12);
    r.push(Group::Structure, "pair count f(f+1)/2", counts_ok, "widths P*d and P");

    // a residual block is the through connection fed by its own input
    let residual = (|| -> GraphResult<bool> {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::matrix(2, 3), (0..6).map(|i| i as f64 * 0.3 - 0.8).collect())?;
        let w = t.leaf(Shape::matrix(3, 3), (0..9).map(|i| i as f64 * 0.1 - 0.4).collect())?;
        let bias = t.leaf(Shape::vector(3), vec![0.1, 0.0, -0.1])?;
        let deep = t.dense(x, w, bias, Activation::LeakyRelu)?;
        let out = through_connect(&mut t, deep, x)?;
        let expect: Vec<f64> = t.value(deep).iter().zip(t.value(x)).map(|(a, b)| a + b).collect();
        Ok(t.value(out) == &expect[..])
    })();
    r.push(
        Group::Structure,
        "through connection reduces to a residual block",
        residual.unwrap_or(false),
        "F(x) + x",
    );

    let vocab = [5, 4, 6];
    let homogeneity = (|| -> Option<bool> {
        let mut model = Model::<f64>::new(small_model_config(), vocab.to_vec(), 3).ok()?;
        let names: Vec<String> = model
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("ep.v") || n.starts_with("ip.v"))
            .cloned()
            .collect();
        for n in names {
            model.params.get_mut(&n)?.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let batch = synthetic_batch(rng, 6, &vocab);
        let mut t = Tape::new();
        let vars = model.bind(&mut t).ok()?;
        let fwd = model.forward::<ChaCha8Rng>(&mut t, &vars, &batch, None).ok()?;
        let [v, v1, v2] = fwd.spaces.map(|s| t.value(s.v).to_vec());
        Some(v == v1 && v == v2)
    })();
    r.push(
        Group::Structure,
        "zero auxiliary value weights give identical space values",
        homogeneity.unwrap_or(false),
        "exact equality",
    );
}

fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi > 0.5 && yj < 0.5 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

fn check_auc(r: &mut Recorder, rng: &mut ChaCha8Rng) {
    let mut worst = 0.0f64;
    let mut ok = true;
    for &n in &[2usize, 10, 100, 500, 1000, 2000] {
        for levels in [3u32, 50, 1_000_000] {
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            labels[0] = 1.0;
            labels[n - 1] = 0.0;
            match auc(&scores, &labels) {
                Ok(a) => worst = worst.max((a - pairwise_auc(&scores, &labels)).abs()),
                Err(_) => ok = false,
            }
        }
    }
    r.push(
        Group::Auc,
        "rank AUC equals pairwise oracle, N up to 2000 with ties",
        ok && worst < 1e-12,
        format!("max error {worst:.3e} (tolerance 1e-12)"),
    );
}

/// Runs every check. The time budget is advisory; it does not fail the report.
pub fn run(seed: u64) -> Report {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Recorder { checks: Vec::new() };
    check_op_gradients(&mut r, &mut rng);
    check_linearity(&mut r, &mut rng);
    check_tape_determinism(&mut r, &mut rng);
    check_full_model_gradient(&mut r, &mut rng);
    check_loss_heads(&mut r, &mut rng);
    check_negative_control(&mut r, &mut rng);
    check_loss_identities(&mut r, &mut rng);
    check_structure(&mut r, &mut rng);
    check_auc(&mut r, &mut rng);
    Report {
        checks: r.checks,
        seconds: started.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn fresh_build_passes_every_check() {
        let report = super::run(1);
        let failed: Vec<_> = report.failures().collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
