//! The three-space CTR graph, its single-scalar-value sibling and the
//! ablation wirings.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, GraphError, Shape, Tape, Tensor, Var};
use crate::data::Batch;
use crate::embedding::{pair_count, perturb, products, EmbeddingLayout, NoiseMode};
use crate::losses::{cos_loss, do_infonce, infonce, logloss, total_loss, LossBreakdown, LossTerms, LossWeights};
use crate::scalar::Scalar;

pub const SPACE_NAMES: [&str; 3] = ["main", "ep", "ip"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("non-finite values produced by `{layer}`")]
    NonFinite { layer: String },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Cetn,
    Simmhn,
}

/// Removable components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// one activation (relu) for every value MLP
    A,
    /// no contrastive loss
    CL,
    /// no cosine losses
    COS,
    /// space weights fixed to 1
    K,
    /// auxiliary spaces see the plain embeddings
    P,
    /// no through connections
    T,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Ablation::A, Ablation::CL, Ablation::COS, Ablation::K, Ablation::P, Ablation::T];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::A => "A",
            Ablation::CL => "CL",
            Ablation::COS => "COS",
            Ablation::K => "K",
            Ablation::P => "P",
            Ablation::T => "T",
        }
    }
}

/// Hidden activation of each space's value MLP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceActivations {
    pub main: Activation,
    pub ep: Activation,
    pub ip: Activation,
}

impl Default for SpaceActivations {
    fn default() -> Self {
        SpaceActivations {
            main: Activation::LeakyRelu,
            ep: Activation::Relu,
            ip: Activation::Tanh,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// one projection for all spaces
    #[default]
    Shared,
    PerSpace,
}

/// Which auxiliary value vectors enter the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveSource {
    /// the final space outputs, main-space values included
    #[default]
    AfterThrough,
    /// the auxiliary MLP outputs alone
    BeforeThrough,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveLoss {
    #[default]
    DoInfonce,
    Infonce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub ablations: BTreeSet<Ablation>,
    pub embedding_dim: usize,
    pub value_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activations: SpaceActivations,
    pub fusion: FusionMode,
    pub contrastive_source: ContrastiveSource,
    pub contrastive_loss: ContrastiveLoss,
    /// add sign-aligned noise to the auxiliary inputs while training
    pub perturb: bool,
    pub noise: NoiseMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Cetn,
            ablations: BTreeSet::new(),
            embedding_dim: 20,
            value_dim: 64,
            hidden_dims: vec![400, 400, 400],
            activations: SpaceActivations::default(),
            fusion: FusionMode::Shared,
            contrastive_source: ContrastiveSource::AfterThrough,
            contrastive_loss: ContrastiveLoss::DoInfonce,
            perturb: true,
            noise: NoiseMode::PerCoordinate,
        }
    }
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.embedding_dim == 0 || self.value_dim == 0 {
            return Err(ModelError::Config("embedding_dim and value_dim must be at least 1".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::Config("hidden layer widths must be at least 1".into()));
        }
        if self.variant == Variant::Simmhn && !self.ablations.is_empty() {
            return Err(ModelError::Config("ablations apply to the cetn variant only".into()));
        }
        Ok(())
    }

    /// Width of every space's value vector.
    pub fn effective_value_dim(&self) -> usize {
        match self.variant {
            Variant::Cetn => self.value_dim,
            Variant::Simmhn => 1,
        }
    }

    /// Hidden activation of the value MLP of space `i`.
    pub fn value_activation(&self, space: usize) -> Activation {
        if self.variant == Variant::Simmhn {
            return Activation::LeakyRelu;
        }
        if self.has(Ablation::A) {
            return Activation::Relu;
        }
        [self.activations.main, self.activations.ep, self.activations.ip][space]
    }

    /// Loss weights after the CL/COS ablations; the single-value variant has
    /// only the click loss.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        match self.variant {
            Variant::Simmhn => w.effective(true, true),
            Variant::Cetn => w.effective(self.has(Ablation::CL), self.has(Ablation::COS)),
        }
    }
}

/// Fully connected stack: hidden layers then one output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// `(fan_in, fan_out)` of each layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Key and value MLPs of one semantic space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyValueBlock {
    pub space: usize,
    pub key: MlpSpec,
    pub value: MlpSpec,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S> Default for ParamSet<S> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S> ParamSet<S> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Nodes of one space's key/value pair. `k` is `None` when space weights
/// are fixed to 1.
#[derive(Clone, Copy, Debug)]
pub struct SpaceOutput {
    pub k: Option<Var>,
    /// value vector entering the fusion, `[B x d_v]`
    pub v: Var,
    /// value MLP output before the through connection
    pub v_mlp: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[B]`
    pub logit: Var,
    /// `[B]`, sigmoid of the logit
    pub prob: Var,
    pub spaces: [SpaceOutput; 3],
}

pub const EMBEDDING_PARAM: &str = "embedding";

fn mlp_prefix(space: usize, key: bool) -> String {
    format!("{}.{}", SPACE_NAMES[space], if key { "k" } else { "v" })
}

/// A model: configuration, embedding layout and parameter values.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub embedding: EmbeddingLayout,
    pub blocks: [KeyValueBlock; 3],
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    /// Glorot-uniform weights, zero biases and Gaussian embeddings, all drawn
    /// from one seeded stream in parameter order.
    pub fn new(config: ModelConfig, vocab_sizes: Vec<usize>, seed: u64) -> ModelResult<Self> {
        let (embedding, blocks, names_shapes) = Self::layout(&config, vocab_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        for (name, shape) in names_shapes {
            let t = if name == EMBEDDING_PARAM {
                embedding.init(&mut rng)
            } else if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                glorot_uniform(shape, &mut rng)
            };
            params.push(name, t);
        }
        Ok(Model {
            config,
            embedding,
            blocks,
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, vocab_sizes: Vec<usize>, params: ParamSet<S>) -> ModelResult<Self> {
        let (embedding, blocks, names_shapes) = Self::layout(&config, vocab_sizes)?;
        if names_shapes.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                names_shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in names_shapes.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != pn || *shape != pt.shape {
                return Err(ModelError::Config(format!(
                    "parameter `{pn}` {} does not match expected `{name}` {shape}",
                    pt.shape
                )));
            }
        }
        Ok(Model {
            config,
            embedding,
            blocks,
            params,
        })
    }

    #[allow(clippy::type_complexity)]
    fn layout(
        config: &ModelConfig,
        vocab_sizes: Vec<usize>,
    ) -> ModelResult<(EmbeddingLayout, [KeyValueBlock; 3], Vec<(String, Shape)>)> {
        config.validate()?;
        if vocab_sizes.is_empty() || vocab_sizes.contains(&0) {
            return Err(ModelError::Config("every field needs a vocabulary of size at least 1".into()));
        }
        let f = vocab_sizes.len();
        let d = config.embedding_dim;
        let embedding = EmbeddingLayout::new(vocab_sizes, d);
        let plain = config.variant == Variant::Cetn && config.has(Ablation::P);
        let inputs = if plain {
            [f * d; 3]
        } else {
            [f * d, pair_count(f) * d, pair_count(f)]
        };
        let dv = config.effective_value_dim();
        let blocks = [0, 1, 2].map(|space| KeyValueBlock {
            space,
            key: MlpSpec {
                input_dim: inputs[space],
                hidden_dims: config.hidden_dims.clone(),
                output_dim: 1,
                hidden_activation: Activation::LeakyRelu,
                output_activation: Activation::LeakyRelu,
            },
            value: MlpSpec {
                input_dim: inputs[space],
                hidden_dims: config.hidden_dims.clone(),
                output_dim: dv,
                hidden_activation: config.value_activation(space),
                output_activation: Activation::None,
            },
        });
        let mut names = vec![(EMBEDDING_PARAM.to_string(), embedding.shape())];
        for block in &blocks {
            for (key, spec) in [(false, &block.value), (true, &block.key)] {
                let prefix = mlp_prefix(block.space, key);
                for (l, (i, o)) in spec.layers().into_iter().enumerate() {
                    names.push((format!("{prefix}.{l}.w"), Shape::matrix(i, o)));
                    names.push((format!("{prefix}.{l}.b"), Shape::vector(o)));
                }
            }
        }
        if config.variant == Variant::Cetn {
            match config.fusion {
                FusionMode::Shared => {
                    names.push(("fusion.w".into(), Shape::matrix(dv, 1)));
                    names.push(("fusion.b".into(), Shape::vector(1)));
                }
                FusionMode::PerSpace => {
                    for s in SPACE_NAMES {
                        names.push((format!("fusion.{s}.w"), Shape::matrix(dv, 1)));
                        names.push((format!("fusion.{s}.b"), Shape::vector(1)));
                    }
                }
            }
        }
        Ok((embedding, blocks, names))
    }

    /// Closed-form count of all parameters except the embedding table.
    pub fn dense_param_count(&self) -> usize {
        let mlps: usize = self
            .blocks
            .iter()
            .map(|b| b.key.param_count() + b.value.param_count())
            .sum();
        let dv = self.config.effective_value_dim();
        let fusion = match (self.config.variant, self.config.fusion) {
            (Variant::Simmhn, _) => 0,
            (Variant::Cetn, FusionMode::Shared) => dv + 1,
            (Variant::Cetn, FusionMode::PerSpace) => 3 * (dv + 1),
        };
        mlps + fusion
    }

    /// Puts every parameter on the tape as a leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape<S>) -> ModelResult<Vec<Var>> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.shape.clone(), t.data.clone()).map_err(ModelError::from))
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.position(name).unwrap_or_else(|| panic!("no parameter `{name}`"))]
    }

    fn mlp(&self, tape: &mut Tape<S>, vars: &[Var], x: Var, spec: &MlpSpec, prefix: &str) -> ModelResult<Var> {
        let layers = spec.layers().len();
        let mut h = x;
        for l in 0..layers {
            let act = if l + 1 == layers {
                spec.output_activation
            } else {
                spec.hidden_activation
            };
            let w = self.var(vars, &format!("{prefix}.{l}.w"));
            let b = self.var(vars, &format!("{prefix}.{l}.b"));
            h = tape.dense(h, w, b, act)?;
            check_finite(tape, h, || format!("{prefix}.{l}"))?;
        }
        Ok(h)
    }

    /// Builds the prediction graph for a batch. Noise is drawn only when
    /// `rng` is given (training); evaluation passes `None`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        batch: &Batch,
        rng: Option<&mut R>,
    ) -> ModelResult<Forward> {
        let cfg = &self.config;
        let (f, d) = (self.embedding.fields(), self.embedding.dim);
        let table = self.var(vars, EMBEDDING_PARAM);
        let e = self.embedding.lookup(tape, table, batch)?;
        check_finite(tape, e, || EMBEDDING_PARAM.to_string())?;

        let cetn = cfg.variant == Variant::Cetn;
        let inputs = if cetn && cfg.has(Ablation::P) {
            [e, e, e]
        } else {
            let source = match rng {
                Some(rng) if cetn && cfg.perturb => perturb(tape, e, f, d, cfg.noise, rng)?,
                _ => e,
            };
            let (ep, ip) = products(tape, source, f, d)?;
            [e, ep, ip]
        };

        let fixed_k = cetn && cfg.has(Ablation::K);
        let through = cetn && !cfg.has(Ablation::T);
        let mut spaces = Vec::with_capacity(3);
        for (block, &x) in self.blocks.iter().zip(&inputs) {
            let v_mlp = self.mlp(tape, vars, x, &block.value, &mlp_prefix(block.space, false))?;
            let k = if fixed_k {
                None
            } else {
                Some(self.mlp(tape, vars, x, &block.key, &mlp_prefix(block.space, true))?)
            };
            spaces.push(SpaceOutput { k, v: v_mlp, v_mlp });
        }
        if through {
            let main = spaces[0].v;
            for s in &mut spaces[1..] {
                s.v = through_connect(tape, s.v_mlp, main)?;
            }
        }

        let b = batch.len();
        let mut logit = None;
        for (i, s) in spaces.iter().enumerate() {
            let score = if cetn {
                let (w, bias) = match cfg.fusion {
                    FusionMode::Shared => ("fusion.w".to_string(), "fusion.b".to_string()),
                    FusionMode::PerSpace => (
                        format!("fusion.{}.w", SPACE_NAMES[i]),
                        format!("fusion.{}.b", SPACE_NAMES[i]),
                    ),
                };
                let (w, bias) = (self.var(vars, &w), self.var(vars, &bias));
                tape.dense(s.v, w, bias, Activation::None)?
            } else {
                s.v
            };
            let term = match s.k {
                Some(k) => tape.mul(k, score)?,
                None => score,
            };
            logit = Some(match logit {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let logit = tape.reshape(logit.expect("three spaces"), Shape::vector(b))?;
        check_finite(tape, logit, || "fusion".to_string())?;
        let prob = tape.sigmoid(logit)?;
        Ok(Forward {
            logit,
            prob,
            spaces: [spaces[0], spaces[1], spaces[2]],
        })
    }

    /// Training objective for a batch: click logloss plus the weighted
    /// contrastive and cosine terms. Terms with zero effective weight are not
    /// built and report 0.
    pub fn objective<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        batch: &Batch,
        weights: &LossWeights,
        rng: Option<&mut R>,
    ) -> ModelResult<(Var, LossBreakdown, Forward)> {
        let fwd = self.forward(tape, vars, batch, rng)?;
        let w = self.config.effective_weights(weights);
        let labels: Vec<S> = batch.labels.iter().map(|&y| S::lit(y)).collect();
        let ctr = logloss(tape, fwd.prob, &labels)?;
        let [main, s1, s2] = fwd.spaces;
        let cl = if w.alpha != 0.0 {
            let (a, b) = match self.config.contrastive_source {
                ContrastiveSource::AfterThrough => (s1.v, s2.v),
                ContrastiveSource::BeforeThrough => (s1.v_mlp, s2.v_mlp),
            };
            Some(match self.config.contrastive_loss {
                ContrastiveLoss::DoInfonce => do_infonce(tape, a, b, w.tau)?,
                ContrastiveLoss::Infonce => infonce(tape, a, b, w.tau)?,
            })
        } else {
            None
        };
        let cos1 = if w.beta1 != 0.0 { Some(cos_loss(tape, main.v, s1.v)?) } else { None };
        let cos2 = if w.beta2 != 0.0 { Some(cos_loss(tape, main.v, s2.v)?) } else { None };
        let (total, breakdown) = total_loss(tape, LossTerms { ctr, cl, cos1, cos2 }, &w)?;
        if !breakdown.is_finite() {
            return Err(ModelError::NonFinite { layer: "loss".into() });
        }
        Ok((total, breakdown, fwd))
    }

    /// Click probabilities for a batch with noise disabled.
    pub fn predict(&self, batch: &Batch) -> ModelResult<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let fwd = self.forward::<ChaCha8Rng>(&mut tape, &vars, batch, None)?;
        Ok(tape.value(fwd.prob).iter().map(|p| p.to_f64_lossy()).collect())
    }
}

/// Horizontal connection from a shallow branch into a deep one: `deep + shallow`.
pub fn through_connect<S: Scalar>(tape: &mut Tape<S>, deep: Var, shallow: Var) -> Result<Var, GraphError> {
    if tape.shape(deep) != tape.shape(shallow) {
        return Err(GraphError::Dimension {
            op: "through_connect",
            left: tape.shape(deep).clone(),
            right: tape.shape(shallow).clone(),
        });
    }
    tape.add(deep, shallow)
}

fn check_finite<S: Scalar>(tape: &Tape<S>, v: Var, layer: impl FnOnce() -> String) -> ModelResult<()> {
    if tape.is_finite(v) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer: layer() })
    }
}

/// Bound of the Glorot-uniform initializer for a `fan_in x fan_out` layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot_uniform<S: Scalar>(shape: Shape, rng: &mut impl Rng) -> Tensor<S> {
    let a = glorot_bound(shape.rows(), shape.cols());
    let data = (0..shape.numel()).map(|_| S::lit(rng.gen_range(-a..a))).collect();
    Tensor::new(shape, data)
}
