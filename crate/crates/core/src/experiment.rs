//! Experiment configuration, run artifacts, ablation sweeps and
//! representation dumps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::checkpoint::{self, CheckpointError};
use crate::data::{DataError, EncodedDataset, PreparedDataset};
use crate::losses::LossWeights;
use crate::metrics::Metrics;
use crate::model::{Ablation, Model, ModelConfig, ModelError, Variant};
use crate::trainer::{evaluate, train, EpochRecord, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// True for failures caused by non-finite numbers during a run.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ExperimentError::Train(TrainError::Numeric { .. })
                | ExperimentError::Train(TrainError::Model(ModelError::NonFinite { .. }))
                | ExperimentError::Model(ModelError::NonFinite { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// directory written by the prepare step
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data/frappe/prepared"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parses TOML, then applies `dotted.path=value` overrides in order.
    /// Values are read as TOML literals, falling back to plain strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("override `{ov}` is not key=value")))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(ExperimentError::Config(format!("override `{ov}` has an empty key")));
            }
            let mut table = &mut root;
            for k in &keys[..keys.len() - 1] {
                let entry = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| ExperimentError::Config(format!("override `{ov}`: `{k}` is not a section")))?;
            }
            table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
        }
        let cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.seed > i64::MAX as u64 {
            return Err(ExperimentError::Config("seed must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Final numbers of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub val: Option<Metrics>,
    pub test: Metrics,
    pub dense_params: usize,
    pub embedding_rows: usize,
}

/// Names a configuration the way the ablation table does: `full`,
/// `-CL`, `-A-K`, or `simmhn`.
pub fn variant_label(cfg: &ModelConfig) -> String {
    match cfg.variant {
        Variant::Simmhn => "simmhn".into(),
        Variant::Cetn if cfg.ablations.is_empty() => "full".into(),
        Variant::Cetn => cfg.ablations.iter().map(|a| format!("-{}", a.label())).collect(),
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Output of [`run_training`].
pub struct Run {
    pub summary: RunSummary,
    pub log: TrainLog,
    pub model: Model<f64>,
}

/// Trains on an already loaded dataset and, when `out` is given, writes
/// `config.toml`, `train_log.jsonl`, `train_log.csv`, `steps.jsonl`,
/// `best.ckpt` and `metrics.json` there.
pub fn run_training(
    cfg: &ExperimentConfig,
    data: &PreparedDataset,
    out: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Run, ExperimentError> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    let model = Model::<f64>::new(cfg.model.clone(), data.manifest.vocab_sizes.clone(), cfg.seed)?;
    let outcome = train(model, &data.train, &data.valid, &cfg.loss, &cfg.train, cfg.seed, on_epoch)?;
    let test = evaluate(&outcome.best, &data.test, cfg.train.eval_batch_size)?;
    let summary = RunSummary {
        variant: variant_label(&cfg.model),
        seed: cfg.seed,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.log.epochs.len(),
        early_stopped: outcome.early_stopped,
        val: outcome.best_val,
        test,
        dense_params: outcome.best.dense_param_count(),
        embedding_rows: outcome.best.embedding.total_rows(),
    };
    if let Some(dir) = out {
        write(&dir.join("train_log.jsonl"), &outcome.log.epochs_jsonl())?;
        write(&dir.join("train_log.csv"), &outcome.log.epochs_csv())?;
        write(&dir.join("steps.jsonl"), &outcome.log.steps_jsonl())?;
        let info = serde_json::json!({
            "seed": cfg.seed,
            "best_epoch": summary.best_epoch,
            "val": summary.val,
        });
        checkpoint::save(&outcome.best, info, &dir.join("best.ckpt"))?;
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        write(&dir.join("metrics.json"), &text)?;
    }
    Ok(Run {
        summary,
        log: outcome.log,
        model: outcome.best,
    })
}

/// Row of the ablation comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub summary: RunSummary,
    /// largest per-step value of each auxiliary loss term
    pub max_step_cl: f64,
    pub max_step_cos1: f64,
    pub max_step_cos2: f64,
}

pub const COMPARISON_HEADER: &str =
    "variant,seed,best_epoch,epochs_run,val_auc,val_logloss,test_auc,test_logloss,max_step_cl,max_step_cos1,max_step_cos2";

/// The full model plus each single-component removal, in a fixed order.
pub fn ablation_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut grid = vec![ModelConfig {
        ablations: Default::default(),
        ..base.clone()
    }];
    for a in Ablation::ALL {
        grid.push(ModelConfig {
            ablations: [a].into(),
            ..base.clone()
        });
    }
    grid
}

pub fn comparison_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let s = &r.summary;
        let (va, vl) = s.val.map_or((f64::NAN, f64::NAN), |m| (m.auc, m.logloss));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.variant,
            s.seed,
            s.best_epoch.map_or(String::new(), |e| e.to_string()),
            s.epochs_run,
            va,
            vl,
            s.test.auc,
            s.test.logloss,
            r.max_step_cl,
            r.max_step_cos1,
            r.max_step_cos2
        ));
    }
    out
}

/// Trains every variant of [`ablation_grid`] with the same seed; each run
/// writes into `out/<label>/` and the table goes to `out/comparison.csv`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &PreparedDataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<AblationRow>, ExperimentError> {
    if cfg.model.variant != Variant::Cetn {
        return Err(ExperimentError::Config("ablation sweeps need the cetn variant".into()));
    }
    let mut rows = Vec::new();
    for model_cfg in ablation_grid(&cfg.model) {
        let label = variant_label(&model_cfg);
        let run_cfg = ExperimentConfig {
            model: model_cfg,
            ..cfg.clone()
        };
        let dir = out.map(|o| o.join(&label));
        let run = run_training(&run_cfg, data, dir.as_deref(), |r| progress(&label, r))?;
        let max = |f: fn(&crate::trainer::StepRecord) -> f64| {
            run.log.steps.iter().map(f).fold(0.0f64, |a, v| a.max(v.abs()))
        };
        rows.push(AblationRow {
            max_step_cl: max(|s| s.loss.cl),
            max_step_cos1: max(|s| s.loss.cos1),
            max_step_cos2: max(|s| s.loss.cos2),
            summary: run.summary,
        });
    }
    if let Some(dir) = out {
        write(&dir.join("comparison.csv"), &comparison_csv(&rows))?;
    }
    Ok(rows)
}

/// Value vectors of `n` sampled instances, three rows each (one per space):
/// `instance,space,v0..v{d_v-1}`.
pub fn repr_dump(model: &Model<f64>, data: &EncodedDataset, n: usize, seed: u64) -> Result<String, ExperimentError> {
    if n == 0 || n > data.len() {
        return Err(ExperimentError::Config(format!(
            "cannot sample {n} instances from a split of {}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(n);
    let dv = model.config.effective_value_dim();
    let mut out = String::from("instance,space");
    for k in 0..dv {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for chunk in order.chunks(1024) {
        let batch = data.batch(chunk);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape)?;
        let fwd = model.forward::<ChaCha8Rng>(&mut tape, &vars, &batch, None)?;
        for (i, &row) in chunk.iter().enumerate() {
            for (s, space) in fwd.spaces.iter().enumerate() {
                out.push_str(&format!("{row},{s}"));
                for x in &tape.value(space.v)[i * dv..(i + 1) * dv] {
                    out.push_str(&format!(",{x}"));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, 10_000);
        assert_eq!(c.train.patience, 2);
        assert_eq!(c.train.max_epochs, 100);
        assert_eq!(c.model.embedding_dim, 20);
        assert_eq!(c.model.value_dim, 64);
        assert_eq!(c.loss.tau, 0.2);
    }

    #[test]
    fn overrides_apply_after_file() {
        let c = ExperimentConfig::from_toml(
            "seed = 1\n[loss]\nalpha = 0.3\n",
            &["loss.alpha=0".into(), "model.ablations=[\"K\"]".into(), "data.dir=some/where".into()],
        )
        .unwrap();
        assert_eq!(c.loss.alpha, 0.0);
        assert!(c.model.has(Ablation::K));
        assert_eq!(c.data.dir, PathBuf::from("some/where"));
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn echo_round_trips_exactly() {
        let c = ExperimentConfig::from_toml("[loss]\nalpha = 0.15\ntau = 0.2\n", &[]).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.loss.alpha, 0.15);
        assert_eq!(back.loss.tau, 0.2);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nlearning_rate = 0.1\n", &[]),
            Err(ExperimentError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("", &["loss.tau=0".into()]),
            Err(ExperimentError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("", &["nokey".into()]),
            Err(ExperimentError::Config(_))
        ));
    }

    #[test]
    fn grid_has_seven_variants() {
        let labels: Vec<String> = ablation_grid(&ModelConfig::default()).iter().map(variant_label).collect();
        assert_eq!(labels, ["full", "-A", "-CL", "-COS", "-K", "-P", "-T"]);
    }
}
