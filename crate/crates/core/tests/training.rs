use cetn::experiment::{run_ablation, run_training, ExperimentConfig};
use cetn::losses::LossWeights;
use cetn::model::{Model, ModelConfig};
use cetn::synthetic::separable;
use cetn::trainer::{evaluate, train, TrainConfig};

fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        model: ModelConfig {
            embedding_dim: 8,
            value_dim: 8,
            hidden_dims: vec![32, 32],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            lr: 0.01,
            batch_size: 32,
            eval_batch_size: 64,
            max_epochs: 20,
            patience: 3,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn separable_data_reaches_high_validation_auc() {
    let data = separable(200, 3).unwrap();
    let cfg = small_experiment();
    let run = run_training(&cfg, &data, None, |_| {}).unwrap();
    let best = run.summary.val.unwrap();
    assert!(best.auc >= 0.99, "best validation AUC {}", best.auc);
    assert!(run.summary.epochs_run <= 20);
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let data = separable(100, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let model = Model::<f64>::new(small_experiment().model, data.manifest.vocab_sizes.clone(), 9).unwrap();
    let out = train(model.clone(), &data.train, &data.valid, &LossWeights::default(), &cfg, 9, |_| {}).unwrap();
    assert!(out.log.epochs.is_empty());
    assert_eq!(out.best.params, model.params);
    assert_eq!(out.best_epoch, None);
}

#[test]
fn identical_runs_have_identical_trajectories() {
    let data = separable(150, 2).unwrap();
    let mut cfg = small_experiment();
    cfg.train.max_epochs = 3;
    let a = run_training(&cfg, &data, None, |_| {}).unwrap();
    let b = run_training(&cfg, &data, None, |_| {}).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.log.steps, b.log.steps);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn every_epoch_touches_every_instance_once() {
    let data = separable(130, 8).unwrap();
    let mut cfg = small_experiment();
    cfg.train.max_epochs = 2;
    cfg.train.patience = 5;
    let run = run_training(&cfg, &data, None, |_| {}).unwrap();
    for epoch in 0..run.log.epochs.len() {
        let seen: usize = run.log.steps.iter().filter(|s| s.epoch == epoch).map(|s| s.batch_size).sum();
        assert_eq!(seen, data.train.len());
    }
}

#[test]
fn early_stopping_follows_patience_and_decay() {
    let data = separable(200, 3).unwrap();
    let mut cfg = small_experiment();
    cfg.train.max_epochs = 40;
    cfg.train.patience = 2;
    let run = run_training(&cfg, &data, None, |_| {}).unwrap();
    let epochs = &run.log.epochs;
    let mut best = f64::NEG_INFINITY;
    let mut strikes = 0;
    for (i, e) in epochs.iter().enumerate() {
        let struck = e.val_auc <= best;
        if struck {
            strikes += 1;
        } else {
            best = e.val_auc;
            strikes = 0;
        }
        if let Some(next) = epochs.get(i + 1) {
            let expect = if struck { e.lr * cfg.train.lr_decay } else { e.lr };
            assert_eq!(next.lr, expect, "epoch {i}");
            assert!(strikes < cfg.train.patience, "run continued past the last strike");
        }
    }
    if run.summary.early_stopped {
        assert_eq!(strikes, cfg.train.patience);
    }
    let ev = evaluate(&run.model, &data.valid, 64).unwrap();
    assert_eq!(ev, run.summary.val.unwrap());
    assert_eq!(ev, evaluate(&run.model, &data.valid, 64).unwrap());
}

#[test]
fn removed_loss_terms_are_zero_at_every_step() {
    let data = separable(120, 4).unwrap();
    let mut cfg = small_experiment();
    cfg.train.max_epochs = 2;
    let rows = run_ablation(&cfg, &data, None, |_, _| {}).unwrap();
    assert_eq!(rows.len(), 7);
    for r in &rows {
        match r.summary.variant.as_str() {
            "-CL" => assert_eq!(r.max_step_cl, 0.0),
            "-COS" => assert_eq!((r.max_step_cos1, r.max_step_cos2), (0.0, 0.0)),
            _ => assert!(r.max_step_cl > 0.0 || r.max_step_cos1 > 0.0),
        }
    }
}

#[test]
fn zero_alpha_override_matches_contrastive_ablation() {
    let data = separable(120, 6).unwrap();
    let mut cfg = small_experiment();
    cfg.train.max_epochs = 2;
    let text = cfg.to_toml();
    let by_weight = ExperimentConfig::from_toml(&text, &["loss.alpha=0".into()]).unwrap();
    let by_ablation = ExperimentConfig::from_toml(&text, &["model.ablations=[\"CL\"]".into()]).unwrap();
    let a = run_training(&by_weight, &data, None, |_| {}).unwrap();
    let b = run_training(&by_ablation, &data, None, |_| {}).unwrap();
    assert_eq!(a.summary.test, b.summary.test);
    assert_eq!(a.model.params, b.model.params);
}
