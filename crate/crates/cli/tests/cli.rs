use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn cetn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cetn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Small raw CSV whose label depends on a user-item interaction.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let mut csv = String::from("label,user,item,count\n");
        let mut state = 7u64;
        let mut next = |m: u64| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) % m
        };
        for _ in 0..600 {
            let (u, i, c) = (next(20), next(30), next(50) + 1);
            let y = if (u + i) % 3 == 0 { "1" } else { "-1" };
            csv.push_str(&format!("{y},u{u},i{i},{c}\n"));
        }
        fs::write(dir.path().join("raw.csv"), csv).unwrap();
        fs::write(
            dir.path().join("schema.json"),
            r#"{"label":"label","fields":[{"name":"user"},{"name":"item"},{"name":"count","kind":"numeric"}],"min_count":1}"#,
        )
        .unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn prepare(&self, out: &str) -> Output {
        cetn(&["prepare", "--schema", &self.s("schema.json"), "--csv", &self.s("raw.csv"), "--out", &self.s(out)])
    }

    fn config(&self) -> String {
        let text = format!(
            "seed = 11\n[data]\ndir = {:?}\n[model]\nembedding_dim = 4\nvalue_dim = 6\nhidden_dims = [12]\n\
             [train]\nlr = 0.01\nbatch_size = 64\neval_batch_size = 128\nmax_epochs = 2\n",
            self.path("prep")
        );
        fs::write(self.path("cfg.toml"), text).unwrap();
        self.s("cfg.toml")
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn selfcheck_passes_on_a_fresh_build() {
    let o = cetn(&["selfcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn prepare_reports_vocabularies_and_is_reproducible() {
    let fx = Fixture::new();
    let o = fx.prepare("prep");
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    // 20 users and 30 items plus the out-of-vocabulary slot
    assert!(text.contains("user\t21"), "{text}");
    assert!(text.contains("item\t31"), "{text}");
    assert!(text.contains("total_features"));
    assert!(fx.prepare("again").status.success());
    for f in ["vocab.json", "manifest.json", "train.csv", "valid.csv", "test.csv"] {
        assert_eq!(read(&fx.path("prep").join(f)), read(&fx.path("again").join(f)), "{f}");
    }
}

#[test]
fn schema_mismatch_exits_2_naming_the_column() {
    let fx = Fixture::new();
    fs::write(fx.path("schema.json"), r#"{"fields":[{"name":"user"},{"name":"brand"}]}"#).unwrap();
    let o = fx.prepare("prep");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("brand"));
}

#[test]
fn missing_dataset_exits_2() {
    let o = cetn(&["train", "--override", "data.dir=\"/definitely/not/here\""]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let o = cetn(&["train", "--override", "model.colour=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_3_with_location() {
    let fx = Fixture::new();
    assert!(fx.prepare("prep").status.success());
    let cfg = fx.config();
    let o = cetn(&["train", "--config", &cfg, "--override", "train.lr=1e300", "--out", &fx.s("run")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn train_eval_and_repr_dump_round_trip() {
    let fx = Fixture::new();
    assert!(fx.prepare("prep").status.success());
    let cfg = fx.config();
    let o = cetn(&["train", "--config", &cfg, "--seed", "3", "--out", &fx.s("run")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = fx.path("run");
    for f in ["config.toml", "train_log.jsonl", "train_log.csv", "steps.jsonl", "best.ckpt", "metrics.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // the echoed config carries the command-line seed
    assert!(read(&run.join("config.toml")).contains("seed = 3"));
    assert_eq!(read(&run.join("train_log.jsonl")).lines().count(), 2);

    let o = cetn(&["train", "--config", &cfg, "--seed", "3", "--out", &fx.s("run2")]);
    assert!(o.status.success());
    assert_eq!(read(&run.join("metrics.json")), read(&fx.path("run2/metrics.json")));

    fs::write(fx.path("base.json"), r#"{"auc":0.9835,"logloss":0.2}"#).unwrap();
    let ckpt = fx.s("run/best.ckpt");
    let o = cetn(&["eval", "--config", &cfg, "--checkpoint", &ckpt, "--baseline", &fx.s("base.json"), "--out", &fx.s("ev")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("auc\t") && text.contains("relaimpr_auc_pct"), "{text}");
    let ev: serde_json::Value = serde_json::from_str(&read(&fx.path("ev/eval.json"))).unwrap();
    let auc = ev["auc"].as_f64().unwrap();
    let expect = ((auc - 0.5) / (0.9835 - 0.5) - 1.0) * 100.0;
    assert!((ev["relaimpr"]["auc_pct"].as_f64().unwrap() - expect).abs() < 1e-9);

    let dump = |out: &str| {
        let o = cetn(&["repr-dump", "--config", &cfg, "--checkpoint", &ckpt, "--n", "20", "--out", &fx.s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        read(&fx.path(out))
    };
    let a = dump("a.csv");
    assert_eq!(a, dump("b.csv"));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 1 + 60);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 6 + 2));
}

#[test]
fn zero_alpha_override_reproduces_contrastive_ablation() {
    let fx = Fixture::new();
    assert!(fx.prepare("prep").status.success());
    let cfg = fx.config();
    let a = cetn(&["train", "--config", &cfg, "--override", "loss.alpha=0", "--out", &fx.s("alpha0")]);
    let b = cetn(&["train", "--config", &cfg, "--override", "model.ablations=[\"CL\"]", "--out", &fx.s("cl")]);
    assert!(a.status.success() && b.status.success());
    let test = |dir: &str| {
        let v: serde_json::Value = serde_json::from_str(&read(&fx.path(dir).join("metrics.json"))).unwrap();
        v["test"].clone()
    };
    assert_eq!(test("alpha0"), test("cl"));
}

#[test]
fn ablate_writes_seven_rows() {
    let fx = Fixture::new();
    assert!(fx.prepare("prep").status.success());
    let cfg = fx.config();
    let o = cetn(&["ablate", "--config", &cfg, "--override", "train.max_epochs=1", "--out", &fx.s("abl")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&fx.path("abl/comparison.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    let labels: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["full", "-A", "-CL", "-COS", "-K", "-P", "-T"]);
    assert!(fx.path("abl/-K/config.toml").is_file());
}
