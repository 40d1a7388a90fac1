use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cetn::checkpoint;
use cetn::data::{prepare, DatasetSchema, EncodedDataset, PrepareInput, PreparedDataset, SplitSpec};
use cetn::experiment::{comparison_csv, repr_dump, run_ablation, run_training, variant_label, ExperimentConfig, ExperimentError};
use cetn::metrics::{self, relaimpr, Metrics};
use cetn::selfcheck;
use cetn::trainer::{predict_all, EpochRecord};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cetn", version, about = "Prepare data, train, evaluate and inspect CETN click-through models")]
struct Cli {
    /// experiment configuration (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// dotted-path override applied after the config file, e.g. `loss.alpha=0`
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// run seed; for prepare, the split seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory; the CSV file itself for repr-dump
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a raw CSV (or a train/valid/test triplet) with a schema file.
    Prepare(PrepareArgs),
    /// Train one model and write its checkpoint, logs and metrics.
    Train,
    /// Score a checkpoint on one split of the configured dataset.
    Eval(EvalArgs),
    /// Train the full model and each single-component removal with one seed.
    Ablate,
    /// Write the value vector of every space for sampled instances.
    ReprDump(ReprArgs),
    /// Run the gradient, identity and AUC checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    schema: PathBuf,
    /// single raw CSV, split by --ratios
    #[arg(long, conflicts_with_all = ["train", "valid", "test"], required_unless_present = "train")]
    csv: Option<PathBuf>,
    #[arg(long, requires_all = ["valid", "test"])]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// train,valid,test fractions
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.2, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn pick(self, data: &PreparedDataset) -> &EncodedDataset {
        match self {
            Split::Train => &data.train,
            Split::Valid => &data.valid,
            Split::Test => &data.test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// metrics JSON of a baseline run (`{"auc":..,"logloss":..}` or a metrics.json)
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct ReprArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// print the report as JSON
    #[arg(long)]
    json: bool,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: 2, error: error.into() }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let code = if e.is_numeric() { 3 } else { 2 };
        Failure { code, error: e.into() }
    }
}

impl From<cetn::data::DataError> for Failure {
    fn from(e: cetn::data::DataError) -> Self {
        Failure::config(e)
    }
}

impl From<checkpoint::CheckpointError> for Failure {
    fn from(e: checkpoint::CheckpointError) -> Self {
        Failure::config(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// Joins the cause chain, skipping causes the outer message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(&cli, args),
        Command::Selfcheck(args) => cmd_selfcheck(&cli, args),
        Command::Train => cmd_train(&cli),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Ablate => cmd_ablate(&cli),
        Command::ReprDump(args) => cmd_repr(&cli, args),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_toml("", &overrides)?,
    };
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> Result<PreparedDataset, Failure> {
    let dir = &cfg.data.dir;
    if !dir.is_dir() {
        return Err(Failure::config(anyhow!(
            "prepared dataset `{}` not found; run `cetn prepare` first",
            dir.display()
        )));
    }
    Ok(PreparedDataset::load(dir)?)
}

fn echo_config(cfg: &ExperimentConfig) {
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
}

fn print_epoch(prefix: &str, r: &EpochRecord) {
    eprintln!(
        "{prefix}epoch {:>3}  loss {:.6}  ctr {:.6}  val_auc {:.6}  val_logloss {:.6}  lr {:.1e}  {:.1}s",
        r.epoch, r.train_total, r.train_ctr, r.val_auc, r.val_logloss, r.lr, r.seconds
    );
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(Failure::config)?;
    }
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::config)
}

fn cmd_prepare(cli: &Cli, args: &PrepareArgs) -> Outcome {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| Failure::config(anyhow!("prepare needs --out <dir>")))?;
    let text = fs::read_to_string(&args.schema)
        .with_context(|| format!("reading {}", args.schema.display()))
        .map_err(Failure::config)?;
    let schema = DatasetSchema::from_json(&text)?;
    let input = match (&args.csv, &args.train, &args.valid, &args.test) {
        (Some(csv), _, _, _) => {
            let ratios: [f64; 3] = args
                .ratios
                .clone()
                .try_into()
                .map_err(|_| Failure::config(anyhow!("--ratios takes three values")))?;
            PrepareInput::Single {
                csv: csv.clone(),
                split: SplitSpec::new(ratios, cli.seed.unwrap_or(2024))?,
            }
        }
        (None, Some(train), Some(valid), Some(test)) => PrepareInput::PreSplit {
            train: train.clone(),
            valid: valid.clone(),
            test: test.clone(),
        },
        _ => return Err(Failure::config(anyhow!("give --csv or all of --train, --valid, --test"))),
    };
    let manifest = prepare(&input, &schema, out)?;
    println!("field\tvocab_size");
    for (name, size) in manifest.fields.iter().zip(&manifest.vocab_sizes) {
        println!("{name}\t{size}");
    }
    println!("total_features\t{}", manifest.total_features);
    println!(
        "rows\ttrain={} valid={} test={}",
        manifest.rows[0], manifest.rows[1], manifest.rows[2]
    );
    Ok(())
}

fn cmd_selfcheck(cli: &Cli, args: &SelfcheckArgs) -> Outcome {
    let report = selfcheck::run(cli.seed.unwrap_or(0));
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for c in &report.checks {
            println!("{} {:<60} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        println!("{} checks in {:.2}s", report.checks.len(), report.seconds);
    }
    if report.over_budget() {
        eprintln!(
            "warning: selfcheck took {:.1}s, over the {}s budget",
            report.seconds,
            selfcheck::TIME_BUDGET.as_secs()
        );
    }
    if report.passed() {
        return Ok(());
    }
    let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    Err(Failure {
        code: 1,
        error: anyhow!("{} check(s) failed: {}", names.len(), names.join("; ")),
    })
}

fn cmd_train(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    echo_config(&cfg);
    let data = load_data(&cfg)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", variant_label(&cfg.model), cfg.seed)));
    let run = run_training(&cfg, &data, Some(&out), |r| print_epoch("", r))?;
    println!("{}", serde_json::to_string_pretty(&run.summary).expect("summary serializes"));
    eprintln!("artifacts written to {}", out.display());
    Ok(())
}

fn read_baseline(path: &Path) -> Result<Metrics, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::config)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::config)?;
    let metrics = value.get("test").cloned().unwrap_or(value);
    serde_json::from_value(metrics)
        .with_context(|| format!("{}: expected `auc` and `logloss`", path.display()))
        .map_err(Failure::config)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Outcome {
    let cfg = load_config(cli)?;
    let data = load_data(&cfg)?;
    let (model, header) = checkpoint::load::<f64>(&args.checkpoint)?;
    if header.vocab_sizes != data.manifest.vocab_sizes {
        return Err(Failure::config(anyhow!(
            "checkpoint vocabulary sizes do not match the dataset in `{}`",
            cfg.data.dir.display()
        )));
    }
    let split = args.split.pick(&data);
    let probs = predict_all(&model, split, cfg.train.eval_batch_size).map_err(|e| Failure {
        code: 3,
        error: e.into(),
    })?;
    let m = metrics::evaluate(&probs, split.labels()).map_err(Failure::config)?;
    let mut report = serde_json::json!({ "auc": m.auc, "logloss": m.logloss });
    println!("auc\t{:.6}\nlogloss\t{:.6}", m.auc, m.logloss);
    if let Some(path) = &args.baseline {
        let base = read_baseline(path)?;
        let ri = relaimpr(&m, &base).map_err(Failure::config)?;
        println!("relaimpr_auc_pct\t{:.4}\nrelaimpr_logloss_pct\t{:.4}", ri.auc_pct, ri.logloss_pct);
        report["baseline"] = serde_json::to_value(base).expect("metrics serialize");
        report["relaimpr"] = serde_json::to_value(ri).expect("relaimpr serializes");
    }
    if let Some(out) = &cli.out {
        write_file(
            &out.join("eval.json"),
            &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
        )?;
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    echo_config(&cfg);
    let data = load_data(&cfg)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/ablation-seed{}", cfg.seed)));
    let rows = run_ablation(&cfg, &data, Some(&out), |label, r| print_epoch(&format!("[{label}] "), r))?;
    print!("{}", comparison_csv(&rows));
    eprintln!("comparison written to {}", out.join("comparison.csv").display());
    Ok(())
}

fn cmd_repr(cli: &Cli, args: &ReprArgs) -> Outcome {
    let cfg = load_config(cli)?;
    let data = load_data(&cfg)?;
    let (model, _) = checkpoint::load::<f64>(&args.checkpoint)?;
    let csv = repr_dump(&model, args.split.pick(&data), args.n, cfg.seed)?;
    match &cli.out {
        Some(path) => {
            write_file(path, &csv)?;
            eprintln!("{} rows written to {}", 3 * args.n, path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
