//! The `aap` command-line pipeline: build priors, generate synthetic data,
//! train and evaluate the three model arms, and check gradients.
//!
//! Every command is deterministic given its inputs and seed. Exit codes:
//! 0 on success, [`EXIT_INPUT`] for bad input (missing files, schema or
//! dimension mismatches, invalid flags), [`EXIT_CHECK`] when a verification
//! fails, and [`EXIT_RUNTIME`] when training or evaluation itself breaks down.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use aap_core::data::{split, Split};
use aap_core::experiment::{
    default_lambda_grid, evaluate, parallel_map, sweep_to_csv, thresholds_for, ExperimentConfig, SweepPoint,
    ThresholdMode,
};
use aap_core::model::{log_to_csv, train};
use aap_core::{
    run_gradcheck, weight_gradcheck, AapError, Arm, CoOccurrencePriors, Dataset, GradcheckSpec, LabelMatrix,
    MetricsReport, Model, ModelConfig, SyntheticSpec, Thresholds, TrainConfig, WeightGradcheckSpec,
};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

pub const PRIORS_FILE: &str = "priors.json";
pub const HEATMAP_FILE: &str = "cooccurrence_heatmap.csv";
pub const SPEC_FILE: &str = "spec.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "lambda_sweep.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] AapError),
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_INPUT,
            CliError::CheckFailed(_) => EXIT_CHECK,
            CliError::Core(e) => match e {
                AapError::Diverged { .. } | AapError::Degenerate(_) | AapError::Contract(_) => EXIT_RUNTIME,
                _ => EXIT_INPUT,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "aap", version, about = "Attribute-aware pooling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, validate and export co-occurrence priors from a label CSV.
    BuildPriors(BuildPriorsArgs),
    /// Generate the synthetic train/val/test splits.
    Synth(SynthArgs),
    /// Train one model arm, or sweep lambda for the context arm.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct BuildPriorsArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Additive smoothing of the counts.
    #[arg(long, default_value_t = 0.0)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec (JSON); the built-in entangled task when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

/// Where a command reads its data from: a directory written by `synth`, or a
/// single feature/label file pair.
#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    #[arg(long, conflicts_with_all = ["features", "labels"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Priors JSON; built from the training labels when omitted.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    #[arg(long, default_value = "cocnn")]
    pub arm: Arm,
    /// Pooling weight of the context arm.
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Network shape (JSON `ModelConfig`).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// `calibrated` (per-attribute, on the validation split) or `default`.
    #[arg(long, default_value = "calibrated")]
    pub thresholds: ThresholdMode,
    /// Train the context arm for lambda = 0, 0.05, ..., 0.5 and write a
    /// lambda-vs-mA table instead of a checkpoint.
    #[arg(long)]
    pub sweep_lambda: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split of `--data` to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// Overrides the pooling weight stored in the checkpoint.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// `default`, `calibrated`, or a thresholds JSON file written by `train`.
    #[arg(long, default_value = "calibrated")]
    pub thresholds: String,
    /// Metrics CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Also check every weight of a small network.
    #[arg(long)]
    pub weights: bool,
    /// Print every compared entry.
    #[arg(long)]
    pub verbose: bool,
}

pub fn run(cli: Cli, out: &mut impl Write) -> CliResult<()> {
    match cli.command {
        Command::BuildPriors(a) => cmd_build_priors(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn say(out: &mut impl Write, text: impl AsRef<str>) -> CliResult<()> {
    match writeln!(out, "{}", text.as_ref()) {
        // a closed pipe (e.g. `| head`) is not an error of the command
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(AapError::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| AapError::io(dir, e).into())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| AapError::io(path, e).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| AapError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        AapError::parse(
            path.display(),
            e.line(),
            format!("column {}", e.column()),
            e.to_string(),
        )
        .into()
    })
}

pub fn cmd_build_priors(args: &BuildPriorsArgs, out: &mut impl Write) -> CliResult<()> {
    let labels = LabelMatrix::read_csv(&args.labels, None)?;
    let priors = CoOccurrencePriors::from_labels(&labels, args.epsilon)?;
    create_dir(&args.out)?;
    priors.export(&args.out.join(PRIORS_FILE))?;
    priors.export_heatmap_csv(&args.out.join(HEATMAP_FILE))?;
    let report = priors.validate();
    say(
        out,
        format!("n={} k={} epsilon={}", priors.n, priors.k(), priors.epsilon),
    )?;
    for c in &report.checks {
        say(
            out,
            format!(
                "{:<38} {} max_violation={:.3e}",
                c.name,
                if c.passed { "ok" } else { "FAIL" },
                c.max_violation
            ),
        )?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::CheckFailed("prior invariants violated".into()))
    }
}

pub fn cmd_synth(args: &SynthArgs, out: &mut impl Write) -> CliResult<()> {
    let mut spec = match &args.spec {
        Some(path) => SyntheticSpec::load(path)?,
        None => SyntheticSpec::default_entangled(args.seed),
    };
    spec.seed = args.seed;
    let splits = aap_core::data::generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    splits.save(&args.out)?;
    spec.save(&args.out.join(SPEC_FILE))?;
    say(
        out,
        format!(
            "wrote {} train, {} val, {} test instances (k={}, d_in={}) to {}",
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            spec.k(),
            spec.d_in,
            args.out.display()
        ),
    )
}

/// Splits available to a command; absent ones are `None`.
pub struct LoadedData {
    pub train: Option<Dataset>,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

fn split_files_exist(dir: &Path, s: Split) -> bool {
    dir.join(format!("{}_features.aapt", s.name())).exists()
        && dir.join(format!("{}_labels.csv", s.name())).exists()
}

/// Reads `--data` split by split, or splits a `--features`/`--labels` pair
/// 8:1:1 with `seed`.
pub fn load_data(args: &DataArgs, seed: u64) -> CliResult<LoadedData> {
    if let Some(dir) = &args.data {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!(
                "data directory {} does not exist",
                dir.display()
            )));
        }
        let mut schema = None;
        let mut load = |s: Split| -> CliResult<Option<Dataset>> {
            if !split_files_exist(dir, s) {
                return Ok(None);
            }
            let (d, _) = Dataset::load(dir, s, schema.as_ref())?;
            schema.get_or_insert_with(|| d.labels.schema().clone());
            Ok(Some(d))
        };
        let train = load(Split::Train)?;
        let val = load(Split::Val)?;
        let test = load(Split::Test)?;
        if train.is_none() && val.is_none() && test.is_none() {
            return Err(CliError::Usage(format!(
                "no dataset splits found in {}",
                dir.display()
            )));
        }
        return Ok(LoadedData { train, val, test });
    }
    let whole = load_pair(args)?;
    let mut parts = split(&whole, &[0.8, 0.1, 0.1], seed)?.into_iter();
    Ok(LoadedData {
        train: parts.next(),
        val: parts.next().filter(|d| !d.is_empty()),
        test: parts.next().filter(|d| !d.is_empty()),
    })
}

fn load_pair(args: &DataArgs) -> CliResult<Dataset> {
    let (Some(f), Some(l)) = (&args.features, &args.labels) else {
        return Err(CliError::Usage(
            "pass --data DIR or both --features and --labels".into(),
        ));
    };
    let features = aap_core::data::load_features(f)?;
    let labels = aap_core::data::load_labels_csv(l, None)?;
    let (d, dropped) = Dataset::new_filtered(features, labels, Split::Train)?;
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} rows without any positive attribute");
    }
    Ok(d)
}

fn load_priors(path: Option<&Path>, fallback: Option<&Dataset>, k: usize) -> CliResult<CoOccurrencePriors> {
    let priors = match (path, fallback) {
        (Some(p), _) => CoOccurrencePriors::load(p)?,
        (None, Some(d)) => CoOccurrencePriors::from_labels(&d.labels, 0.0)?,
        (None, None) => {
            return Err(CliError::Usage(
                "--priors is required without training labels".into(),
            ))
        }
    };
    if priors.k() != k {
        return Err(AapError::Schema(format!("priors cover {} attributes, data has {k}", priors.k())).into());
    }
    Ok(priors)
}

fn train_config(args: &TrainArgs, arm: Arm, lambda: f64) -> CliResult<TrainConfig> {
    let defaults = ExperimentConfig::default();
    let base = if arm == Arm::Baseline {
        defaults.baseline_train
    } else {
        defaults.train
    };
    let cfg = TrainConfig {
        lr: args.lr.unwrap_or(base.lr),
        epochs: args.epochs.unwrap_or(base.epochs),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        momentum: args.momentum.unwrap_or(base.momentum),
        lambda,
        seed: args.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, out: &mut impl Write) -> CliResult<()> {
    let data = load_data(&args.data, args.seed)?;
    let Some(train_set) = &data.train else {
        return Err(CliError::Usage("no training split".into()));
    };
    let priors = load_priors(args.priors.as_deref(), Some(train_set), train_set.k())?;
    let model_cfg: ModelConfig = match &args.model_config {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    if args.thresholds == ThresholdMode::Calibrated && data.val.is_none() {
        return Err(CliError::Usage(
            "calibrated thresholds need a validation split".into(),
        ));
    }
    create_dir(&args.out)?;
    if args.sweep_lambda {
        return sweep(args, &data, train_set, &priors, &model_cfg, out);
    }
    let cfg = train_config(args, args.arm, args.lambda)?;
    let (model, log) = train(args.arm, train_set, data.val.as_ref(), &priors, &model_cfg, &cfg)?;
    model.save(&args.out.join(CHECKPOINT_FILE))?;
    write_file(&args.out.join(LOG_FILE), &log_to_csv(&log))?;
    let last = log.last().map_or(f64::NAN, |e| e.loss);
    say(
        out,
        format!(
            "trained {} ({} parameters), final loss {last:.6}",
            args.arm,
            model.num_params()
        ),
    )?;
    let thresholds = choose_thresholds(&model, &data, &priors, args.thresholds)?;
    let text = serde_json::to_string(&thresholds).map_err(AapError::from)?;
    write_file(&args.out.join(THRESHOLDS_FILE), &format!("{text}\n"))?;
    if let Some(test) = &data.test {
        let report = evaluate(&model, test, &priors, &thresholds)?;
        write_file(&args.out.join(METRICS_FILE), &report.to_csv())?;
        say(out, format!("test metrics\n{report}"))?;
    }
    Ok(())
}

fn choose_thresholds(
    model: &Model,
    data: &LoadedData,
    priors: &CoOccurrencePriors,
    mode: ThresholdMode,
) -> CliResult<Thresholds> {
    match (mode, &data.val) {
        (ThresholdMode::Default, _) => Ok(model.default_thresholds()),
        (ThresholdMode::Calibrated, Some(val)) => Ok(thresholds_for(model, val, priors, mode)?),
        (ThresholdMode::Calibrated, None) => Err(CliError::Usage(
            "calibrated thresholds need a validation split".into(),
        )),
    }
}

fn sweep(
    args: &TrainArgs,
    data: &LoadedData,
    train_set: &Dataset,
    priors: &CoOccurrencePriors,
    model_cfg: &ModelConfig,
    out: &mut impl Write,
) -> CliResult<()> {
    let Some(eval_set) = data.test.as_ref().or(data.val.as_ref()) else {
        return Err(CliError::Usage(
            "the lambda sweep needs a validation or test split".into(),
        ));
    };
    let grid = default_lambda_grid();
    let ma = parallel_map(&grid, |&lambda| {
        let cfg = train_config(args, Arm::Cocnn, lambda).map_err(|e| AapError::Domain(e.to_string()))?;
        let (model, _) = train(Arm::Cocnn, train_set, data.val.as_ref(), priors, model_cfg, &cfg)?;
        let t = choose_thresholds(&model, data, priors, args.thresholds)
            .map_err(|e| AapError::Domain(e.to_string()))?;
        Ok(evaluate(&model, eval_set, priors, &t)?.ma)
    })?;
    let points: Vec<SweepPoint> = grid
        .iter()
        .zip(ma)
        .map(|(&lambda, ma)| SweepPoint {
            lambda,
            per_seed_ma: vec![ma],
            mean_ma: ma,
        })
        .collect();
    write_file(&args.out.join(SWEEP_FILE), &sweep_to_csv(&points))?;
    say(out, format!("{:>6}  {:>7}", "lambda", "mA"))?;
    for p in &points {
        say(out, format!("{:>6.2}  {:>6.2}%", p.lambda, 100.0 * p.mean_ma))?;
    }
    let best = points
        .iter()
        .fold(&points[0], |b, p| if p.mean_ma > b.mean_ma { p } else { b });
    say(
        out,
        format!("best lambda {:.2} ({:.2}% mA)", best.lambda, 100.0 * best.mean_ma),
    )
}

pub fn cmd_eval(args: &EvalArgs, out: &mut impl Write) -> CliResult<()> {
    let mut model = Model::load(&args.checkpoint)?;
    if let Some(l) = args.lambda {
        aap_core::AapConfig::with_lambda(l)?;
        if let Model::Branches { lambda, .. } = &mut model {
            *lambda = l;
        }
    }
    let (data, target) = if args.data.data.is_some() {
        let data = load_data(&args.data, 0)?;
        let target = match args.split.as_str() {
            "train" => data.train.clone(),
            "val" => data.val.clone(),
            "test" => data.test.clone(),
            other => return Err(CliError::Usage(format!("unknown split {other:?}"))),
        };
        let target = target.ok_or_else(|| CliError::Usage(format!("split {} not found", args.split)))?;
        (data, target)
    } else {
        let d = load_pair(&args.data)?;
        (
            LoadedData {
                train: None,
                val: None,
                test: None,
            },
            d,
        )
    };
    if target.k() != model.k() {
        return Err(AapError::Schema(format!(
            "checkpoint has {} attributes, data has {}",
            model.k(),
            target.k()
        ))
        .into());
    }
    let fallback = data.train.as_ref().or(match model {
        Model::Baseline(_) => Some(&target),
        Model::Branches { .. } => None,
    });
    let priors = load_priors(args.priors.as_deref(), fallback, target.k())?;
    let thresholds = match args.thresholds.as_str() {
        "default" => model.default_thresholds(),
        "calibrated" => choose_thresholds(&model, &data, &priors, ThresholdMode::Calibrated)?,
        path => read_json(Path::new(path))?,
    };
    let report: MetricsReport = evaluate(&model, &target, &priors, &thresholds)?;
    if let Some(path) = &args.out {
        write_file(path, &report.to_csv())?;
    }
    say(out, report.to_string())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut impl Write) -> CliResult<()> {
    let report = run_gradcheck(&GradcheckSpec {
        seed: args.seed,
        m: args.m,
        k: args.k,
        lambda: args.lambda,
        trials: args.trials,
        tolerance: args.tolerance,
        ..GradcheckSpec::default()
    })?;
    if args.verbose {
        say(out, report.to_string())?;
    } else {
        say(out, report.summary_line())?;
    }
    let mut passed = report.passed();
    if args.weights {
        let weights = weight_gradcheck(&WeightGradcheckSpec {
            seed: args.seed,
            m: args.m,
            k: args.k,
            lambda: args.lambda,
            tolerance: args.tolerance,
            ..WeightGradcheckSpec::default()
        })?;
        say(out, format!("weights {}", weights.summary_line()))?;
        passed &= weights.passed();
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "analytic and numeric gradients differ by more than {:.1e}",
            args.tolerance
        )))
    }
}
