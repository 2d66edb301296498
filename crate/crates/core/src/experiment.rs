//! Ablation runs: train an arm on a generated task, calibrate thresholds on
//! the validation split and evaluate on the test split.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, Dataset, SyntheticSpec, SyntheticSplits};
use crate::error::{AapError, Result};
use crate::metrics::{binarize_all, calibrate_thresholds, MetricsReport, Thresholds};
use crate::model::{train, Arm, EpochLog, Model, ModelConfig, TrainConfig};
use crate::priors::CoOccurrencePriors;

/// How scores are turned into binary predictions for evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// The model's fixed default (0.5 for sigmoid scores, 1/k for pooled).
    Default,
    /// Per-attribute thresholds maximizing balanced accuracy on validation.
    #[default]
    Calibrated,
}

impl std::str::FromStr for ThresholdMode {
    type Err = AapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(ThresholdMode::Default),
            "calibrated" => Ok(ThresholdMode::Calibrated),
            other => Err(AapError::Domain(format!("unknown threshold mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub lambda: f64,
    pub model: Model,
    pub thresholds: Thresholds,
    pub test: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Thresholds for `model`; calibration reads the validation split `val`.
pub fn thresholds_for(
    model: &Model,
    val: &Dataset,
    priors: &CoOccurrencePriors,
    mode: ThresholdMode,
) -> Result<Thresholds> {
    match mode {
        ThresholdMode::Default => Ok(model.default_thresholds()),
        ThresholdMode::Calibrated => {
            let scores = model.score_all(val, priors)?;
            let fallback = model.default_thresholds().get(0);
            calibrate_thresholds(&scores, &val.labels, fallback)
        }
    }
}

pub fn evaluate(
    model: &Model,
    data: &Dataset,
    priors: &CoOccurrencePriors,
    thresholds: &Thresholds,
) -> Result<MetricsReport> {
    let scores = model.score_all(data, priors)?;
    MetricsReport::evaluate(&binarize_all(&scores, thresholds), &data.labels)
}

/// Trains one arm on `splits.train` and reports test metrics.
pub fn run_arm(
    arm: Arm,
    splits: &SyntheticSplits,
    priors: &CoOccurrencePriors,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mode: ThresholdMode,
) -> Result<ArmResult> {
    let (model, log) = train(
        arm,
        &splits.train,
        Some(&splits.val),
        priors,
        model_cfg,
        train_cfg,
    )?;
    let thresholds = thresholds_for(&model, &splits.val, priors, mode)?;
    let test = evaluate(&model, &splits.test, priors, &thresholds)?;
    let lambda = match &model {
        Model::Baseline(_) => 0.0,
        Model::Branches { lambda, .. } => *lambda,
    };
    Ok(ArmResult {
        arm,
        lambda,
        model,
        thresholds,
        test,
        log,
    })
}

/// Everything needed to rerun the ablation on the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Network shape of the branch arms.
    pub model: ModelConfig,
    /// Network shape of the baseline arm.
    pub baseline_model: ModelConfig,
    pub train: TrainConfig,
    /// Training settings of the baseline arm.
    pub baseline_train: TrainConfig,
    pub thresholds: ThresholdMode,
    pub prior_smoothing: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            model: ModelConfig::default(),
            baseline_model: ModelConfig::default(),
            baseline_train: TrainConfig {
                lr: 0.1,
                ..train.clone()
            },
            train,
            thresholds: ThresholdMode::Calibrated,
            prior_smoothing: 0.0,
        }
    }
}

impl ExperimentConfig {
    fn train_for(&self, arm: Arm, lambda: f64, seed: u64) -> TrainConfig {
        let base = if arm == Arm::Baseline {
            &self.baseline_train
        } else {
            &self.train
        };
        TrainConfig {
            lambda,
            seed,
            ..base.clone()
        }
    }
}

/// One seed's generated data and priors.
pub struct Task {
    pub seed: u64,
    pub splits: SyntheticSplits,
    pub priors: CoOccurrencePriors,
}

impl Task {
    pub fn generate(spec: &SyntheticSpec, smoothing: f64) -> Result<Self> {
        let splits = generate_synthetic(spec)?;
        let priors = CoOccurrencePriors::from_labels(&splits.train.labels, smoothing)?;
        Ok(Task {
            seed: spec.seed,
            splits,
            priors,
        })
    }
}

/// Test mA of one `(arm, lambda)` setting on one task.
pub fn run_setting(task: &Task, arm: Arm, lambda: f64, cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let tc = cfg.train_for(arm, lambda, task.seed);
    let mc = if arm == Arm::Baseline {
        &cfg.baseline_model
    } else {
        &cfg.model
    };
    Ok(run_arm(arm, &task.splits, &task.priors, mc, &tc, cfg.thresholds)?.test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    /// `(arm, per-seed test mA)`.
    pub per_arm: Vec<(Arm, Vec<f64>)>,
}

impl AblationSummary {
    pub fn mean_ma(&self, arm: Arm) -> Option<f64> {
        self.per_arm
            .iter()
            .find(|(a, _)| *a == arm)
            .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs the three arms for every seed, generating one task per seed from
/// `spec_for(seed)`.
pub fn ablation(
    spec_for: impl Fn(u64) -> SyntheticSpec + Sync,
    seeds: &[u64],
    cocnn_lambda: f64,
    cfg: &ExperimentConfig,
) -> Result<AblationSummary> {
    let arms = [
        (Arm::Baseline, 0.0),
        (Arm::Multibranch, 0.0),
        (Arm::Cocnn, cocnn_lambda),
    ];
    let tasks = parallel_map(seeds, |&s| Task::generate(&spec_for(s), cfg.prior_smoothing))?;
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..arms.len()).map(move |a| (t, a)))
        .collect();
    let results = parallel_map(&jobs, |&(t, a)| {
        run_setting(&tasks[t], arms[a].0, arms[a].1, cfg).map(|r| r.ma)
    })?;
    let per_arm = arms
        .iter()
        .enumerate()
        .map(|(a, (arm, _))| {
            let v = (0..tasks.len()).map(|t| results[t * arms.len() + a]).collect();
            (*arm, v)
        })
        .collect();
    Ok(AblationSummary {
        seeds: seeds.to_vec(),
        per_arm,
    })
}

/// `0, 0.05, ..., 0.5`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub per_seed_ma: Vec<f64>,
    pub mean_ma: f64,
}

/// Mean test mA of the context arm for every `lambda` in `grid`.
pub fn lambda_sweep(
    spec_for: impl Fn(u64) -> SyntheticSpec + Sync,
    seeds: &[u64],
    grid: &[f64],
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepPoint>> {
    let tasks = parallel_map(seeds, |&s| Task::generate(&spec_for(s), cfg.prior_smoothing))?;
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..tasks.len()).map(move |t| (g, t)))
        .collect();
    let results = parallel_map(&jobs, |&(g, t)| {
        run_setting(&tasks[t], Arm::Cocnn, grid[g], cfg).map(|r| r.ma)
    })?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &lambda)| {
            let per_seed_ma: Vec<f64> = results[g * tasks.len()..(g + 1) * tasks.len()].to_vec();
            let mean_ma = per_seed_ma.iter().sum::<f64>() / per_seed_ma.len() as f64;
            SweepPoint {
                lambda,
                per_seed_ma,
                mean_ma,
            }
        })
        .collect())
}

/// Sweep rendered as `lambda,mA` CSV.
pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("lambda,mA\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.lambda, p.mean_ma));
    }
    out
}

/// Worker count: `AAP_THREADS` when set, otherwise available parallelism.
pub fn worker_count() -> usize {
    std::env::var("AAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Maps `f` over `items` on up to [`worker_count`] threads. Results keep the
/// input order; each item is computed independently so the output does not
/// depend on the thread count.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.unwrap_or_else(|| Err(AapError::Contract("worker result missing".into()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_matches_protocol() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert!((g[4] - 0.2).abs() < 1e-15);
        assert!((g[10] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = parallel_map(&items, |&v| Ok(v * v)).unwrap();
        assert_eq!(out, items.iter().map(|v| v * v).collect::<Vec<_>>());
        let err = parallel_map(&items, |&v| {
            if v == 7 {
                Err(AapError::Domain("x".into()))
            } else {
                Ok(v)
            }
        });
        assert!(err.is_err());
    }
}
