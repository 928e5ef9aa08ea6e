//! Seeded multi-run experiments: parallel seeds, per-seed metrics, aggregate
//! mean and standard deviation, line-delimited results files.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataBundle;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::gates::{capture_mean_weights, MeanWeightMatrix};
use crate::model::{ModelConfig, TaskKind};
use crate::train::{build_state, dataset_loss, evaluate, train, TaskMetrics, TrainConfig, TrainState};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<TaskMetrics>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean validation total loss of the restored best model.
    pub val_loss: f64,
    pub wall_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_means: Option<Vec<MeanWeightMatrix>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub fingerprint: String,
    pub runs: Vec<SeedRun>,
    pub mean: Vec<TaskMetrics>,
    pub std: Vec<TaskMetrics>,
}

impl ExperimentResult {
    pub fn mean_auc(&self, task: usize) -> Option<f64> {
        self.mean.get(task).and_then(|m| m.auc)
    }

    pub fn from_runs(fingerprint: String, runs: Vec<SeedRun>, kinds: &[TaskKind]) -> Self {
        let (mean, std) = aggregate_runs(&runs, kinds);
        ExperimentResult {
            fingerprint,
            runs,
            mean,
            std,
        }
    }

    /// Mean validation loss across seeds.
    pub fn mean_val_loss(&self) -> f64 {
        if self.runs.is_empty() {
            return f64::NAN;
        }
        self.runs.iter().map(|r| r.val_loss).sum::<f64>() / self.runs.len() as f64
    }

    /// Sample standard deviation of the per-seed validation loss.
    pub fn std_val_loss(&self) -> f64 {
        if self.runs.len() < 2 {
            return 0.0;
        }
        let m = self.mean_val_loss();
        let var = self
            .runs
            .iter()
            .map(|r| (r.val_loss - m) * (r.val_loss - m))
            .sum::<f64>()
            / (self.runs.len() - 1) as f64;
        var.sqrt()
    }
}

/// SHA-256 over the canonical JSON of the fully resolved run description.
pub fn fingerprint(model: &ModelConfig, train_cfg: &TrainConfig, seeds: &[u64]) -> String {
    let payload = serde_json::json!({
        "model": model,
        "train": train_cfg,
        "seeds": seeds,
    });
    let bytes = serde_json::to_vec(&payload).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains one model per seed (in parallel), evaluates each on the test split,
/// and aggregates. With `capture_gates`, fusion models also record their
/// test-set mean expert weights per level.
pub fn run_experiment(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &DataBundle,
    seeds: &[u64],
    capture_gates: bool,
) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let runs: Result<Vec<SeedRun>> = seeds
        .par_iter()
        .map(|&seed| run_single(model_cfg, train_cfg, data, seed, capture_gates))
        .collect();
    let runs = runs?;
    let (mean, std) = aggregate_runs(&runs, model_cfg.task_kinds());
    Ok(ExperimentResult {
        fingerprint: fingerprint(model_cfg, train_cfg, seeds),
        runs,
        mean,
        std,
    })
}

fn run_single(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &DataBundle,
    seed: u64,
    capture_gates: bool,
) -> Result<SeedRun> {
    let start = Instant::now();
    let mut state = build_state(model_cfg, &data.input_spec, seed)?;
    let history = train(&mut state, &data.train, &data.valid, train_cfg, seed)?;
    let metrics = evaluate(&state, &data.test, 2048)?;
    let val_loss = dataset_loss(&state, &data.valid, 2048)?;
    let gate_means = if capture_gates && matches!(model_cfg, ModelConfig::Adatt(_)) {
        Some(capture_mean_weights(&state, &data.test, 2048)?.combined)
    } else {
        None
    };
    Ok(SeedRun {
        seed,
        metrics,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        val_loss,
        wall_secs: start.elapsed().as_secs_f64(),
        gate_means,
    })
}

/// Trains and evaluates a single seed, returning the trained state too
/// (checkpointing needs the parameters).
pub fn run_single_with_state(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &DataBundle,
    seed: u64,
) -> Result<(SeedRun, TrainState)> {
    let start = Instant::now();
    let mut state = build_state(model_cfg, &data.input_spec, seed)?;
    let history = train(&mut state, &data.train, &data.valid, train_cfg, seed)?;
    let metrics = evaluate(&state, &data.test, 2048)?;
    let val_loss = dataset_loss(&state, &data.valid, 2048)?;
    let run = SeedRun {
        seed,
        metrics,
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        val_loss,
        wall_secs: start.elapsed().as_secs_f64(),
        gate_means: None,
    };
    Ok((run, state))
}

/// Mean and sample standard deviation per task per metric.
pub fn aggregate_runs(runs: &[SeedRun], kinds: &[TaskKind]) -> (Vec<TaskMetrics>, Vec<TaskMetrics>) {
    let tasks = kinds.len();
    let mut mean = vec![TaskMetrics::default(); tasks];
    let mut std = vec![TaskMetrics::default(); tasks];
    for t in 0..tasks {
        let pick = |f: fn(&TaskMetrics) -> Option<f64>| -> Option<(f64, f64)> {
            let vals: Vec<f64> = runs.iter().filter_map(|r| f(&r.metrics[t])).collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Some((m, var.sqrt()))
        };
        if let Some((m, s)) = pick(|x| x.auc) {
            mean[t].auc = Some(m);
            std[t].auc = Some(s);
        }
        if let Some((m, s)) = pick(|x| x.ne) {
            mean[t].ne = Some(m);
            std[t].ne = Some(s);
        }
        if let Some((m, s)) = pick(|x| x.mse) {
            mean[t].mse = Some(m);
            std[t].mse = Some(s);
        }
    }
    (mean, std)
}

// ── ablation ─────────────────────────────────────────────────────────

/// Per-task quality change from removing the native linear fusion term,
/// signed so that positive values mean the ablated model is worse.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: usize,
    /// full mean AUC − ablated mean AUC.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_drop: Option<f64>,
    /// ablated mean NE − full mean NE.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ne_rise: Option<f64>,
    /// ablated mean MSE − full mean MSE.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_rise: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: ExperimentResult,
    pub ablated: ExperimentResult,
    pub degradation: Vec<TaskDelta>,
}

/// Runs the full and native-ablated fusion model on the same seeds.
pub fn run_ablation(
    fusion_cfg: &FusionConfig,
    train_cfg: &TrainConfig,
    data: &DataBundle,
    seeds: &[u64],
) -> Result<AblationReport> {
    let full_cfg = ModelConfig::Adatt(FusionConfig {
        ablate_native_fusion: false,
        ..fusion_cfg.clone()
    });
    let ablated_cfg = ModelConfig::Adatt(FusionConfig {
        ablate_native_fusion: true,
        ..fusion_cfg.clone()
    });
    let full = run_experiment(&full_cfg, train_cfg, data, seeds, false)?;
    let ablated = run_experiment(&ablated_cfg, train_cfg, data, seeds, false)?;
    let degradation = (0..fusion_cfg.num_tasks)
        .map(|t| TaskDelta {
            task: t,
            auc_drop: match (full.mean[t].auc, ablated.mean[t].auc) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            },
            ne_rise: match (full.mean[t].ne, ablated.mean[t].ne) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            },
            mse_rise: match (full.mean[t].mse, ablated.mean[t].mse) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            },
        })
        .collect();
    Ok(AblationReport {
        full,
        ablated,
        degradation,
    })
}

// ── results files ────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ResultRecord {
    Seed {
        fingerprint: String,
        #[serde(flatten)]
        run: SeedRun,
    },
    Aggregate {
        fingerprint: String,
        n_seeds: usize,
        mean: Vec<TaskMetrics>,
        std: Vec<TaskMetrics>,
    },
}

/// One JSON line per seed, then one aggregate line.
pub fn write_results_jsonl(path: &Path, result: &ExperimentResult) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = String::new();
    for run in &result.runs {
        let rec = ResultRecord::Seed {
            fingerprint: result.fingerprint.clone(),
            run: run.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    let agg = ResultRecord::Aggregate {
        fingerprint: result.fingerprint.clone(),
        n_seeds: result.runs.len(),
        mean: result.mean.clone(),
        std: result.std.clone(),
    };
    out.push_str(&serde_json::to_string(&agg).expect("serializable"));
    out.push('\n');
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A results file is complete when its last record is an aggregate with the
/// expected fingerprint — the sweep resume check.
pub fn results_complete(path: &Path, expected_fingerprint: &str) -> bool {
    let Ok(text) = std::fs::read_to_string(path) else {
        return false;
    };
    let Some(last) = text.lines().filter(|l| !l.trim().is_empty()).last() else {
        return false;
    };
    match serde_json::from_str::<ResultRecord>(last) {
        Ok(ResultRecord::Aggregate { fingerprint, .. }) => fingerprint == expected_fingerprint,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::SharedBottomConfig;
    use crate::data::synth_bundle;

    fn cfg() -> ModelConfig {
        ModelConfig::SharedBottom(SharedBottomConfig {
            num_tasks: 2,
            input_dim: 4,
            hidden_dims: vec![6],
            tower_hidden_dim: 3,
            task_kinds: vec![TaskKind::Classification; 2],
        })
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            max_epochs: 2,
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_produces_identical_records() {
        let data = synth_bundle(3, 240, 4, 0.5).unwrap();
        let a = run_experiment(&cfg(), &quick_train(), &data, &[7], false).unwrap();
        let b = run_experiment(&cfg(), &quick_train(), &data, &[7], false).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_eq!(a.runs[0].metrics, b.runs[0].metrics);
        assert_eq!(a.runs[0].best_epoch, b.runs[0].best_epoch);
    }

    #[test]
    fn aggregate_mean_and_std_are_sane() {
        let data = synth_bundle(4, 240, 4, 0.5).unwrap();
        let r = run_experiment(&cfg(), &quick_train(), &data, &[0, 1, 2], false).unwrap();
        assert_eq!(r.runs.len(), 3);
        let m = r.mean[0].auc.unwrap();
        assert!((0.0..=1.0).contains(&m));
        assert!(r.std[0].auc.unwrap() >= 0.0);
    }

    #[test]
    fn results_file_round_trip_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let data = synth_bundle(5, 200, 4, 0.0).unwrap();
        let r = run_experiment(&cfg(), &quick_train(), &data, &[0, 1], false).unwrap();
        write_results_jsonl(&path, &r).unwrap();
        assert!(results_complete(&path, &r.fingerprint));
        assert!(!results_complete(&path, "deadbeef"));
        // truncated file (no aggregate) is incomplete
        let text = std::fs::read_to_string(&path).unwrap();
        let partial: Vec<&str> = text.lines().take(1).collect();
        std::fs::write(&path, partial.join("\n")).unwrap();
        assert!(!results_complete(&path, &r.fingerprint));
    }

    #[test]
    fn fingerprint_tracks_config_changes() {
        let t = quick_train();
        let f1 = fingerprint(&cfg(), &t, &[0, 1]);
        let f2 = fingerprint(&cfg(), &t, &[0, 2]);
        assert_ne!(f1, f2);
        let mut t2 = t.clone();
        t2.learning_rate = 0.5;
        assert_ne!(f1, fingerprint(&cfg(), &t2, &[0, 1]));
    }
}
