//! Architecture-agnostic training: equal-weight summed task losses, Adam,
//! early stopping on validation mean AUC, best-epoch parameter restore.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedDataset, InputLayer, InputSpec};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{build_model, ArchModel, ModelConfig, TaskKind};
use crate::nn::{Graph, ParamSet};
use crate::optim::Adam;
use crate::tape::{stable_sigmoid, Var};
use crate::tensor::Tensor;

const EMBED_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const SHUFFLE_SEED_SALT: u64 = 0x517c_c1b7_2722_0a95;
const EVAL_BATCH: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Non-improving validation epochs tolerated before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Per-task loss weights; the training objective is their weighted sum
    /// and every weight must be exactly 1.
    #[serde(default)]
    pub loss_weights: Option<Vec<f32>>,
    #[serde(default)]
    pub verbose: bool,
}

fn default_lr() -> f32 {
    1e-3
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            loss_weights: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if let Some(w) = &self.loss_weights {
            if w.len() != num_tasks {
                return Err(Error::Config(format!(
                    "{} loss weights for {num_tasks} tasks",
                    w.len()
                )));
            }
            if w.iter().any(|&x| x != 1.0) {
                return Err(Error::Config(
                    "task losses are summed with equal weights; every loss weight must be 1"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// A built model with its parameters and input layer: everything that trains.
pub struct TrainState {
    pub params: ParamSet,
    pub model: ArchModel,
    pub input: InputLayer,
}

/// Allocates the input layer and model for one seed. Parameter order is
/// deterministic (input tables first, model second), which checkpoint
/// restore relies on.
pub fn build_state(config: &ModelConfig, input_spec: &InputSpec, seed: u64) -> Result<TrainState> {
    if config.input_dim() != input_spec.input_dim() {
        return Err(Error::Config(format!(
            "model expects input width {}, data encodes to {}",
            config.input_dim(),
            input_spec.input_dim()
        )));
    }
    let mut params = ParamSet::new();
    let mut embed_rng = ChaCha8Rng::seed_from_u64(seed ^ EMBED_SEED_SALT);
    let input = InputLayer::init(&mut params, input_spec, &mut embed_rng);
    let model = build_model(config, &mut params, seed)?;
    Ok(TrainState {
        params,
        model,
        input,
    })
}

/// Per-task losses: BCE from logits for classification, MSE for regression.
pub fn task_losses(
    g: &mut Graph,
    preds: &[Var],
    labels: &[Tensor],
    kinds: &[TaskKind],
) -> Result<Vec<Var>> {
    let mut losses = Vec::with_capacity(preds.len());
    for ((&p, y), kind) in preds.iter().zip(labels).zip(kinds) {
        let yv = g.input(y.clone());
        let loss = match kind {
            TaskKind::Classification => g.tape.bce_with_logits(p, yv)?,
            TaskKind::Regression => g.tape.mse_loss(p, yv)?,
        };
        losses.push(loss);
    }
    Ok(losses)
}

/// Sum of the per-task losses (equal weights).
pub fn total_loss(g: &mut Graph, losses: &[Var]) -> Result<Var> {
    let mut it = losses.iter();
    let mut total = *it.next().ok_or_else(|| Error::Invalid {
        op: "total_loss",
        detail: "no task losses".into(),
    })?;
    for &l in it {
        total = g.tape.add(total, l)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ne: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_score: f64,
}

/// Trains in place and restores the best-validation parameters before
/// returning. Deterministic for a fixed seed.
pub fn train(
    state: &mut TrainState,
    train_data: &EncodedDataset,
    valid_data: &EncodedDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    let kinds = state.model.task_kinds().to_vec();
    cfg.validate(kinds.len())?;
    if train_data.num_tasks() != kinds.len() {
        return Err(Error::Config(format!(
            "model has {} tasks, data has {}",
            kinds.len(),
            train_data.num_tasks()
        )));
    }

    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SEED_SALT);
    let mut best_values: Vec<Tensor> = snapshot(&state.params);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut history = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut example_count = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_data.batch(chunk);
            let mut g = Graph::new(&state.params);
            let x = state.input.encode(&mut g, &batch)?;
            let preds = state.model.forward(&mut g, x)?;
            let losses = task_losses(&mut g, &preds, &batch.labels, &kinds)?;
            let total = total_loss(&mut g, &losses)?;
            let loss_val = g
                .tape
                .scalar_f64(total)
                .unwrap_or_else(|| g.tape.value(total).data()[0] as f64);
            if !loss_val.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {loss_val} at epoch {epoch}, batch {bi} (lr {})",
                    cfg.learning_rate
                )));
            }
            loss_sum += loss_val * chunk.len() as f64;
            example_count += chunk.len();
            g.backward(total)?;
            let grads = g.gradients();
            adam.step(&mut state.params, &grads);
        }
        let train_loss = loss_sum / example_count.max(1) as f64;

        let val_metrics = evaluate(state, valid_data, EVAL_BATCH)?;
        let val_score = validation_score(&val_metrics, &kinds)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_score,
        });
        if cfg.verbose {
            eprintln!("epoch {epoch}: train loss {train_loss:.5}, val score {val_score:.5}");
        }

        if val_score > best_score {
            best_score = val_score;
            best_epoch = epoch;
            best_values = snapshot(&state.params);
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    restore(&mut state.params, &best_values);
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
        best_val_score: best_score,
    })
}

/// Model selection score: mean AUC over classification tasks; negated mean
/// MSE when a configuration has no classification task at all.
fn validation_score(metrics: &[TaskMetrics], kinds: &[TaskKind]) -> Result<f64> {
    let aucs: Vec<f64> = metrics.iter().filter_map(|m| m.auc).collect();
    if !aucs.is_empty() {
        return Ok(aucs.iter().sum::<f64>() / aucs.len() as f64);
    }
    let mses: Vec<f64> = metrics.iter().filter_map(|m| m.mse).collect();
    if mses.is_empty() {
        return Err(Error::Metric(format!(
            "no usable validation metric for task kinds {kinds:?}"
        )));
    }
    Ok(-mses.iter().sum::<f64>() / mses.len() as f64)
}

fn snapshot(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|p| p.value.clone()).collect()
}

fn restore(params: &mut ParamSet, values: &[Tensor]) {
    for (i, v) in values.iter().enumerate() {
        *params.value_mut(crate::nn::ParamId(i)) = v.clone();
    }
}

/// Forward-only pass over `data` computing per-task test metrics: AUC and
/// normalized entropy for classification tasks, MSE for regression tasks.
pub fn evaluate(
    state: &TrainState,
    data: &EncodedDataset,
    batch_size: usize,
) -> Result<Vec<TaskMetrics>> {
    let kinds = state.model.task_kinds().to_vec();
    let scores = predict(state, data, batch_size)?;
    let mut out = Vec::with_capacity(kinds.len());
    for (t, kind) in kinds.iter().enumerate() {
        let labels = data.labels[t].data();
        match kind {
            TaskKind::Classification => {
                let probs: Vec<f32> = scores[t].iter().map(|&z| stable_sigmoid(z)).collect();
                out.push(TaskMetrics {
                    auc: Some(metrics::auc(&scores[t], labels)?),
                    ne: Some(metrics::normalized_entropy(&probs, labels)?),
                    mse: None,
                });
            }
            TaskKind::Regression => {
                out.push(TaskMetrics {
                    auc: None,
                    ne: None,
                    mse: Some(metrics::mse(&scores[t], labels)?),
                });
            }
        }
    }
    Ok(out)
}

/// Mean total loss (equal-weight sum of per-task losses) over a dataset,
/// forward-only.
pub fn dataset_loss(state: &TrainState, data: &EncodedDataset, batch_size: usize) -> Result<f64> {
    let kinds = state.model.task_kinds().to_vec();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let mut g = Graph::new_inference(&state.params);
        let x = state.input.encode(&mut g, &batch)?;
        let preds = state.model.forward(&mut g, x)?;
        // inference graphs have no differentiable nodes; compute losses on a
        // scratch tape instead
        let mut scratch = crate::tape::Tape::new();
        for ((&p, y), kind) in preds.iter().zip(&batch.labels).zip(&kinds) {
            let pv = scratch.leaf(g.tape.value(p).clone());
            let yv = scratch.leaf(y.clone());
            let loss = match kind {
                TaskKind::Classification => scratch.bce_with_logits(pv, yv)?,
                TaskKind::Regression => scratch.mse_loss(pv, yv)?,
            };
            sum += scratch.scalar_f64(loss).unwrap_or_default() * chunk.len() as f64;
        }
        count += chunk.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Raw per-task prediction columns (logits for classification tasks).
pub fn predict(
    state: &TrainState,
    data: &EncodedDataset,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let num_tasks = state.model.num_tasks();
    let mut scores: Vec<Vec<f32>> = vec![Vec::with_capacity(data.len()); num_tasks];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let mut g = Graph::new_inference(&state.params);
        let x = state.input.encode(&mut g, &batch)?;
        let preds = state.model.forward(&mut g, x)?;
        for (t, &p) in preds.iter().enumerate() {
            scores[t].extend_from_slice(g.tape.value(p).data());
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::SharedBottomConfig;
    use crate::data::synth_bundle;

    fn small_model(input_dim: usize, tasks: usize) -> ModelConfig {
        ModelConfig::SharedBottom(SharedBottomConfig {
            num_tasks: tasks,
            input_dim,
            hidden_dims: vec![8],
            tower_hidden_dim: 4,
            task_kinds: vec![TaskKind::Classification; tasks],
        })
    }

    #[test]
    fn loss_weights_must_be_one() {
        let cfg = TrainConfig {
            loss_weights: Some(vec![1.0, 0.5]),
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let ok = TrainConfig {
            loss_weights: Some(vec![1.0, 1.0]),
            ..TrainConfig::default()
        };
        assert!(ok.validate(2).is_ok());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged_after_an_epoch() {
        let bundle = synth_bundle(4, 200, 4, 0.5).unwrap();
        let cfg = small_model(4, 2);
        let mut state = build_state(&cfg, &bundle.input_spec, 0).unwrap();
        let before: Vec<Vec<f32>> = state.params.iter().map(|p| p.value.data().to_vec()).collect();
        let tc = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 1,
            batch_size: 32,
            ..TrainConfig::default()
        };
        train(&mut state, &bundle.train, &bundle.valid, &tc, 0).unwrap();
        let after: Vec<Vec<f32>> = state.params.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn separable_synthetic_reaches_high_train_auc() {
        // noiseless linearly separable labels: AUC should approach 1
        let bundle = synth_bundle(7, 800, 6, 1.0).unwrap();
        let cfg = small_model(6, 2);
        let mut state = build_state(&cfg, &bundle.input_spec, 1).unwrap();
        let tc = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 50,
            ..TrainConfig::default()
        };
        train(&mut state, &bundle.train, &bundle.valid, &tc, 1).unwrap();
        let m = evaluate(&state, &bundle.train, 512).unwrap();
        assert!(m[0].auc.unwrap() > 0.99, "{:?}", m[0]);
    }

    #[test]
    fn initial_loss_near_ln2_on_balanced_data() {
        let bundle = synth_bundle(9, 512, 4, 0.0).unwrap();
        let cfg = small_model(4, 2);
        let state = build_state(&cfg, &bundle.input_spec, 3).unwrap();
        let batch = bundle.train.batch(&(0..256).collect::<Vec<_>>());
        let mut g = Graph::new(&state.params);
        let x = state.input.encode(&mut g, &batch).unwrap();
        let preds = state.model.forward(&mut g, x).unwrap();
        let kinds = state.model.task_kinds().to_vec();
        let losses = task_losses(&mut g, &preds, &batch.labels, &kinds).unwrap();
        for &l in &losses {
            let v = g.tape.scalar_f64(l).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 0.1, "loss at init {v}");
        }
    }

    #[test]
    fn total_loss_equals_sum_of_task_losses() {
        let bundle = synth_bundle(2, 128, 4, 0.3).unwrap();
        let cfg = small_model(4, 2);
        let state = build_state(&cfg, &bundle.input_spec, 0).unwrap();
        let batch = bundle.train.batch(&(0..64).collect::<Vec<_>>());
        let mut g = Graph::new(&state.params);
        let x = state.input.encode(&mut g, &batch).unwrap();
        let preds = state.model.forward(&mut g, x).unwrap();
        let kinds = state.model.task_kinds().to_vec();
        let losses = task_losses(&mut g, &preds, &batch.labels, &kinds).unwrap();
        let total = total_loss(&mut g, &losses).unwrap();
        let sum: f64 = losses
            .iter()
            .map(|&l| g.tape.scalar_f64(l).unwrap())
            .sum();
        let got = g.tape.value(total).data()[0] as f64;
        assert!((got - sum).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let bundle = synth_bundle(5, 300, 4, 0.5).unwrap();
        let cfg = small_model(4, 2);
        let tc = TrainConfig {
            max_epochs: 3,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let run = || {
            let mut state = build_state(&cfg, &bundle.input_spec, 11).unwrap();
            train(&mut state, &bundle.train, &bundle.valid, &tc, 11).unwrap();
            state
                .params
                .iter()
                .flat_map(|p| p.value.data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }
}
