//! The five comparison architectures, on the same tensor core and model
//! interface as the fusion network.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::nn::{Expert, GateLayer, Graph, Linear, ParamId, ParamSet, Tower};
use crate::tape::Var;
use crate::tensor::Tensor;

fn check_tasks(num_tasks: usize, task_kinds: &[TaskKind]) -> Result<()> {
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be at least 1".into()));
    }
    if task_kinds.len() != num_tasks {
        return Err(Error::Config(format!(
            "task_kinds has {} entries for {num_tasks} tasks",
            task_kinds.len()
        )));
    }
    Ok(())
}

fn check_dims(input_dim: usize, hidden_dims: &[usize], tower_hidden_dim: usize) -> Result<()> {
    if input_dim == 0 || tower_hidden_dim == 0 || hidden_dims.iter().any(|&d| d == 0) {
        return Err(Error::Config("dimensions must be at least 1".into()));
    }
    if hidden_dims.is_empty() {
        return Err(Error::Config("hidden_dims must not be empty".into()));
    }
    Ok(())
}

// ── shared-bottom ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedBottomConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    /// Widths of the shared ReLU stack.
    pub hidden_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    pub task_kinds: Vec<TaskKind>,
}

#[derive(Debug, Clone)]
pub struct SharedBottomModel {
    pub(crate) config: SharedBottomConfig,
    layers: Vec<Linear>,
    towers: Vec<Tower>,
}

pub fn build_shared_bottom(
    config: &SharedBottomConfig,
    params: &mut ParamSet,
    seed: u64,
) -> Result<SharedBottomModel> {
    check_tasks(config.num_tasks, &config.task_kinds)?;
    check_dims(config.input_dim, &config.hidden_dims, config.tower_hidden_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut d_in = config.input_dim;
    for (i, &d) in config.hidden_dims.iter().enumerate() {
        layers.push(Linear::init(
            params,
            &format!("shared/layer{i}"),
            d_in,
            d,
            &mut rng,
        ));
        d_in = d;
    }
    let towers = (0..config.num_tasks)
        .map(|t| {
            Tower::init(
                params,
                &format!("tower{t}"),
                d_in,
                config.tower_hidden_dim,
                &mut rng,
            )
        })
        .collect();
    Ok(SharedBottomModel {
        config: config.clone(),
        layers,
        towers,
    })
}

impl SharedBottomModel {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(g, h)?;
            h = g.tape.relu(z)?;
        }
        self.towers.iter().map(|t| t.forward(g, h)).collect()
    }
}

// ── MMoE ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmoeConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    /// Shared experts over the raw input.
    pub num_experts: usize,
    /// Layer widths of each expert MLP.
    pub hidden_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    pub task_kinds: Vec<TaskKind>,
}

#[derive(Debug, Clone)]
pub struct MmoeModel {
    pub(crate) config: MmoeConfig,
    experts: Vec<Vec<Linear>>,
    gates: Vec<GateLayer>,
    towers: Vec<Tower>,
}

pub fn build_mmoe(config: &MmoeConfig, params: &mut ParamSet, seed: u64) -> Result<MmoeModel> {
    check_tasks(config.num_tasks, &config.task_kinds)?;
    check_dims(config.input_dim, &config.hidden_dims, config.tower_hidden_dim)?;
    if config.num_experts == 0 {
        return Err(Error::Config("MMoE needs at least one expert".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut experts = Vec::new();
    for i in 0..config.num_experts {
        let mut net = Vec::new();
        let mut d_in = config.input_dim;
        for (j, &d) in config.hidden_dims.iter().enumerate() {
            net.push(Linear::init(
                params,
                &format!("expert{i}/layer{j}"),
                d_in,
                d,
                &mut rng,
            ));
            d_in = d;
        }
        experts.push(net);
    }
    let gates = (0..config.num_tasks)
        .map(|t| {
            GateLayer::init(
                params,
                &format!("task{t}/gate"),
                config.num_experts,
                config.input_dim,
                &mut rng,
            )
        })
        .collect();
    let d_last = *config.hidden_dims.last().expect("validated");
    let towers = (0..config.num_tasks)
        .map(|t| {
            Tower::init(
                params,
                &format!("tower{t}"),
                d_last,
                config.tower_hidden_dim,
                &mut rng,
            )
        })
        .collect();
    Ok(MmoeModel {
        config: config.clone(),
        experts,
        gates,
        towers,
    })
}

impl MmoeModel {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.experts.len());
        for net in &self.experts {
            let mut h = x;
            for layer in net {
                let z = layer.forward(g, h)?;
                h = g.tape.relu(z)?;
            }
            outs.push(h);
        }
        let stacked = g.tape.stack(&outs)?;
        let mut preds = Vec::with_capacity(self.gates.len());
        for (gate, tower) in self.gates.iter().zip(&self.towers) {
            let w = gate.forward(g, x)?;
            let fused = g.tape.mix_rows(w, stacked)?;
            preds.push(tower.forward(g, fused)?);
        }
        Ok(preds)
    }

    /// Per-task gate weights, used by gate capture.
    pub fn task_gate_weights(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.gates.iter().map(|gate| gate.forward(g, x)).collect()
    }
}

// ── multi-level MMoE ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlMmoeConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    /// Experts per fusion level.
    pub num_experts: usize,
    /// Expert width per level; the number of levels is this list's length.
    pub hidden_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    pub task_kinds: Vec<TaskKind>,
}

/// Multi-level MMoE: experts at level l+1 consume per-expert gated mixes of
/// level l's outputs, and every gating module is conditioned on the raw
/// input.
#[derive(Debug, Clone)]
pub struct MlMmoeModel {
    pub(crate) config: MlMmoeConfig,
    levels: Vec<Vec<Expert>>,
    /// `inner_gates[l][j]` feeds level l+2's expert j from level l+1's stack.
    inner_gates: Vec<Vec<GateLayer>>,
    task_gates: Vec<GateLayer>,
    towers: Vec<Tower>,
}

pub fn build_ml_mmoe(
    config: &MlMmoeConfig,
    params: &mut ParamSet,
    seed: u64,
) -> Result<MlMmoeModel> {
    check_tasks(config.num_tasks, &config.task_kinds)?;
    check_dims(config.input_dim, &config.hidden_dims, config.tower_hidden_dim)?;
    if config.num_experts == 0 {
        return Err(Error::Config("ML-MMoE needs at least one expert".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_levels = config.hidden_dims.len();
    let mut levels = Vec::new();
    for l in 1..=num_levels {
        let d_in = if l == 1 {
            config.input_dim
        } else {
            config.hidden_dims[l - 2]
        };
        let d_out = config.hidden_dims[l - 1];
        levels.push(
            (0..config.num_experts)
                .map(|i| {
                    Expert::init(
                        params,
                        &format!("level{l}/expert{i}"),
                        d_in,
                        d_out,
                        &mut rng,
                    )
                })
                .collect(),
        );
    }
    // one gate per higher-level expert, all conditioned on the raw input
    let mut inner_gates = Vec::new();
    for l in 2..=num_levels {
        inner_gates.push(
            (0..config.num_experts)
                .map(|j| {
                    GateLayer::init(
                        params,
                        &format!("level{l}/ingate{j}"),
                        config.num_experts,
                        config.input_dim,
                        &mut rng,
                    )
                })
                .collect(),
        );
    }
    let task_gates = (0..config.num_tasks)
        .map(|t| {
            GateLayer::init(
                params,
                &format!("task{t}/gate"),
                config.num_experts,
                config.input_dim,
                &mut rng,
            )
        })
        .collect();
    let d_last = *config.hidden_dims.last().expect("validated");
    let towers = (0..config.num_tasks)
        .map(|t| {
            Tower::init(
                params,
                &format!("tower{t}"),
                d_last,
                config.tower_hidden_dim,
                &mut rng,
            )
        })
        .collect();
    Ok(MlMmoeModel {
        config: config.clone(),
        levels,
        inner_gates,
        task_gates,
        towers,
    })
}

impl MlMmoeModel {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let first: Result<Vec<Var>> = self.levels[0].iter().map(|e| e.forward(g, x)).collect();
        let mut stacked = g.tape.stack(&first?)?;
        for (l, level) in self.levels.iter().enumerate().skip(1) {
            let mut next = Vec::with_capacity(level.len());
            for (j, expert) in level.iter().enumerate() {
                let w = self.inner_gates[l - 1][j].forward(g, x)?;
                let mixed = g.tape.mix_rows(w, stacked)?;
                next.push(expert.forward(g, mixed)?);
            }
            stacked = g.tape.stack(&next)?;
        }
        let mut preds = Vec::with_capacity(self.task_gates.len());
        for (gate, tower) in self.task_gates.iter().zip(&self.towers) {
            let w = gate.forward(g, x)?;
            let fused = g.tape.mix_rows(w, stacked)?;
            preds.push(tower.forward(g, fused)?);
        }
        Ok(preds)
    }

    pub fn task_gate_weights(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.task_gates.iter().map(|gate| gate.forward(g, x)).collect()
    }
}

// ── cross-stitch ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossStitchConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    /// Per-task sub-network layer widths; a stitch unit follows each layer.
    pub hidden_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    pub task_kinds: Vec<TaskKind>,
}

/// One sub-network per task with a cross-stitch unit after every hidden
/// layer. Stitch weights are learnt scalars, fixed across examples.
#[derive(Debug, Clone)]
pub struct CrossStitchModel {
    pub(crate) config: CrossStitchConfig,
    subnets: Vec<Vec<Linear>>,
    /// `stitches[u][t]` is the `[1 x T]` mixing row producing task t's output
    /// of stitch unit u.
    stitches: Vec<Vec<ParamId>>,
    towers: Vec<Tower>,
}

pub fn build_cross_stitch(
    config: &CrossStitchConfig,
    params: &mut ParamSet,
    seed: u64,
) -> Result<CrossStitchModel> {
    check_tasks(config.num_tasks, &config.task_kinds)?;
    check_dims(config.input_dim, &config.hidden_dims, config.tower_hidden_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_count = config.num_tasks;
    let mut subnets = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut net = Vec::new();
        let mut d_in = config.input_dim;
        for (j, &d) in config.hidden_dims.iter().enumerate() {
            net.push(Linear::init(
                params,
                &format!("task{t}/layer{j}"),
                d_in,
                d,
                &mut rng,
            ));
            d_in = d;
        }
        subnets.push(net);
    }
    // identity plus small noise: training starts near independent networks
    let mut stitches = Vec::new();
    for u in 0..config.hidden_dims.len() {
        let mut rows = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let mut init = crate::nn::uniform_fan_in(&mut rng, 10_000, vec![1, t_count]);
            init.data_mut()[t] += 1.0;
            rows.push(params.add(format!("stitch{u}/task{t}"), init));
        }
        stitches.push(rows);
    }
    let d_last = *config.hidden_dims.last().expect("validated");
    let towers = (0..t_count)
        .map(|t| {
            Tower::init(
                params,
                &format!("tower{t}"),
                d_last,
                config.tower_hidden_dim,
                &mut rng,
            )
        })
        .collect();
    Ok(CrossStitchModel {
        config: config.clone(),
        subnets,
        stitches,
        towers,
    })
}

impl CrossStitchModel {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let t_count = self.config.num_tasks;
        let mut hs: Vec<Var> = vec![x; t_count];
        for (u, rows) in self.stitches.iter().enumerate() {
            let mut acts = Vec::with_capacity(t_count);
            for t in 0..t_count {
                let z = self.subnets[t][u].forward(g, hs[t])?;
                acts.push(g.tape.relu(z)?);
            }
            let stacked = g.tape.stack(&acts)?;
            let mut mixed = Vec::with_capacity(t_count);
            for &row in rows {
                let w = g.param(row);
                mixed.push(g.tape.mix_static(w, stacked)?);
            }
            hs = mixed;
        }
        self.towers
            .iter()
            .zip(&hs)
            .map(|(tower, &h)| tower.forward(g, h))
            .collect()
    }

    /// Overwrites every stitch unit with the exact identity mapping.
    pub fn set_identity_stitches(&self, params: &mut ParamSet) {
        for rows in &self.stitches {
            for (t, &row) in rows.iter().enumerate() {
                let v = params.value_mut(row).data_mut();
                v.fill(0.0);
                v[t] = 1.0;
            }
        }
    }

    pub fn stitch_param(&self, unit: usize, task: usize) -> ParamId {
        self.stitches[unit][task]
    }
}

// ── PLE ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PleConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub experts_per_task: Vec<usize>,
    /// PLE requires at least one shared expert.
    pub shared_experts: usize,
    /// Expert width per extraction level.
    pub hidden_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    pub task_kinds: Vec<TaskKind>,
}

#[derive(Debug, Clone)]
struct PleUnit {
    experts: Vec<Expert>,
    /// `None` for the shared unit at the final level.
    gate: Option<GateLayer>,
}

/// Progressive separation routing: task units gate over their native experts
/// plus the shared experts; the shared unit gates over every expert. Gates
/// are conditioned on the consuming unit's previous-level output.
#[derive(Debug, Clone)]
pub struct PleModel {
    pub(crate) config: PleConfig,
    /// Per level: task units then the shared unit.
    levels: Vec<Vec<PleUnit>>,
    towers: Vec<Tower>,
}

pub fn build_ple(config: &PleConfig, params: &mut ParamSet, seed: u64) -> Result<PleModel> {
    check_tasks(config.num_tasks, &config.task_kinds)?;
    check_dims(config.input_dim, &config.hidden_dims, config.tower_hidden_dim)?;
    if config.experts_per_task.len() != config.num_tasks {
        return Err(Error::Config(format!(
            "experts_per_task has {} entries for {} tasks",
            config.experts_per_task.len(),
            config.num_tasks
        )));
    }
    if config.experts_per_task.iter().any(|&m| m == 0) {
        return Err(Error::Config("every task needs at least one expert".into()));
    }
    if config.shared_experts == 0 {
        return Err(Error::Config(
            "PLE requires at least one shared expert".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_levels = config.hidden_dims.len();
    let total: usize = config.experts_per_task.iter().sum::<usize>() + config.shared_experts;
    let mut levels = Vec::with_capacity(num_levels);
    for l in 1..=num_levels {
        let d_in = if l == 1 {
            config.input_dim
        } else {
            config.hidden_dims[l - 2]
        };
        let d_out = config.hidden_dims[l - 1];
        let mut units = Vec::new();
        for t in 0..config.num_tasks {
            let m = config.experts_per_task[t];
            let experts = (0..m)
                .map(|i| {
                    Expert::init(
                        params,
                        &format!("level{l}/task{t}/expert{i}"),
                        d_in,
                        d_out,
                        &mut rng,
                    )
                })
                .collect();
            let gate = GateLayer::init(
                params,
                &format!("level{l}/task{t}/gate"),
                m + config.shared_experts,
                d_in,
                &mut rng,
            );
            units.push(PleUnit {
                experts,
                gate: Some(gate),
            });
        }
        let experts = (0..config.shared_experts)
            .map(|i| {
                Expert::init(
                    params,
                    &format!("level{l}/shared/expert{i}"),
                    d_in,
                    d_out,
                    &mut rng,
                )
            })
            .collect();
        let gate = if l < num_levels {
            Some(GateLayer::init(
                params,
                &format!("level{l}/shared/gate"),
                total,
                d_in,
                &mut rng,
            ))
        } else {
            None
        };
        units.push(PleUnit { experts, gate });
        levels.push(units);
    }
    let d_last = *config.hidden_dims.last().expect("validated");
    let towers = (0..config.num_tasks)
        .map(|t| {
            Tower::init(
                params,
                &format!("tower{t}"),
                d_last,
                config.tower_hidden_dim,
                &mut rng,
            )
        })
        .collect();
    Ok(PleModel {
        config: config.clone(),
        levels,
        towers,
    })
}

impl PleModel {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(self.forward_traced(g, x)?.0)
    }

    /// Forward pass that also returns per-level task-unit gate weights.
    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
        let t_count = self.config.num_tasks;
        let num_units = t_count + 1;
        let mut prevs: Vec<Var> = vec![x; num_units];
        let mut gate_trace = Vec::new();
        for (li, level) in self.levels.iter().enumerate() {
            let mut per_unit: Vec<Vec<Var>> = Vec::with_capacity(num_units);
            for (u, unit) in level.iter().enumerate() {
                let outs: Result<Vec<Var>> = unit
                    .experts
                    .iter()
                    .map(|e| e.forward(g, prevs[u]))
                    .collect();
                per_unit.push(outs?);
            }
            let shared = per_unit[t_count].clone();
            let mut next = Vec::with_capacity(num_units);
            let mut level_gates = Vec::with_capacity(t_count);
            for (t, unit) in level.iter().take(t_count).enumerate() {
                // native experts then shared experts
                let mut visible = per_unit[t].clone();
                visible.extend_from_slice(&shared);
                let stacked = g.tape.stack(&visible)?;
                let w = unit.gate.as_ref().expect("task units always gate").forward(g, prevs[t])?;
                level_gates.push(w);
                next.push(g.tape.mix_rows(w, stacked)?);
            }
            let shared_unit = &level[t_count];
            if let Some(gate) = &shared_unit.gate {
                let all: Vec<Var> = per_unit.iter().flatten().copied().collect();
                let stacked = g.tape.stack(&all)?;
                let w = gate.forward(g, prevs[t_count])?;
                next.push(g.tape.mix_rows(w, stacked)?);
            } else {
                debug_assert_eq!(li + 1, self.levels.len());
                next.push(prevs[t_count]);
            }
            prevs = next;
            gate_trace.push(level_gates);
        }
        let preds: Result<Vec<Var>> = self
            .towers
            .iter()
            .enumerate()
            .map(|(t, tower)| tower.forward(g, prevs[t]))
            .collect();
        Ok((preds?, gate_trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(n: usize) -> Vec<TaskKind> {
        vec![TaskKind::Classification; n]
    }

    #[test]
    fn ple_rejects_zero_shared_experts() {
        let c = PleConfig {
            num_tasks: 2,
            input_dim: 4,
            experts_per_task: vec![1, 1],
            shared_experts: 0,
            hidden_dims: vec![3],
            tower_hidden_dim: 2,
            task_kinds: kinds(2),
        };
        let mut params = ParamSet::new();
        assert!(build_ple(&c, &mut params, 0).is_err());
    }

    #[test]
    fn mmoe_single_expert_routes_everything_through_it() {
        let c = MmoeConfig {
            num_tasks: 2,
            input_dim: 3,
            num_experts: 1,
            hidden_dims: vec![4],
            tower_hidden_dim: 2,
            task_kinds: kinds(2),
        };
        let mut params = ParamSet::new();
        let model = build_mmoe(&c, &mut params, 2).unwrap();
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![0.5, -0.1, 0.9]]).unwrap());
        // softmax over one expert is exactly 1: the fused value equals the
        // expert output, so predictions equal tower(expert(x))
        let preds = model.forward(&mut g, x).unwrap();
        let expert_out = {
            let mut h = x;
            for layer in &model.experts[0] {
                let z = layer.forward(&mut g, h).unwrap();
                h = g.tape.relu(z).unwrap();
            }
            h
        };
        for (t, &p) in preds.iter().enumerate() {
            let direct = model.towers[t].forward(&mut g, expert_out).unwrap();
            assert_eq!(g.tape.value(p).data(), g.tape.value(direct).data());
        }
    }

    #[test]
    fn mmoe_uniform_gates_average_experts() {
        let c = MmoeConfig {
            num_tasks: 1,
            input_dim: 2,
            num_experts: 3,
            hidden_dims: vec![2],
            tower_hidden_dim: 2,
            task_kinds: kinds(1),
        };
        let mut params = ParamSet::new();
        let model = build_mmoe(&c, &mut params, 4).unwrap();
        params.value_mut(model.gates[0].w).data_mut().fill(0.0);
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let w = model.gates[0].forward(&mut g, x).unwrap();
        for &v in g.tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_stitch_identity_matches_independent_networks() {
        let c = CrossStitchConfig {
            num_tasks: 2,
            input_dim: 3,
            hidden_dims: vec![4, 3],
            tower_hidden_dim: 2,
            task_kinds: kinds(2),
        };
        let mut params = ParamSet::new();
        let model = build_cross_stitch(&c, &mut params, 7).unwrap();
        model.set_identity_stitches(&mut params);
        let x = Tensor::from_rows(&[vec![0.2, -0.7, 1.4], vec![1.0, 0.0, -1.0]]).unwrap();
        let mut g = Graph::new(&params);
        let xv = g.input(x.clone());
        let preds = model.forward(&mut g, xv).unwrap();
        // independent per-task forward: same layers, no stitching
        for t in 0..2 {
            let mut g2 = Graph::new(&params);
            let xv2 = g2.input(x.clone());
            let mut h = xv2;
            for layer in &model.subnets[t] {
                let z = layer.forward(&mut g2, h).unwrap();
                h = g2.tape.relu(z).unwrap();
            }
            let direct = model.towers[t].forward(&mut g2, h).unwrap();
            assert_eq!(
                g.tape.value(preds[t]).data(),
                g2.tape.value(direct).data(),
                "task {t} must match bit-exactly under identity stitches"
            );
        }
    }

    #[test]
    fn cross_stitch_symmetric_rows_tie_outputs() {
        let c = CrossStitchConfig {
            num_tasks: 2,
            input_dim: 2,
            hidden_dims: vec![3],
            tower_hidden_dim: 2,
            task_kinds: kinds(2),
        };
        let mut params = ParamSet::new();
        let model = build_cross_stitch(&c, &mut params, 3).unwrap();
        // same sub-network weights for both tasks, stitch rows both [0.5, 0.5]
        for j in 0..1 {
            let src = params
                .value(params.id_by_name(&format!("task0/layer{j}/weight")).unwrap())
                .clone();
            params
                .set_by_name(&format!("task1/layer{j}/weight"), src)
                .unwrap();
            let srcb = params
                .value(params.id_by_name(&format!("task0/layer{j}/bias")).unwrap())
                .clone();
            params
                .set_by_name(&format!("task1/layer{j}/bias"), srcb)
                .unwrap();
        }
        for t in 0..2 {
            params
                .value_mut(model.stitch_param(0, t))
                .data_mut()
                .copy_from_slice(&[0.5, 0.5]);
        }
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![0.8, -0.3]]).unwrap());
        let t_count = model.config.num_tasks;
        let mut hs: Vec<Var> = vec![x; t_count];
        let mut acts = Vec::new();
        for t in 0..t_count {
            let z = model.subnets[t][0].forward(&mut g, hs[t]).unwrap();
            acts.push(g.tape.relu(z).unwrap());
        }
        let stacked = g.tape.stack(&acts).unwrap();
        for t in 0..t_count {
            let w = g.param(model.stitch_param(0, t));
            hs[t] = g.tape.mix_static(w, stacked).unwrap();
        }
        assert_eq!(g.tape.value(hs[0]).data(), g.tape.value(hs[1]).data());
    }

    #[test]
    fn ple_final_level_has_no_shared_gate() {
        let c = PleConfig {
            num_tasks: 2,
            input_dim: 4,
            experts_per_task: vec![1, 1],
            shared_experts: 1,
            hidden_dims: vec![3, 3],
            tower_hidden_dim: 2,
            task_kinds: kinds(2),
        };
        let mut params = ParamSet::new();
        let model = build_ple(&c, &mut params, 0).unwrap();
        assert!(params.id_by_name("level1/shared/gate").is_some());
        assert!(params.id_by_name("level2/shared/gate").is_none());
        // task gates see native + shared experts only
        assert_eq!(
            params
                .value(params.id_by_name("level1/task0/gate").unwrap())
                .shape(),
            &[2, 4]
        );
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap());
        let preds = model.forward(&mut g, x).unwrap();
        assert_eq!(preds.len(), 2);
    }

    #[test]
    fn ple_saturated_native_gate_ignores_shared_expert() {
        let c = PleConfig {
            num_tasks: 1,
            input_dim: 2,
            experts_per_task: vec![1],
            shared_experts: 1,
            hidden_dims: vec![2],
            tower_hidden_dim: 2,
            task_kinds: kinds(1),
        };
        let mut params = ParamSet::new();
        let model = build_ple(&c, &mut params, 1).unwrap();
        // huge logit on the native expert (gate row 0)
        let gw = params.id_by_name("level1/task0/gate").unwrap();
        params
            .value_mut(gw)
            .data_mut()
            .copy_from_slice(&[100.0, 100.0, 0.0, 0.0]);
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let (preds, _) = model.forward_traced(&mut g, x).unwrap();
        // compare to tower over the native expert alone
        let native = model.levels[0][0].experts[0].forward(&mut g, x).unwrap();
        let direct = model.towers[0].forward(&mut g, native).unwrap();
        let a = g.tape.value(preds[0]).data()[0];
        let b = g.tape.value(direct).data()[0];
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
