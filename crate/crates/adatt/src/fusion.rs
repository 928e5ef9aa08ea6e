//! Adaptive task-to-task fusion network.
//!
//! The model stacks `L` fusion levels. Each level holds one fusion unit per
//! task plus an optional shared unit. A unit owns `m` experts (single Linear +
//! ReLU each); every expert at a level is computed from its own unit's
//! previous-level output, and all of them are stacked into one `[B x n x d]`
//! block in a fixed order: task 0's experts, ..., task T-1's experts, then the
//! shared experts.
//!
//! A task unit combines the full stack two ways that are algebraically
//! identical:
//!
//! * two-term: `softmax-gated sum over all experts + v · native experts`
//! * combined: one weighted sum with weights `gate + zero-padded v`
//!
//! The combined form is the default execution path; the two-term form is kept
//! callable so the identity can be asserted on both values and gradients.
//! With a single native expert the native weight is fixed at one and is not
//! learned. Shared units gate over all experts like task units but carry no
//! native term, and at the final level they perform no fusion at all — their
//! experts only feed the task units.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::nn::{uniform_fan_in, Expert, GateLayer, Graph, ParamId, ParamSet, Tower};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Full architectural description of an AdaTT model.
///
/// `shared_experts == 0` selects the task-specific variant (AdaTT-sp); the
/// general form with shared units falls back to it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub num_tasks: usize,
    pub num_levels: usize,
    /// Native experts per task-specific unit, one entry per task.
    pub experts_per_task: Vec<usize>,
    /// Experts in the shared unit; 0 means no shared unit.
    pub shared_experts: usize,
    pub input_dim: usize,
    /// Expert output width per level, length `num_levels`.
    pub expert_dims: Vec<usize>,
    pub tower_hidden_dim: usize,
    pub task_kinds: Vec<TaskKind>,
    /// Drop the linear native-expert term, leaving gated fusion only.
    #[serde(default)]
    pub ablate_native_fusion: bool,
}

impl FusionConfig {
    pub fn is_sp(&self) -> bool {
        self.shared_experts == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("num_tasks must be at least 1".into()));
        }
        if self.experts_per_task.len() != self.num_tasks {
            return Err(Error::Config(format!(
                "experts_per_task has {} entries for {} tasks",
                self.experts_per_task.len(),
                self.num_tasks
            )));
        }
        if self.task_kinds.len() != self.num_tasks {
            return Err(Error::Config(format!(
                "task_kinds has {} entries for {} tasks",
                self.task_kinds.len(),
                self.num_tasks
            )));
        }
        if self.experts_per_task.iter().any(|&m| m == 0) {
            return Err(Error::Config("every task needs at least one expert".into()));
        }
        if self.num_levels == 0 || self.expert_dims.len() != self.num_levels {
            return Err(Error::Config(format!(
                "expert_dims has {} entries for {} levels",
                self.expert_dims.len(),
                self.num_levels
            )));
        }
        if self.expert_dims.iter().any(|&d| d == 0) || self.input_dim == 0 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        if self.tower_hidden_dim == 0 {
            return Err(Error::Config("tower_hidden_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Experts per level across all units.
    pub fn total_experts(&self) -> usize {
        self.experts_per_task.iter().sum::<usize>() + self.shared_experts
    }
}

/// Where each unit's experts live inside the stacked `[B x n x d]` block.
#[derive(Debug, Clone)]
pub struct ExpertLayout {
    /// `(offset, len)` per unit, tasks first, shared unit last when present.
    pub spans: Vec<(usize, usize)>,
    pub total: usize,
    /// Column labels, e.g. `task0/e1`, `shared/e0`.
    pub labels: Vec<String>,
}

impl ExpertLayout {
    fn new(experts_per_task: &[usize], shared_experts: usize) -> ExpertLayout {
        let mut spans = Vec::new();
        let mut labels = Vec::new();
        let mut off = 0;
        for (t, &m) in experts_per_task.iter().enumerate() {
            spans.push((off, m));
            for i in 0..m {
                labels.push(format!("task{t}/e{i}"));
            }
            off += m;
        }
        if shared_experts > 0 {
            spans.push((off, shared_experts));
            for i in 0..shared_experts {
                labels.push(format!("shared/e{i}"));
            }
            off += shared_experts;
        }
        ExpertLayout {
            spans,
            total: off,
            labels,
        }
    }
}

/// All expert outputs of one level, stacked and per-unit.
pub struct LevelActivations {
    /// `[B x total x d]` in layout order.
    pub stacked: Var,
    /// The same expert outputs grouped by owning unit.
    pub per_unit: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
enum NativeWeights {
    /// Ablated, or a shared unit: no native term.
    Absent,
    /// Single native expert: fixed unit weight, not learned.
    Unit,
    Learned(ParamId),
}

/// Which algebraic form of the fusion combination to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionPath {
    /// One weighted sum with `gate + pad(v)` weights.
    Combined,
    /// Gated all-expert sum plus the native linear term, added separately.
    TwoTerm,
}

/// Output of one fusion unit plus the weights that produced it.
pub struct UnitFusion {
    pub output: Var,
    /// Softmax gate weights `[B x total]`.
    pub gate_weights: Var,
    /// `gate + pad(v)` `[B x total]`; present on the combined path.
    pub combined_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionUnit {
    pub(crate) experts: Vec<Expert>,
    /// `None` only for the shared unit at the final level.
    pub(crate) gate: Option<GateLayer>,
    native: NativeWeights,
    pub(crate) native_offset: usize,
}

impl FusionUnit {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Fuses all experts for this unit. `own_prev` conditions the gate; the
    /// native term covers this unit's span of the stack.
    pub fn forward(
        &self,
        g: &mut Graph,
        own_prev: Var,
        acts: &LevelActivations,
        path: FusionPath,
    ) -> Result<UnitFusion> {
        let gate = self.gate.as_ref().ok_or_else(|| {
            Error::Unsupported("final-level shared units do not fuse".into())
        })?;
        let total = g.tape.value(acts.stacked).shape()[1];
        if total != gate.num_experts {
            return Err(Error::shape_mismatch(
                "fusion_unit",
                &[gate.num_experts],
                &[total],
            ));
        }
        let gate_weights = gate.forward(g, own_prev)?;
        let m = self.experts.len();
        match path {
            FusionPath::Combined => {
                let combined = match self.native {
                    NativeWeights::Absent => gate_weights,
                    NativeWeights::Unit => {
                        let ones = g.input(Tensor::row(vec![1.0; m]));
                        let pad = g.tape.pad_cols(ones, self.native_offset, total)?;
                        g.tape.add(gate_weights, pad)?
                    }
                    NativeWeights::Learned(v) => {
                        let vv = g.param(v);
                        let pad = g.tape.pad_cols(vv, self.native_offset, total)?;
                        g.tape.add(gate_weights, pad)?
                    }
                };
                let output = g.tape.mix_rows(combined, acts.stacked)?;
                Ok(UnitFusion {
                    output,
                    gate_weights,
                    combined_weights: Some(combined),
                })
            }
            FusionPath::TwoTerm => {
                let gated = g.tape.mix_rows(gate_weights, acts.stacked)?;
                let output = match self.native {
                    NativeWeights::Absent => gated,
                    NativeWeights::Unit => {
                        // single native expert with unit weight
                        let own = acts.per_unit[self.unit_index(acts)?][0];
                        g.tape.add(gated, own)?
                    }
                    NativeWeights::Learned(v) => {
                        let own = &acts.per_unit[self.unit_index(acts)?];
                        let native_stack = g.tape.stack(own)?;
                        let nat = g.tape.mix_static(g.param(v), native_stack)?;
                        g.tape.add(gated, nat)?
                    }
                };
                Ok(UnitFusion {
                    output,
                    gate_weights,
                    combined_weights: None,
                })
            }
        }
    }

    /// Recovers this unit's position from its expert offset.
    fn unit_index(&self, acts: &LevelActivations) -> Result<usize> {
        let mut off = 0;
        for (u, outs) in acts.per_unit.iter().enumerate() {
            if off == self.native_offset {
                return Ok(u);
            }
            off += outs.len();
        }
        Err(Error::shape_mismatch(
            "fusion_unit",
            &[self.native_offset],
            &[off],
        ))
    }
}

/// Per-level weight vars recorded during a traced forward pass, task units
/// only, in task order.
pub struct LevelTrace {
    /// 1-based fusion level.
    pub level: usize,
    pub gate_weights: Vec<Var>,
    pub combined_weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct AdattModel {
    config: FusionConfig,
    /// `levels[l]`: task units 0..T, then the shared unit when configured.
    levels: Vec<Vec<FusionUnit>>,
    towers: Vec<Tower>,
    layout: ExpertLayout,
}

/// Allocates all fusion-unit and tower parameters for `config`.
///
/// Identical seeds produce identical initial parameters; the parameter count
/// is a deterministic function of the configuration.
pub fn build_adatt(
    config: &FusionConfig,
    params: &mut ParamSet,
    seed: u64,
) -> Result<AdattModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ExpertLayout::new(&config.experts_per_task, config.shared_experts);
    let total = layout.total;

    let mut levels = Vec::with_capacity(config.num_levels);
    for l in 1..=config.num_levels {
        let d_in = if l == 1 {
            config.input_dim
        } else {
            config.expert_dims[l - 2]
        };
        let d_out = config.expert_dims[l - 1];
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
                total,
                d_in,
                &mut rng,
            );
            let native = if config.ablate_native_fusion {
                NativeWeights::Absent
            } else if m == 1 {
                NativeWeights::Unit
            } else {
                let v = params.add(
                    format!("level{l}/task{t}/native"),
                    uniform_fan_in(&mut rng, m, vec![1, m]),
                );
                NativeWeights::Learned(v)
            };
            units.push(FusionUnit {
                experts,
                gate: Some(gate),
                native,
                native_offset: layout.spans[t].0,
            });
        }
        if config.shared_experts > 0 {
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
            // Final-level shared units only produce expert outputs.
            let gate = if l < config.num_levels {
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
            units.push(FusionUnit {
                experts,
                gate,
                native: NativeWeights::Absent,
                native_offset: layout.spans[config.num_tasks].0,
            });
        }
        levels.push(units);
    }

    let d_last = *config.expert_dims.last().expect("validated non-empty");
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

    Ok(AdattModel {
        config: config.clone(),
        levels,
        towers,
        layout,
    })
}

impl AdattModel {
    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn layout(&self) -> &ExpertLayout {
        &self.layout
    }

    pub fn unit(&self, level: usize, unit: usize) -> &FusionUnit {
        &self.levels[level - 1][unit]
    }

    /// Per-task predictions `[B x 1]` via the combined execution path.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(self.forward_with(g, x, FusionPath::Combined, false)?.0)
    }

    /// Forward pass returning per-level gate/combined weight vars alongside
    /// the predictions. Traces task units only.
    pub fn forward_traced(&self, g: &mut Graph, x: Var) -> Result<(Vec<Var>, Vec<LevelTrace>)> {
        let (preds, trace) = self.forward_with(g, x, FusionPath::Combined, true)?;
        Ok((preds, trace))
    }

    /// Forward pass on a chosen fusion path.
    pub fn forward_path(&self, g: &mut Graph, x: Var, path: FusionPath) -> Result<Vec<Var>> {
        Ok(self.forward_with(g, x, path, false)?.0)
    }

    fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        path: FusionPath,
        traced: bool,
    ) -> Result<(Vec<Var>, Vec<LevelTrace>)> {
        let width = g.tape.value(x).cols();
        if width != self.config.input_dim {
            return Err(Error::shape_mismatch(
                "model_forward",
                g.tape.value(x).shape(),
                &[self.config.input_dim],
            ));
        }
        let num_units = self.levels[0].len();
        let mut prevs: Vec<Var> = vec![x; num_units];
        let mut traces = Vec::new();

        for (li, level) in self.levels.iter().enumerate() {
            let mut per_unit = Vec::with_capacity(num_units);
            for (u, unit) in level.iter().enumerate() {
                let outs: Result<Vec<Var>> = unit
                    .experts
                    .iter()
                    .map(|e| e.forward(g, prevs[u]))
                    .collect();
                per_unit.push(outs?);
            }
            let flat: Vec<Var> = per_unit.iter().flatten().copied().collect();
            let stacked = g.tape.stack(&flat)?;
            let acts = LevelActivations { stacked, per_unit };

            let mut trace = LevelTrace {
                level: li + 1,
                gate_weights: Vec::new(),
                combined_weights: Vec::new(),
            };
            let mut next = Vec::with_capacity(num_units);
            for (u, unit) in level.iter().enumerate() {
                if unit.gate.is_none() {
                    // final-level shared unit: experts feed the stack, nothing else
                    next.push(prevs[u]);
                    continue;
                }
                let fused = unit.forward(g, prevs[u], &acts, path)?;
                if traced && u < self.config.num_tasks {
                    trace.gate_weights.push(fused.gate_weights);
                    if let Some(c) = fused.combined_weights {
                        trace.combined_weights.push(c);
                    }
                }
                next.push(fused.output);
            }
            prevs = next;
            if traced {
                traces.push(trace);
            }
        }

        let preds: Result<Vec<Var>> = self
            .towers
            .iter()
            .enumerate()
            .map(|(t, tower)| tower.forward(g, prevs[t]))
            .collect();
        Ok((preds?, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;

    fn cfg(
        num_tasks: usize,
        levels: usize,
        experts: Vec<usize>,
        shared: usize,
        input_dim: usize,
        dims: Vec<usize>,
    ) -> FusionConfig {
        FusionConfig {
            num_tasks,
            num_levels: levels,
            experts_per_task: experts,
            shared_experts: shared,
            input_dim,
            expert_dims: dims,
            tower_hidden_dim: 2,
            task_kinds: vec![TaskKind::Classification; num_tasks],
            ablate_native_fusion: false,
        }
    }

    #[test]
    fn figure_1b_structure() {
        // 2 tasks, 2 levels, 2 experts each, one shared expert
        let c = cfg(2, 2, vec![2, 2], 1, 4, vec![3, 3]);
        let mut params = ParamSet::new();
        let model = build_adatt(&c, &mut params, 0).unwrap();
        assert_eq!(model.levels.len(), 2);
        assert_eq!(model.levels[0].len(), 3); // 2 task units + shared
        assert!(model.levels[0][2].gate.is_some()); // shared gate below final level
        assert!(model.levels[1][2].gate.is_none()); // no fusion at final level
        assert!(params.id_by_name("level1/shared/gate").is_some());
        assert!(params.id_by_name("level2/shared/gate").is_none());
        assert!(params.id_by_name("level1/task0/native").is_some());
        assert_eq!(model.layout().total, 5);
    }

    #[test]
    fn single_expert_units_have_no_native_parameter() {
        let c = cfg(2, 1, vec![1, 1], 0, 4, vec![3]);
        let mut params = ParamSet::new();
        build_adatt(&c, &mut params, 0).unwrap();
        assert!(params.id_by_name("level1/task0/native").is_none());
    }

    #[test]
    fn identical_seed_identical_params() {
        let c = cfg(2, 2, vec![2, 1], 1, 5, vec![4, 3]);
        let mut p1 = ParamSet::new();
        let mut p2 = ParamSet::new();
        build_adatt(&c, &mut p1, 9).unwrap();
        build_adatt(&c, &mut p2, 9).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn degenerate_single_task_doubles_single_expert() {
        // One task, one level, one expert: gate softmax over one expert is 1,
        // native unit weight adds the expert again, so the fused value is 2E.
        let c = cfg(1, 1, vec![1], 0, 2, vec![2]);
        let mut params = ParamSet::new();
        let model = build_adatt(&c, &mut params, 0).unwrap();
        // expert = identity, towers read out the first coordinate
        params
            .value_mut(model.levels[0][0].experts[0].net.w)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params
            .value_mut(model.levels[0][0].experts[0].net.b)
            .data_mut()
            .fill(0.0);
        params
            .value_mut(model.towers[0].hidden.w)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        params.value_mut(model.towers[0].hidden.b).data_mut().fill(0.0);
        params
            .value_mut(model.towers[0].head.w)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0]);
        params.value_mut(model.towers[0].head.b).data_mut().fill(0.0);

        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap());
        let preds = model.forward(&mut g, x).unwrap();
        // relu(x) = [1.5, 0]; fused = [3.0, 0]; tower keeps 3.0
        let got = g.tape.value(preds[0]).data()[0];
        assert!((got - 3.0).abs() < 1e-6, "{got}");
    }

    #[test]
    fn saturated_gate_selects_one_expert_plus_native() {
        let c = cfg(2, 1, vec![1, 1], 0, 2, vec![2]);
        let mut params = ParamSet::new();
        let model = build_adatt(&c, &mut params, 1).unwrap();
        // task 0's gate: huge logit on expert 1 (task 1's expert)
        let gate_w = model.levels[0][0].gate.as_ref().unwrap().w;
        params
            .value_mut(gate_w)
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, 100.0, 100.0]);

        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let per_unit: Vec<Vec<Var>> = model.levels[0]
            .iter()
            .enumerate()
            .map(|(u, unit)| {
                unit.experts
                    .iter()
                    .map(|e| e.forward(&mut g, [x, x][u]).unwrap())
                    .collect()
            })
            .collect();
        let flat: Vec<Var> = per_unit.iter().flatten().copied().collect();
        let stacked = g.tape.stack(&flat).unwrap();
        let e0 = g.tape.value(per_unit[0][0]).data().to_vec();
        let e1 = g.tape.value(per_unit[1][0]).data().to_vec();
        let acts = LevelActivations { stacked, per_unit };
        let fused = model.levels[0][0]
            .forward(&mut g, x, &acts, FusionPath::TwoTerm)
            .unwrap();
        let out = g.tape.value(fused.output).data();
        for j in 0..2 {
            // gate one-hot on expert 1, native adds expert 0 with unit weight
            assert!((out[j] - (e1[j] + e0[j])).abs() < 1e-5);
        }
    }

    #[test]
    fn level_one_gates_match_when_weights_are_shared() {
        // At level 1 every task conditions its gate on the same raw input, so
        // equal gate matrices must give equal gate vectors.
        let c = cfg(2, 1, vec![2, 1], 0, 3, vec![2]);
        let mut params = ParamSet::new();
        let model = build_adatt(&c, &mut params, 5).unwrap();
        let w0 = model.levels[0][0].gate.as_ref().unwrap().w;
        let w1 = model.levels[0][1].gate.as_ref().unwrap().w;
        let w0v = params.value(w0).clone();
        *params.value_mut(w1) = w0v;

        let mut g = Graph::new(&params);
        let x = g.input(Tensor::from_rows(&[vec![0.4, -1.2, 0.8], vec![2.0, 0.0, 1.0]]).unwrap());
        let (_, traces) = model.forward_traced(&mut g, x).unwrap();
        let g0 = g.tape.value(traces[0].gate_weights[0]).data();
        let g1 = g.tape.value(traces[0].gate_weights[1]).data();
        assert_eq!(g0, g1);
    }

    #[test]
    fn ablation_changes_outputs() {
        let base = cfg(2, 2, vec![2, 2], 0, 4, vec![3, 3]);
        let mut ablated = base.clone();
        ablated.ablate_native_fusion = true;
        let mut p1 = ParamSet::new();
        let m1 = build_adatt(&base, &mut p1, 3).unwrap();
        let mut p2 = ParamSet::new();
        let m2 = build_adatt(&ablated, &mut p2, 3).unwrap();
        // copy shared parameter values so only the native term differs
        for p in p2.iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
            let v = p1.value(p1.id_by_name(&p).unwrap()).clone();
            p2.set_by_name(&p, v).unwrap();
        }
        let x = Tensor::from_rows(&[vec![0.3, -0.9, 1.1, 0.2]]).unwrap();
        let mut g1 = Graph::new(&p1);
        let xv1 = g1.input(x.clone());
        let y1 = m1.forward(&mut g1, xv1).unwrap();
        let mut g2 = Graph::new(&p2);
        let xv2 = g2.input(x);
        let y2 = m2.forward(&mut g2, xv2).unwrap();
        let d = (g1.tape.value(y1[0]).data()[0] - g2.tape.value(y2[0]).data()[0]).abs();
        assert!(d > 1e-6, "ablation should change predictions, diff {d}");
    }

    #[test]
    fn rejects_wrong_input_width() {
        let c = cfg(1, 1, vec![1], 0, 4, vec![2]);
        let mut params = ParamSet::new();
        let model = build_adatt(&c, &mut params, 0).unwrap();
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::zeros(vec![2, 3]));
        assert!(model.forward(&mut g, x).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(2, 2, vec![2], 0, 4, vec![3, 3]);
        assert!(c.validate().is_err()); // experts list too short
        c.experts_per_task = vec![2, 2];
        c.expert_dims = vec![3];
        assert!(c.validate().is_err()); // dims/levels mismatch
    }
}
