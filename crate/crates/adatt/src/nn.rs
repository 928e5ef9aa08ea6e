//! Named parameters plus the small layers every architecture is built from.
//!
//! A model allocates its parameters in a shared [`ParamSet`] at build time;
//! each training step binds the whole set onto a fresh [`Graph`], runs the
//! forward pass, backpropagates, and hands the extracted gradients to the
//! optimizer. Parameter names follow the checkpoint naming scheme
//! (`level{l}/task{t}/expert{i}/weight`, `tower{t}/head/bias`, ...).

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, name-indexed set of learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites a parameter's values by name; shapes must match.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id_by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} in file, {:?} in model",
                value.shape(),
                self.value(id).shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }
}

/// Per-parameter gradients in [`ParamSet`] order.
pub struct Gradients {
    by_param: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// A tape with every parameter bound as a differentiable leaf.
pub struct Graph {
    pub tape: Tape,
    param_vars: Vec<Var>,
}

impl Graph {
    pub fn new(params: &ParamSet) -> Self {
        let mut tape = Tape::new();
        let param_vars = params
            .iter()
            .map(|p| tape.leaf_grad(p.value.clone()))
            .collect();
        Graph { tape, param_vars }
    }

    /// Binds parameters as constants: forward-only graphs skip gradient
    /// bookkeeping entirely.
    pub fn new_inference(params: &ParamSet) -> Self {
        let mut tape = Tape::new();
        let param_vars = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Graph { tape, param_vars }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Extracts parameter gradients after `backward`.
    pub fn gradients(&self) -> Gradients {
        Gradients {
            by_param: self
                .param_vars
                .iter()
                .map(|&v| self.tape.grad(v).map(|g| g.to_vec()))
                .collect(),
        }
    }
}

// ── initialization ───────────────────────────────────────────────────

/// Uniform fan-in initialization: `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

// ── layers ───────────────────────────────────────────────────────────

/// Fully connected `x·W + b`, weight stored `[in x out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w = params.add(
            format!("{prefix}/weight"),
            uniform_fan_in(rng, in_dim, vec![in_dim, out_dim]),
        );
        let b = params.add(format!("{prefix}/bias"), Tensor::zeros(vec![1, out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let wv = g.param(self.w);
        let bv = g.param(self.b);
        let h = g.tape.matmul(x, wv)?;
        g.tape.add(h, bv)
    }
}

/// Gating module: `softmax(W · fᵀ)` with no bias, `W` stored
/// `[num_experts x in_dim]` so its row count equals the expert count.
#[derive(Debug, Clone)]
pub struct GateLayer {
    pub w: ParamId,
    pub num_experts: usize,
    pub in_dim: usize,
}

impl GateLayer {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        num_experts: usize,
        in_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> GateLayer {
        let w = params.add(name, uniform_fan_in(rng, in_dim, vec![num_experts, in_dim]));
        GateLayer {
            w,
            num_experts,
            in_dim,
        }
    }

    /// Softmax weights `[B x num_experts]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let wv = g.param(self.w);
        let logits = g.tape.matmul_nt(x, wv)?;
        g.tape.softmax_rows(logits)
    }
}

/// Task tower: one ReLU hidden layer then a width-1 linear head.
#[derive(Debug, Clone)]
pub struct Tower {
    pub hidden: Linear,
    pub head: Linear,
}

impl Tower {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Tower {
        let hidden = Linear::init(params, &format!("{prefix}/hidden"), in_dim, hidden_dim, rng);
        let head = Linear::init(params, &format!("{prefix}/head"), hidden_dim, 1, rng);
        Tower { hidden, head }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let r = g.tape.relu(h)?;
        self.head.forward(g, r)
    }
}

/// An expert: single Linear + ReLU producing a vector of the level's width.
#[derive(Debug, Clone)]
pub struct Expert {
    pub net: Linear,
}

impl Expert {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Expert {
        Expert {
            net: Linear::init(params, prefix, in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.net.forward(g, x)?;
        g.tape.relu(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn param_names_are_unique_and_indexed() {
        let mut ps = ParamSet::new();
        let id = ps.add("a/weight", Tensor::zeros(vec![2, 2]));
        assert_eq!(ps.id_by_name("a/weight"), Some(id));
        assert_eq!(ps.scalar_count(), 4);
    }

    #[test]
    fn linear_forward_matches_hand_math() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::init(&mut ps, "l", 2, 1, &mut rng);
        ps.value_mut(lin.w).data_mut().copy_from_slice(&[2.0, 3.0]);
        ps.value_mut(lin.b).data_mut().copy_from_slice(&[0.5]);
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y).data(), &[5.5]);
    }

    #[test]
    fn same_seed_same_init() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = uniform_fan_in(&mut r1, 8, vec![8, 4]);
        let b = uniform_fan_in(&mut r2, 8, vec![8, 4]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gate = GateLayer::init(&mut ps, "g", 4, 3, &mut rng);
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.0, -0.3]]).unwrap());
        let w = gate.forward(&mut g, x).unwrap();
        let v = g.tape.value(w);
        for r in 0..2 {
            let sum: f32 = (0..4).map(|c| v.at2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for c in 0..4 {
                assert!(v.at2(r, c) > 0.0);
            }
        }
    }
}
