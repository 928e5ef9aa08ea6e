//! Adam optimizer over a [`ParamSet`].

use crate::nn::{Gradients, ParamSet};

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. Parameters without gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let id = crate::nn::ParamId(i);
            let Some(grad) = grads.get(id) else { continue };
            if self.m.len() <= i {
                self.m.resize_with(i + 1, Vec::new);
                self.v.resize_with(i + 1, Vec::new);
            }
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; grad.len()];
                self.v[i] = vec![0.0; grad.len()];
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = params.value_mut(id).data_mut();
            for j in 0..grad.len() {
                let gj = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use crate::tensor::Tensor;

    /// Minimizing (w - 3)^2 should walk w toward 3.
    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::row(vec![0.0]));
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let mut g = Graph::new(&params);
            let wv = g.param(w);
            let target = g.input(Tensor::row(vec![3.0]));
            let loss = g.tape.mse_loss(wv, target).unwrap();
            g.backward(loss).unwrap();
            let grads = g.gradients();
            adam.step(&mut params, &grads);
        }
        let got = params.value(w).data()[0];
        assert!((got - 3.0).abs() < 0.05, "{got}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::row(vec![1.5, -0.5]));
        let before = params.value(w).data().to_vec();
        let mut adam = Adam::new(0.0);
        for _ in 0..5 {
            let mut g = Graph::new(&params);
            let wv = g.param(w);
            let target = g.input(Tensor::row(vec![0.0, 0.0]));
            let loss = g.tape.mse_loss(wv, target).unwrap();
            g.backward(loss).unwrap();
            let grads = g.gradients();
            adam.step(&mut params, &grads);
        }
        assert_eq!(params.value(w).data(), before.as_slice());
    }
}
