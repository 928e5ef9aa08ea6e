//! Synthetic two-task generator for property tests and trend studies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::Tensor;

/// Two binary tasks over standard-normal features whose Bayes-optimal
/// predictors are linear scores with correlation `rho`: task weights `w1` and
/// `w2 = rho·w1 + sqrt(1-rho²)·w⊥`, labels are the score signs. `rho = 1`
/// makes the labels identical, `rho = -1` complementary.
pub fn synth_multitask(seed: u64, examples: usize, dim: usize, rho: f64) -> Result<EncodedDataset> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("correlation {rho} outside [-1, 1]")));
    }
    if dim < 2 || examples == 0 {
        return Err(Error::Config(
            "synthetic data needs dim >= 2 and at least one example".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    let mut w1: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    normalize(&mut w1);
    let mut w_perp: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let dot: f64 = w_perp.iter().zip(&w1).map(|(a, b)| a * b).sum();
    for (p, &w) in w_perp.iter_mut().zip(&w1) {
        *p -= dot * w;
    }
    normalize(&mut w_perp);
    let w2: Vec<f64> = w1
        .iter()
        .zip(&w_perp)
        .map(|(&a, &b)| rho * a + (1.0 - rho * rho).sqrt() * b)
        .collect();

    let mut features = Vec::with_capacity(examples * dim);
    let mut y1 = Vec::with_capacity(examples);
    let mut y2 = Vec::with_capacity(examples);
    for _ in 0..examples {
        let x: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let s1: f64 = x.iter().zip(&w1).map(|(a, b)| a * b).sum();
        let s2: f64 = x.iter().zip(&w2).map(|(a, b)| a * b).sum();
        y1.push(if s1 > 0.0 { 1.0 } else { 0.0 });
        y2.push(if s2 > 0.0 { 1.0 } else { 0.0 });
        features.extend(x.iter().map(|&v| v as f32));
    }

    Ok(EncodedDataset {
        cont: Tensor::new(vec![examples, dim], features)?,
        cat: Vec::new(),
        labels: vec![Tensor::column(y1), Tensor::column(y2)],
        task_kinds: vec![TaskKind::Classification; 2],
    })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in v {
        *x /= norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_vec(ds: &EncodedDataset, t: usize) -> Vec<f32> {
        ds.labels[t].data().to_vec()
    }

    #[test]
    fn rho_one_gives_identical_labels() {
        let ds = synth_multitask(3, 500, 8, 1.0).unwrap();
        assert_eq!(label_vec(&ds, 0), label_vec(&ds, 1));
    }

    #[test]
    fn rho_minus_one_gives_complementary_labels() {
        let ds = synth_multitask(3, 500, 8, -1.0).unwrap();
        for (a, b) in label_vec(&ds, 0).iter().zip(label_vec(&ds, 1)) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn rho_zero_labels_are_nearly_uncorrelated() {
        let ds = synth_multitask(11, 10_000, 8, 0.0).unwrap();
        let a = label_vec(&ds, 0);
        let b = label_vec(&ds, 1);
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(&b) {
            cov += (x as f64 - ma) * (y as f64 - mb);
            va += (x as f64 - ma).powi(2);
            vb += (y as f64 - mb).powi(2);
        }
        let r = cov / (va.sqrt() * vb.sqrt());
        assert!(r.abs() < 0.05, "empirical correlation {r}");
    }

    #[test]
    fn rejects_out_of_range_rho() {
        assert!(synth_multitask(0, 10, 4, 1.5).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_multitask(5, 64, 4, 0.5).unwrap();
        let b = synth_multitask(5, 64, 4, 0.5).unwrap();
        assert_eq!(a.cont.data(), b.cont.data());
        assert_eq!(a.labels[0].data(), b.labels[0].data());
    }
}
