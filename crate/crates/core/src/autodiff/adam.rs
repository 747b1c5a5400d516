use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update. Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.tensors.len() != params.len() || self.first.len() != params.len() {
            return Err(contract(format!(
                "adam: {} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.tensors.len(),
                self.first.len()
            )));
        }
        for ((name, p), gr) in params.iter().zip(&grads.tensors) {
            if p.shape() != gr.shape() {
                return Err(contract(format!(
                    "adam: parameter {name} has shape {:?} but gradient {:?}",
                    p.shape(),
                    gr.shape()
                )));
            }
            if !gr.all_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {name}")));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - beta1.powi(t));
        let bc2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        let one = T::one();

        for (((_, p), gr), (m, v)) in params
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((x, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("x", Tensor::new(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let zeros = ParamGrads::zeros_like(&p);
        adam.step(&mut p, &zeros).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = store(&[0.5]);
        let cfg = AdamConfig::with_lr(0.01);
        let mut adam = AdamState::new(cfg, &p);
        let g = 0.3;
        let grads = ParamGrads {
            tensors: vec![Tensor::new(&[1], vec![g]).unwrap()],
        };
        adam.step(&mut p, &grads).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expected = 0.5 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() <= 1e-9);
    }

    #[test]
    fn nan_gradient_is_divergence_and_state_is_untouched() {
        let mut p = store(&[1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let grads = ParamGrads {
            tensors: vec![Tensor::new(&[1], vec![f64::NAN]).unwrap()],
        };
        let err = adam.step(&mut p, &grads).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(adam.step, 0);
        assert_eq!(p.get("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = store(&[1.0, -0.7, 0.4]);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2), &p);
        let mut norms = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let x = b.get("x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let f = g.sum_all(sq);
            let grads = g.backward(f).unwrap();
            let pg = b.collect_grads(&p, &grads);
            drop(g);
            adam.step(&mut p, &pg).unwrap();
            let n: f64 = p.get("x").unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
        }
        // Adam's effective step is ~lr per coordinate early on; after the first
        // few steps the norm shrinks every step until it reaches the lr scale.
        let warmup = 5;
        for w in norms[warmup..].windows(2) {
            if w[0] > 0.05 {
                assert!(w[1] < w[0], "norm went from {} to {}", w[0], w[1]);
            }
        }
        assert!(norms.last().unwrap() < &0.1, "{:?}", norms.last());
    }
}
