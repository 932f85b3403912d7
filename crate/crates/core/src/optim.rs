//! AdamW with decoupled weight decay.

use aggpose_tensor::{Scalar, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments of one parameter plus its own step count, so a
/// parameter that spent a phase frozen starts its bias correction afresh.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// One AdamW step on a flat parameter slice.
///
/// Decay is applied to the parameter directly, `p ← p − lr·λ·p`, and never
/// enters the moment estimates.
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    lr: f64,
    hyper: &AdamWConfig,
) {
    assert_eq!(param.len(), grad.len(), "parameter and gradient lengths differ");
    assert_eq!(param.len(), state.m.numel(), "parameter and moment lengths differ");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = lr * hyper.weight_decay;
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..param.len() {
        let g = grad[i].to_f64();
        let mut p = param[i].to_f64();
        p -= decay * p;
        let mi = hyper.beta1 * m[i].to_f64() + (1.0 - hyper.beta1) * g;
        let vi = hyper.beta2 * v[i].to_f64() + (1.0 - hyper.beta2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps);
        param[i] = T::from_f64(p);
    }
}

/// Optimizer state for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: store.params().iter().map(|p| Moments::zeros(p.value.shape())).collect(),
        }
    }

    /// Update every non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let hyper = self.config;
        store
            .params_mut()
            .par_iter_mut()
            .zip(self.moments.par_iter_mut())
            .zip(grads.par_iter())
            .for_each(|((p, st), g)| {
                if let (false, Some(g)) = (p.frozen, g) {
                    adamw_update(p.value.data_mut(), g.data(), st, lr, &hyper);
                }
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize) -> Moments<f64> {
        Moments::zeros(&[n])
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let mut st = state(3);
        for _ in 0..5 {
            adamw_update(&mut p, &[0.0; 3], &mut st, 1e-3, &hyper);
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn decay_only_scales_parameter() {
        let hyper = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = vec![2.0, -0.5];
        let mut st = state(2);
        adamw_update(&mut p, &[0.0, 0.0], &mut st, 0.01, &hyper);
        assert!((p[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
        assert!((p[1] + 0.5 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (lr, g) = (1e-3, [0.5, -2.0, 1e-9]);
        let mut p = vec![1.0, 1.0, 1.0];
        let mut st = state(3);
        adamw_update(&mut p, &g, &mut st, lr, &hyper);
        for (i, &gi) in g.iter().enumerate() {
            // m̂ = g, v̂ = g² after bias correction
            let m_hat = (1.0 - 0.9) * gi / (1.0 - 0.9);
            let v_hat = (1.0 - 0.999) * gi * gi / (1.0 - 0.999);
            let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15, "{i}: {} vs {expected}", p[i]);
        }
        // large gradients move by about lr, tiny ones by much less
        assert!((p[0] - (1.0 - lr)).abs() < 1e-10);
        assert!((p[1] - (1.0 + lr)).abs() < 1e-10);
        assert!((p[2] - 1.0).abs() < lr * 0.1);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a".into(), Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let b = store.insert("b".into(), Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        store.get_mut(a).frozen = true;
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let g = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        opt.step(&mut store, &[Some(g.clone()), Some(g)], 0.1);
        assert_eq!(store.get(a).value.data(), &[1.0, 2.0]);
        assert_ne!(store.get(b).value.data(), &[1.0, 2.0]);
        assert_eq!(opt.moments[0].step, 0);
        assert_eq!(opt.moments[1].step, 1);
    }
}
