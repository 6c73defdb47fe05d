use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 norm the gradient is clipped to; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adam with bias correction and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, idx: usize) -> Option<&Tensor2> {
        self.first.get(idx)
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// zeroes them. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if !store.has_any_grad() {
            return Err(Error::Misuse(
                "adam step without gradients from a backward pass".into(),
            ));
        }
        if self.first.is_empty() {
            for id in store.ids() {
                let (r, c) = store.value(id).shape();
                self.first.push(Tensor2::zeros(r, c));
                self.second.push(Tensor2::zeros(r, c));
            }
        } else if self.first.len() != store.len() {
            return Err(Error::Misuse(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }

        let norm = store
            .ids()
            .filter_map(|id| store.grad(id))
            .map(Tensor2::sum_squares)
            .sum::<f64>()
            .sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let (value, grad, has) = store.value_and_grad_mut(id);
            if !has {
                continue;
            }
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (((p, &g0), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g0 * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        store.zero_grads();
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let n = values.len();
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor2::from_vec(1, n, values).unwrap());
        s.accumulate_grad(id, &Tensor2::from_vec(1, n, grads).unwrap());
        s
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = store_with_grad(vec![0.3, -1.2], vec![0.0, 0.0]);
        let before = s.clone();
        Adam::new(AdamConfig::default()).step(&mut s).unwrap();
        assert!(s.values_identical(&before));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with_grad(vec![2.0], vec![1.0]);
        let cfg = AdamConfig {
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        Adam::new(cfg).step(&mut s).unwrap();
        let id = s.find("p").unwrap();
        let moved = 2.0 - s.value(id).get(0, 0);
        // m̂/(√v̂+ε) = 1/(1+1e-8)
        assert!((moved - cfg.learning_rate / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn gradient_clipped_to_norm_one() {
        // Norm-5 gradient scaled by 0.2: the first moment after one step is
        // (1-β1)·0.2·g.
        let mut s = store_with_grad(vec![0.0, 0.0], vec![3.0, 4.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let norm = adam.step(&mut s).unwrap();
        assert_eq!(norm, 5.0);
        let m = adam.first_moment(0).unwrap();
        assert!((m.get(0, 0) - 0.1 * 0.6).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn step_without_gradients_is_misuse() {
        let mut s = ParamStore::new();
        s.add("p", Tensor2::zeros(1, 1));
        assert!(matches!(
            Adam::new(AdamConfig::default()).step(&mut s),
            Err(Error::Misuse(_))
        ));
    }

    #[test]
    fn updates_are_bitwise_deterministic() {
        let mk = || store_with_grad(vec![0.1, 0.2, -0.7], vec![0.01, -3.0, 0.5]);
        let (mut a, mut b) = (mk(), mk());
        Adam::new(AdamConfig::default()).step(&mut a).unwrap();
        Adam::new(AdamConfig::default()).step(&mut b).unwrap();
        assert!(a.values_identical(&b));
    }

    #[test]
    fn gradients_are_zeroed_after_step() {
        let mut s = store_with_grad(vec![1.0], vec![0.5]);
        Adam::new(AdamConfig::default()).step(&mut s).unwrap();
        assert!(!s.has_any_grad());
    }
}
