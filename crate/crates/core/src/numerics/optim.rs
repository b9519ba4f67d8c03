use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to the i-th registered
    /// parameter; `None` leaves that parameter and its moments untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / correct1);
        let sqrt_c2 = T::of(correct2.sqrt());
        let eps = T::of(c.eps);
        for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(grad) = &grads[idx] else { continue };
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            let w = params.get_mut(id).data_mut();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = vi.sqrt() / sqrt_c2 + eps;
                *wi -= step_size * *mi / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut store, &[Some(Tensor::scalar(0.0))]);
        }
        assert_eq!(store.get(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 150.0] {
            let (mut store, id) = scalar_store(1.0);
            let mut adam = Adam::new(&store, AdamConfig::default());
            adam.step(&mut store, &[Some(Tensor::scalar(g))]);
            let delta = store.get(id).data()[0] - 1.0;
            assert!((delta.abs() - 1e-4).abs() < 1e-9, "g={g} delta={delta}");
            assert_eq!(delta.signum(), -f64::signum(g));
        }
    }

    #[test]
    fn two_steps_descend_on_square() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
        );
        let f = |w: f64| w * w;
        let start = f(store.get(id).data()[0]);
        for _ in 0..2 {
            let w = store.get(id).data()[0];
            adam.step(&mut store, &[Some(Tensor::scalar(2.0 * w))]);
        }
        assert!(f(store.get(id).data()[0]) < start);
    }
}
