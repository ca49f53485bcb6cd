use log::warn;

use crate::{ParamSet, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: each step first shrinks a parameter by `1 - lr * weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, ..Self::default() }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
///
/// Parameters without a gradient buffer are left untouched by a step, including
/// the decay shrink.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: usize) -> &[T] {
        &self.m[id]
    }

    pub fn second_moment(&self, id: usize) -> &[T] {
        &self.v[id]
    }

    /// Applies one update from the parameters' accumulated gradients.
    /// Returns `false` (and changes nothing) when no parameter has a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> bool {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        if params.iter().all(|p| p.value.grad().is_none()) {
            warn!("adam step skipped: no parameter has a gradient");
            return false;
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let shrink = T::of(1.0 - c.lr * c.weight_decay);
        for (id, p) in params.iter_mut().enumerate() {
            let (data, grad) = p.value.data_and_grad();
            let Some(g) = grad else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (i, w) in data.iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w = *w * shrink - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::full(&[1], value));
        ps
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut ps = single(0.7);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.0), &ps);
        for _ in 0..5 {
            ps.get_mut(0).value.accumulate_grad(&[0.0]);
            assert!(adam.step(&mut ps));
            ps.zero_grad();
        }
        assert_eq!(ps.tensor(0).data(), &[0.7]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = single(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.0), &ps);
        ps.get_mut(0).value.accumulate_grad(&[1.0]);
        adam.step(&mut ps);
        let delta = ps.tensor(0).data()[0] - 1.0;
        // m_hat = g and v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
        assert!((delta + 0.1 / (1.0 + 1e-8)).abs() < 1e-12, "{delta}");
    }

    #[test]
    fn decreases_quadratic() {
        let mut ps = single(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.05, 0.0), &ps);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let p = ps.tensor(0).data()[0];
            ps.get_mut(0).value.accumulate_grad(&[2.0 * p]);
            adam.step(&mut ps);
            ps.zero_grad();
            let f = ps.tensor(0).data()[0].powi(2);
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn no_grads_is_noop() {
        let mut ps = single(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &ps);
        assert!(!adam.step(&mut ps));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut ps = single(2.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1, 0.5), &ps);
        ps.get_mut(0).value.accumulate_grad(&[0.0]);
        adam.step(&mut ps);
        assert!((ps.tensor(0).data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }
}
