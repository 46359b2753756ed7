//! AdamW: adaptive moments with decoupled weight decay and bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

/// Optimizer state: first/second moment buffers per parameter tensor plus the
/// bias-correction step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    /// Steps skipped because a gradient was NaN or infinite.
    incidents: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW { cfg, m, v, step: 0, incidents: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn incidents(&self) -> u64 {
        self.incidents
    }

    /// Applies one update in place. Non-finite gradients skip the whole step
    /// (moments, counter and parameters untouched) and count as an incident.
    /// Returns whether the step was applied.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> bool {
        #[allow(unused_imports)]
        use crate::math::F64Ext as _;
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            self.incidents += 1;
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.len(), g.len());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                if self.cfg.weight_decay != 0.0 {
                    *pv *= 1.0 - self.cfg.lr * self.cfg.weight_decay;
                }
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pv -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
            debug_assert!(p.all_finite(), "parameters must stay finite after a step");
        }
        true
    }

    /// Moment buffers, for checkpointing. Order matches the parameter order.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores moment buffers and the step counter from a checkpoint.
    pub fn restore(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64, incidents: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
        self.incidents = incidents;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut params = one_param(1.25);
        let mut opt = AdamW::new(cfg, &params);
        assert!(opt.step(&mut params, &[vec![0.0]]));
        assert_eq!(params[0].data()[0], 1.25);
    }

    #[test]
    fn moves_against_gradient_sign() {
        let cfg = AdamWConfig { weight_decay: 0.0, lr: 0.01, ..AdamWConfig::default() };
        let mut params = one_param(0.0);
        let mut opt = AdamW::new(cfg, &params);
        for _ in 0..50 {
            opt.step(&mut params, &[vec![2.0]]);
        }
        assert!(params[0].data()[0] < 0.0);

        let mut params = one_param(0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, lr: 0.01, ..AdamWConfig::default() }, &params);
        for _ in 0..50 {
            opt.step(&mut params, &[vec![-2.0]]);
        }
        assert!(params[0].data()[0] > 0.0);
    }

    #[test]
    fn single_step_hand_calculation() {
        // From zeroed moments: m = (1-b1) g, v = (1-b2) g^2, bias-corrected
        // m_hat = g and v_hat = g^2, so the update is -lr * g / (|g| + eps).
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        let g = 0.3;
        let mut params = one_param(1.0);
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[vec![g]]);
        let expect = 1.0 - 0.1 * g / (g.abs() + 1e-8);
        assert!((params[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_before_update() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..AdamWConfig::default() };
        let mut params = one_param(2.0);
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[vec![0.0]]);
        // Zero gradient: only the decay factor applies.
        assert!((params[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_skips_and_counts() {
        let mut params = one_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        assert!(!opt.step(&mut params, &[vec![f64::NAN]]));
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(opt.incidents(), 1);
        assert_eq!(opt.step_count(), 0);
        assert!(opt.step(&mut params, &[vec![0.1]]));
        assert_eq!(opt.step_count(), 1);
    }
}
