//! Adam with bias correction and polynomial learning-rate decay.

use indexmap::IndexMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state that persists across [`Adam::step`] calls.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            steps: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter with learning rate `lr`
    /// (overrides `config.lr`, so schedules can drive it).
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad.is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, t) in params.iter_mut() {
            let n = t.numel();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad = t.grad.take().expect("checked above");
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

/// Convenience wrapper matching the functional form `adam_step(params, lr, b1, b2, eps)`.
pub fn adam_step(opt: &mut Adam, params: &mut ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    opt.config = AdamConfig { lr, beta1, beta2, eps };
    opt.step(params, lr)
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base_lr;
    }
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    base_lr * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{Shape, Tensor};

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_tensor("p", Tensor::scalar(p)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.get_mut("p").unwrap().grad = Some(vec![g]);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(1.5);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            set_grad(&mut s, 0.0);
            opt.step(&mut s, DEFAULT_LR).unwrap();
        }
        assert_eq!(s.get("p").unwrap().data()[0], 1.5);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        for g in [2.0, -0.3] {
            let mut s = scalar_store(0.0);
            let mut opt = Adam::new(AdamConfig::default());
            for _ in 0..50 {
                set_grad(&mut s, g);
                opt.step(&mut s, 1e-2).unwrap();
            }
            let p = s.get("p").unwrap().data()[0];
            assert!(p * g < 0.0, "g={g} p={p}");
        }
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // m1 = 0.1, v1 = 0.001, m_hat = 1, v_hat = 1, step = lr / (1 + eps)
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        set_grad(&mut s, 1.0);
        opt.step(&mut s, DEFAULT_LR).unwrap();
        let m = (1.0 - 0.9) * 1.0;
        let v = (1.0 - 0.999) * 1.0;
        let expect = 1.0 - 2e-4 * (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999f64)).sqrt() + 1e-8);
        let got = s.get("p").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!((got - (1.0 - 2e-4 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn second_step_uses_persisted_state() {
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        set_grad(&mut s, 1.0);
        opt.step(&mut s, 0.1).unwrap();
        set_grad(&mut s, -1.0);
        opt.step(&mut s, 0.1).unwrap();
        // m2 = 0.9*0.1 - 0.1 = -0.01, v2 = 0.999*0.001 + 0.001
        let m2: f64 = 0.9 * 0.1 - 0.1;
        let v2: f64 = 0.999 * 0.001 + 0.001;
        let step2 = 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let want = -0.1 / (1.0 + 1e-8) - step2;
        let got = s.get("p").unwrap().data()[0];
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.insert("conv.weight", Shape::new(1, 1, 3, 3)).unwrap();
        let err = Adam::default().step(&mut s, 1e-3).unwrap_err();
        assert!(err.to_string().contains("conv.weight"));
    }

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(2e-4, 0, 100, 0.9), 2e-4);
        assert_eq!(poly_lr(2e-4, 100, 100, 0.9), 0.0);
        let mid = poly_lr(2e-4, 50, 100, 0.9);
        assert!((mid - 2e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }
}
