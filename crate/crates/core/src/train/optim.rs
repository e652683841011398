use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every unfrozen parameter. Each of them
/// must have a gradient in `grads`; frozen parameters are left untouched.
pub fn adam_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for p in params.iter().filter(|p| !p.frozen) {
        match grads.get(&p.name) {
            None => return Err(Error::Invariant(format!("no gradient for trainable parameter `{}`", p.name))),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
            }
            _ => {}
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let corr1 = T::of(1.0 - c.beta1.powi(t));
    let corr2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let g = &grads[&p.name];
        let mom = state.moments.entry(p.name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape().to_vec()),
            v: Tensor::zeros(p.value.shape().to_vec()),
        });
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("decoder.w", Tensor::scalar(v)).unwrap();
        s.insert("encoder.w", Tensor::scalar(v)).unwrap();
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        [("decoder.w".to_string(), Tensor::scalar(g)), ("encoder.w".to_string(), Tensor::scalar(g))].into()
    }

    #[test]
    fn first_step_bias_correction() {
        let mut s = store(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grads(1.0), &mut st).unwrap();
        let delta = s.value("decoder.w").unwrap().item() - 1.0;
        // m̂ = 1, v̂ = 1 after correction at t = 1.
        assert!((delta + 3e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store(0.7);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut s, &grads(0.0), &mut st).unwrap();
        }
        assert_eq!(s.value("decoder.w").unwrap().item(), 0.7);
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut s = store(0.5);
        s.get_mut("encoder.w").unwrap().frozen = true;
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &grads(2.0), &mut st).unwrap();
        assert_eq!(s.value("encoder.w").unwrap().item(), 0.5);
        assert_ne!(s.value("decoder.w").unwrap().item(), 0.5);
        assert!(!st.moments.contains_key("encoder.w"));
        let only_enc: BTreeMap<_, _> = [("encoder.w".to_string(), Tensor::scalar(1.0))].into();
        assert!(adam_step(&mut s, &only_enc, &mut st).is_err());
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut s = store(0.3);
            let mut st = AdamState::new(AdamConfig::default());
            for i in 0..20 {
                let w = s.value("decoder.w").unwrap().item();
                adam_step(&mut s, &grads(2.0 * w - f64::from(i) * 0.01), &mut st).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
