//! Adam with per-parameter moment estimates.
//!
//! ```text
//! m_t = β1·m_{t−1} + (1 − β1)·g_t
//! v_t = β2·v_{t−1} + (1 − β2)·g_t²
//! w_t = w_{t−1} − α·m̂_t / (√v̂_t + ε),   m̂ = m/(1 − β1^t), v̂ = v/(1 − β2^t)
//! ```
//!
//! With `bias_correction` off, `m̂ = m` and `v̂ = v`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradientSet;
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default = "yes")]
    pub bias_correction: bool,
}

fn yes() -> bool {
    true
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-7,
            bias_correction: true,
        }
    }
}

impl AdamConfig {
    pub fn with_alpha(self, alpha: f64) -> Self {
        AdamConfig { alpha, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid Adam config {self:?}")))
        }
    }
}

/// First/second moment accumulators keyed by parameter name, plus the step
/// counter. Moments are created (zero) the first time a parameter is seen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

/// Applies one Adam update to `params` in place. All checks run before any
/// value changes, so a failed call leaves both params and state untouched.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: Vec<(&str, &mut Tensor<T>)>,
    grads: &GradientSet<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    let names: BTreeSet<&str> = params.iter().map(|(n, _)| *n).collect();
    if names.len() != params.len() {
        return Err(Error::Validation("duplicate parameter names passed to adam_step".into()));
    }
    for name in grads.keys() {
        if !names.contains(name.as_str()) {
            return Err(Error::Parameter {
                name: name.clone(),
                message: "gradient for an unknown parameter".into(),
            });
        }
    }
    for (name, p) in &params {
        let g = grads.get(*name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            message: "missing gradient".into(),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                message: format!("gradient {} vs parameter {}", shape_str(g.shape()), shape_str(p.shape())),
            });
        }
        if let Some(m) = state.m.get(*name) {
            if m.shape() != p.shape() {
                return Err(Error::Parameter {
                    name: name.to_string(),
                    message: "optimizer state shape differs from parameter".into(),
                });
            }
        }
    }

    state.t += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let alpha = T::lit(cfg.alpha);
    let eps = T::lit(cfg.epsilon);
    let (c1, c2) = if cfg.bias_correction {
        let t = state.t as i32;
        (one - b1.powi(t), one - b2.powi(t))
    } else {
        (one, one)
    };
    for (name, p) in params {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= alpha * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> (String, Tensor<f64>) {
        (name.to_string(), Tensor::new(vec![1], vec![v]).unwrap())
    }

    #[test]
    fn scalar_first_step() {
        let cfg = AdamConfig::default();
        let (name, mut w) = single("w", 1.0);
        let mut st = AdamState::new();
        let grads: GradientSet<f64> = [single("w", 0.5)].into_iter().collect();
        adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
        assert_eq!(st.t, 1);
        assert!((st.m["w"].data()[0] - 0.05).abs() < 1e-15);
        assert!((st.v["w"].data()[0] - 0.0025).abs() < 1e-15);
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-7);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert!((w.data()[0] - 0.999000).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_inert() {
        let cfg = AdamConfig::default();
        let (name, mut w) = single("w", 3.0);
        let mut st = AdamState::new();
        let grads: GradientSet<f64> = [single("w", 0.0)].into_iter().collect();
        for _ in 0..50 {
            adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
        }
        assert_eq!(w.data()[0], 3.0);
        assert_eq!(st.m["w"].data()[0], 0.0);
        assert_eq!(st.v["w"].data()[0], 0.0);
    }

    #[test]
    fn zero_betas_give_sign_like_update() {
        let cfg = AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            ..AdamConfig::default()
        };
        for g in [0.3, -2.0, 1e-3] {
            let (name, mut w) = single("w", 0.0);
            let mut st = AdamState::new();
            let grads: GradientSet<f64> = [single("w", g)].into_iter().collect();
            adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
            let want = -1e-3 * g / (g.abs() + 1e-7);
            assert!((w.data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatch_errors_name_the_parameter() {
        let cfg = AdamConfig::default();
        let (name, mut w) = single("w", 0.0);
        let mut st = AdamState::<f64>::new();
        let grads: GradientSet<f64> = [single("u", 1.0)].into_iter().collect();
        let err = adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap_err();
        assert!(err.to_string().contains('u'));
        assert_eq!(st.t, 0);
        let grads: GradientSet<f64> = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        let err = adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap_err();
        assert!(matches!(err, Error::Parameter { ref name, .. } if name == "w"));
    }

    #[test]
    fn literal_reading_without_correction() {
        let cfg = AdamConfig {
            bias_correction: false,
            ..AdamConfig::default()
        };
        let (name, mut w) = single("w", 1.0);
        let mut st = AdamState::new();
        let grads: GradientSet<f64> = [single("w", 0.5)].into_iter().collect();
        adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
        let want = 1.0 - 1e-3 * 0.05 / (0.05 + 1e-7);
        assert!((w.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn second_moment_non_negative(gs in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
                let cfg = AdamConfig::default();
                let (name, mut w) = single("w", 0.0);
                let mut st = AdamState::new();
                for g in gs {
                    let grads: GradientSet<f64> = [single("w", g)].into_iter().collect();
                    adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
                    prop_assert!(st.v["w"].data()[0] >= 0.0);
                }
            }

            #[test]
            fn first_step_is_alpha_sign(g in prop_oneof![0.1f64..100.0, -100.0f64..-0.1]) {
                let cfg = AdamConfig::default();
                let (name, mut w) = single("w", 0.0);
                let mut st = AdamState::new();
                let grads: GradientSet<f64> = [single("w", g)].into_iter().collect();
                adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
                let step = -w.data()[0];
                prop_assert!((step - 1e-3 * g.signum()).abs() <= 1e-5 * 1e-3);
            }

            #[test]
            fn step_is_deterministic(g in -10.0f64..10.0, w0 in -10.0f64..10.0) {
                let cfg = AdamConfig::default();
                let run = || {
                    let (name, mut w) = single("w", w0);
                    let mut st = AdamState::new();
                    let grads: GradientSet<f64> = [single("w", g)].into_iter().collect();
                    adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
                    adam_step(&mut st, vec![(&name, &mut w)], &grads, &cfg).unwrap();
                    w.data()[0].to_bits()
                };
                prop_assert_eq!(run(), run());
            }
        }
    }
}
