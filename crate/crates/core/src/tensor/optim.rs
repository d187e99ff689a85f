use std::collections::BTreeMap;

use super::{GradStore, ParamStore, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam moments per parameter plus the shared update counter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update over every parameter that has a gradient.
///
/// All gradients are checked for finiteness before anything is modified, so a
/// failed step leaves both `params` and `state` untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TensorError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(super::invalid(
            "adam_step",
            format!("learning rate must be positive, got {lr}"),
        ));
    }
    for (name, g) in grads.iter() {
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if p.len() != g.len() {
            return Err(TensorError::ShapeMismatch {
                primitive: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads.iter() {
        let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        });
        let p = params.get_mut(name).expect("checked above");
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i];
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
            let mhat = mom.m[i] / c1;
            let vhat = mom.v[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Inverse-square-root schedule with linear warmup:
/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_rate(step: u64, d_model: usize, warmup: u64) -> Result<f64, TensorError> {
    if step == 0 {
        return Err(TensorError::ZeroStep);
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![p]));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = single(0.0);
        let mut grads = GradStore::new();
        grads.insert("p", vec![1.0]);
        let mut st = OptimizerState::new(AdamConfig::default());
        adam_step(&mut params, &grads, &mut st, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 => p = -0.1 / (1 + 1e-9)
        let p = params.get("p").unwrap().item();
        assert!((p + 0.1).abs() < 1e-9, "{p}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single(0.25);
        let mut grads = GradStore::new();
        grads.insert("p", vec![0.0]);
        let mut st = OptimizerState::new(AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut st, 0.5).unwrap();
        }
        assert_eq!(params.get("p").unwrap().item(), 0.25);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn non_finite_gradient_is_named_and_nothing_changes() {
        let mut params = single(1.0);
        let mut grads = GradStore::new();
        grads.insert("p", vec![f64::NAN]);
        let mut st = OptimizerState::new(AdamConfig::default());
        let err = adam_step(&mut params, &grads, &mut st, 0.1).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("p".into()));
        assert_eq!(st.step, 0);
        assert_eq!(params.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn noam_values() {
        let r = noam_rate(4000, 512, 4000).unwrap();
        assert!((r - 6.987712429686844e-4).abs() < 1e-12, "{r}");
        assert_eq!(noam_rate(1, 1, 1).unwrap(), 1.0);
        assert!(noam_rate(3999, 512, 4000).unwrap() < r);
        assert!(noam_rate(4001, 512, 4000).unwrap() < r);
        assert_eq!(noam_rate(0, 512, 4000), Err(TensorError::ZeroStep));
    }
}
