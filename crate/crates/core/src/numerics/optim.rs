//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::params::{GradStore, ParamSet};
use super::NumericsError;

/// Optimizer hyperparameters. `lr` is the effective rate for the next step;
/// callers running a schedule overwrite it before each `adamw_step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Raw access for serialization.
    pub fn buffers(&self) -> (&BTreeMap<String, Vec<f32>>, &BTreeMap<String, Vec<f32>>) {
        (&self.m, &self.v)
    }

    pub fn restore_buffers(
        &mut self,
        step: u64,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    ) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// One decoupled-weight-decay Adam update over every parameter with a
/// gradient present. Parameters without gradients (frozen, or simply not
/// touched this step) are left bit-identical.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &GradStore,
    state: &mut OptimizerState,
) -> Result<(), NumericsError> {
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bias1 = 1.0 - libm::powf(h.beta1, t as f32);
    let bias2 = 1.0 - libm::powf(h.beta2, t as f32);

    for (name, grad) in grads.iter() {
        let param = params
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if param.len() != grad.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adamw_step",
                left: param.shape().to_vec(),
                right: vec![grad.len()],
            });
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let data = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= h.lr * (m_hat / (libm::sqrtf(v_hat) + h.eps) + h.weight_decay * data[i]);
        }
    }
    Ok(())
}

/// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f32) -> Result<f32, NumericsError> {
    if step > total_steps {
        return Err(NumericsError::RangeError {
            what: "cosine_lr step",
            value: step,
            bound: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    Ok((base_lr as f64 * (1.0 + libm::cos(phase)) / 2.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn zero_grad_shrinks_by_decay_exactly() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![2.0, -4.0]));
        let mut grads = GradStore::new();
        grads.accumulate("w", &[0.0, 0.0]);
        let hyper = AdamHyper {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamHyper::default()
        };
        let mut state = OptimizerState::new(hyper);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        let w = params.get("w").unwrap().data();
        assert_eq!(w[0], 2.0 - 0.1 * 0.01 * 2.0);
        assert_eq!(w[1], -4.0 - 0.1 * 0.01 * -4.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![1.5, -0.5]));
        let mut grads = GradStore::new();
        grads.accumulate("w", &[0.3, -0.7]);
        let hyper = AdamHyper {
            lr: 0.0,
            ..AdamHyper::default()
        };
        let mut state = OptimizerState::new(hyper);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.5, -0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn two_steps_match_hand_rolled_reference() {
        // Independent f64 evaluation of the same update rule.
        let (b1, b2, wd, lr, eps) = (0.9f64, 0.99f64, 1e-4f64, 1e-2f64, 1e-8f64);
        let mut w_ref = 0.5f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for t in 1..=2 {
            let g = 1.0f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            w_ref -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * w_ref);
        }

        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![1], vec![0.5]));
        let hyper = AdamHyper {
            lr: lr as f32,
            beta1: b1 as f32,
            beta2: b2 as f32,
            eps: eps as f32,
            weight_decay: wd as f32,
        };
        let mut state = OptimizerState::new(hyper);
        for _ in 0..2 {
            let mut grads = GradStore::new();
            grads.accumulate("w", &[1.0]);
            adamw_step(&mut params, &grads, &mut state).unwrap();
        }
        let got = params.get("w").unwrap().data()[0] as f64;
        assert!((got - w_ref).abs() < 1e-6, "got {got}, want {w_ref}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2], vec![0.0; 2]));
        let mut grads = GradStore::new();
        grads.accumulate("w", &[1.0, 2.0, 3.0]);
        let mut state = OptimizerState::new(AdamHyper::default());
        assert!(adamw_step(&mut params, &grads, &mut state).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let base = 1e-4f32;
        assert_eq!(cosine_lr(0, 100, base).unwrap(), base);
        let end = cosine_lr(100, 100, base).unwrap();
        assert!(end.abs() < 1e-12);
        let mid = cosine_lr(50, 100, base).unwrap();
        assert!((mid - base / 2.0).abs() < 1e-10);
        assert!(cosine_lr(101, 100, base).is_err());
    }
}
