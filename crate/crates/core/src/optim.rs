//! Adam optimizer and the cosine learning-rate schedule.

use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

struct Slot<E: Element> {
    param: ParamId,
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Adam state over a fixed set of parameters: first/second moment buffers
/// (zero-initialized), a step counter, and the beta/epsilon constants.
pub struct AdamState<E: Element = f32> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: Vec<Slot<E>>,
}

impl<E: Element> AdamState<E> {
    /// Builds zeroed moment buffers for `params`, with the stock constants
    /// beta1 = 0.9, beta2 = 0.99, eps = 1e-8.
    pub fn new(store: &ParamStore<E>, params: &[ParamId]) -> Self {
        Self::with_constants(store, params, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }

    pub fn with_constants(
        store: &ParamStore<E>,
        params: &[ParamId],
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let slots = params
            .iter()
            .map(|&id| Slot {
                param: id,
                m: Tensor::zeros(store.value(id).shape()),
                v: Tensor::zeros(store.value(id).shape()),
            })
            .collect();
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over the managed parameters.
    ///
    /// `grads` is indexed by store parameter order (as produced by
    /// `ForwardPass::take_param_grads`); a `None` entry is a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Option<Tensor<E>>],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let b1 = E::from_f64_val(self.beta1);
        let b2 = E::from_f64_val(self.beta2);
        let ob1 = E::from_f64_val(1.0 - self.beta1);
        let ob2 = E::from_f64_val(1.0 - self.beta2);
        let inv_bc1 = E::from_f64_val(1.0 / bc1);
        let inv_bc2 = E::from_f64_val(1.0 / bc2);
        let lr_e = E::from_f64_val(lr);
        let eps = E::from_f64_val(self.eps);

        for slot in &mut self.slots {
            let grad = grads.get(slot.param.0).and_then(|g| g.as_ref());
            if let Some(g) = grad {
                if !g.all_finite() {
                    return Err(DrnError::Training(format!(
                        "non-finite gradient for parameter {}",
                        store.name(slot.param)
                    )));
                }
            }
            let param = store.value_mut(slot.param);
            for i in 0..param.numel() {
                let g = grad.map_or(E::zero(), |g| g.data()[i]);
                let m = b1 * slot.m.data()[i] + ob1 * g;
                let v = b2 * slot.v.data()[i] + ob2 * g * g;
                slot.m.data_mut()[i] = m;
                slot.v.data_mut()[i] = v;
                let m_hat = m * inv_bc1;
                let v_hat = v * inv_bc2;
                param.data_mut()[i] = param.data()[i] - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_start` at `t = 0` down to `lr_end` at
/// `t = total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: u64) -> Self {
        CosineSchedule {
            lr_start,
            lr_end,
            total_steps,
        }
    }

    /// `lr_end + 0.5 * (lr_start - lr_end) * (1 + cos(pi * t / total_steps))`
    pub fn lr(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(DrnError::InvalidArgument(format!(
                "schedule step {t} is past total_steps {}",
                self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Ok(self.lr_start);
        }
        let frac = t as f64 / self.total_steps as f64;
        Ok(self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_store(data: Vec<f32>) -> (ParamStore<f32>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register(
            "p",
            Tensor::new([1, 1, 1, data.len()], data).unwrap(),
        );
        (store, id)
    }

    #[test]
    fn zero_gradient_is_a_noop() {
        let (mut store, id) = one_param_store(vec![1.0, -2.0, 3.5]);
        let before = store.value(id).clone();
        let mut adam = AdamState::new(&store, &[id]);
        for _ in 0..5 {
            adam.step(&mut store, &[Some(Tensor::zeros([1, 1, 1, 3]))], 1e-2)
                .unwrap();
        }
        assert_eq!(store.value(id).data(), before.data());
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_approaches_signed_lr() {
        // With bias correction, step 1 gives -lr * g / (|g| + eps) ~ -lr * sign(g).
        let (mut store, id) = one_param_store(vec![0.0, 0.0]);
        let mut adam = AdamState::new(&store, &[id]);
        let g = Tensor::new([1, 1, 1, 2], vec![0.37, -1.9]).unwrap();
        let lr = 1e-3;
        adam.step(&mut store, &[Some(g.clone())], lr).unwrap();
        let p = store.value(id).data();
        assert!((p[0] + lr as f32).abs() < 1e-4 * lr as f32, "p[0] = {}", p[0]);
        assert!((p[1] - lr as f32).abs() < 1e-4 * lr as f32, "p[1] = {}", p[1]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut store, id) = one_param_store(vec![0.5, -0.25, 0.125]);
            let mut adam = AdamState::new(&store, &[id]);
            for k in 1..=20u32 {
                let g = Tensor::new(
                    [1, 1, 1, 3],
                    vec![0.01 * k as f32, -0.02 * k as f32, 0.003],
                )
                .unwrap();
                adam.step(&mut store, &[Some(g.clone())], 1e-3).unwrap();
            }
            store.value(id).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, id) = one_param_store(vec![1.0]);
        let mut adam = AdamState::new(&store, &[id]);
        let g = Tensor::new([1, 1, 1, 1], vec![f32::NAN]).unwrap();
        let err = adam
            .step(&mut store, &[Some(g.clone())], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule::new(1e-4, 1e-7, 1000);
        assert_eq!(s.lr(0).unwrap(), 1e-4);
        assert_eq!(s.lr(1000).unwrap(), 1e-7);
        let mid = s.lr(500).unwrap();
        assert!((mid - (1e-4 + 1e-7) / 2.0).abs() < 1e-18, "mid = {mid}");
        assert!((mid - 5.005e-5).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let s = CosineSchedule::new(1e-4, 1e-7, 333);
        let mut prev = f64::INFINITY;
        for t in 0..=333 {
            let lr = s.lr(t).unwrap();
            assert!(lr <= prev + 1e-18, "t = {t}");
            prev = lr;
        }
    }

    #[test]
    fn cosine_rejects_out_of_range() {
        let s = CosineSchedule::new(1e-4, 1e-7, 10);
        assert!(s.lr(11).is_err());
    }
}
