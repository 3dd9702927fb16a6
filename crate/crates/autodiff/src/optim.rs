//! AdamW with decoupled weight decay, and warm-up learning-rate schedules.

use crate::params::ParamStore;
use crate::tensor::{mismatch, AutodiffError};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    moments: BTreeMap<String, Moments>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Zeroed moments for every trainable tensor in `params`.
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let moments = params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| {
                let z = vec![0.0; t.numel()];
                (n.clone(), Moments { m: z.clone(), v: z })
            })
            .collect();
        Self {
            moments,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }
}

/// One AdamW update of every tracked tensor that holds a gradient.
/// Gradients are consumed (reset to `None`).
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<(), AutodiffError> {
    for (name, mom) in &state.moments {
        let t = params
            .get(name)
            .ok_or_else(|| mismatch(format!("optimizer tracks unknown tensor `{name}`")))?;
        if t.numel() != mom.m.len() || t.grad.as_ref().is_some_and(|g| g.len() != mom.m.len()) {
            return Err(mismatch(format!("optimizer state for `{name}` does not match its shape")));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (name, mom) in state.moments.iter_mut() {
        let t = params.get_mut(name).expect("checked above");
        let Some(grad) = t.grad.take() else { continue };
        for i in 0..grad.len() {
            let g = grad[i];
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            let p = &mut t.data[i];
            *p -= lr * state.weight_decay * *p;
            *p -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    ConstantWarmup,
    CosineWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f64,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, warmup_steps: u64, total_steps: u64, base_lr: f64) -> Result<Self, AutodiffError> {
        if warmup_steps > total_steps {
            return Err(mismatch(format!("warmup {warmup_steps} exceeds total {total_steps}")));
        }
        Ok(Self {
            kind,
            warmup_steps,
            total_steps,
            base_lr,
        })
    }

    /// Linear warm-up from 0, then constant or cosine decay to 0 at
    /// `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            ScheduleKind::ConstantWarmup => self.base_lr,
            ScheduleKind::CosineWarmup => {
                let span = (self.total_steps - self.warmup_steps).max(1) as f64;
                let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap().trainable());
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = store(&[1.0, -2.0]);
        let mut s = OptimizerState::new(&p, 0.0);
        p.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
        adamw_step(&mut p, &mut s, 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[0.5, 0.5, 0.5]);
        let mut s = OptimizerState::new(&p, 0.0);
        p.get_mut("w").unwrap().grad = Some(vec![3.0, -0.02, 1e-3]);
        adamw_step(&mut p, &mut s, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps)
        let d = &p.get("w").unwrap().data;
        for (v, g) in d.iter().zip([3.0f64, -0.02, 1e-3]) {
            let want = 0.5 - 0.01 * g / (g.abs() + 1e-8);
            assert!((v - want).abs() < 1e-15, "{v} vs {want}");
        }
    }

    #[test]
    fn decoupled_decay() {
        let mut p = store(&[2.0]);
        let mut s = OptimizerState::new(&p, 0.1);
        p.get_mut("w").unwrap().grad = Some(vec![0.0]);
        adamw_step(&mut p, &mut s, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().data, vec![2.0 - 0.5 * 0.1 * 2.0]);
    }

    #[test]
    fn shape_changes_rejected() {
        let mut p = store(&[1.0]);
        let mut s = OptimizerState::new(&p, 0.0);
        p.insert("w", Tensor::zeros(&[2]).trainable());
        assert!(adamw_step(&mut p, &mut s, 0.1).is_err());
    }

    #[test]
    fn schedules() {
        let c = LrSchedule::new(ScheduleKind::CosineWarmup, 10, 110, 2e-4).unwrap();
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(10), 2e-4);
        assert!((c.lr_at(60) - 1e-4).abs() < 1e-9);
        assert!(c.lr_at(110).abs() < 1e-18);
        assert_eq!(c.lr_at(500), c.lr_at(110));
        let k = LrSchedule::new(ScheduleKind::ConstantWarmup, 4, 100, 1.0).unwrap();
        assert_eq!(k.lr_at(2), 0.5);
        assert_eq!(k.lr_at(99), 1.0);
        assert!(LrSchedule::new(ScheduleKind::ConstantWarmup, 5, 4, 1.0).is_err());
    }
}
