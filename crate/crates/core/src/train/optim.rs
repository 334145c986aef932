use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{GradMap, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            peak_lr: 0.2,
            warmup_steps: 50,
            total_steps: 500,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps > self.total_steps || !(self.peak_lr >= 0.0) {
            return Err(Error::Config(format!(
                "schedule: need total_steps > 0, warmup_steps <= total_steps and peak_lr >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then half-period cosine decay to zero.
pub fn lr_at_step(step: usize, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::OutOfRange {
            op: "lr_at_step",
            index: step,
            extent: s.total_steps + 1,
        });
    }
    if step < s.warmup_steps {
        return Ok(s.peak_lr * step as f64 / s.warmup_steps as f64);
    }
    let decay = s.total_steps - s.warmup_steps;
    if decay == 0 {
        return Ok(s.peak_lr);
    }
    let progress = (step - s.warmup_steps) as f64 / decay as f64;
    Ok(s.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-6,
        }
    }
}

/// Velocity per parameter slot (`None` until the slot first gets a
/// gradient) and the number of completed steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub velocities: Vec<Option<Vec<f64>>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocities: vec![None; store.len()],
            step: 0,
        }
    }
}

/// `g' = g + wd w` (kernels only), `v = m v + g'`, `w = w - lr v`.
/// Parameters without an entry in `grads` are left untouched, velocity
/// included. Buffers are never updated.
pub fn sgd_momentum_step(
    store: &mut ParamStore,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f64,
    config: &SgdConfig,
) -> Result<()> {
    if state.velocities.len() != store.len() {
        return Err(Error::invalid(format!(
            "optimizer state has {} slots for {} parameters",
            state.velocities.len(),
            store.len()
        )));
    }
    let dtype = store.dtype();
    let updates: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .filter_map(|(id, p)| grads.get(&p.tensor).map(|g| (id, p.kind, p.tensor.clone(), g.clone())))
        .collect();
    for (id, kind, w, g) in updates {
        if g.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let wd = if kind == ParamKind::Kernel { config.weight_decay } else { 0.0 };
        let slot = &mut state.velocities[id.0];
        let v = slot.get_or_insert_with(|| vec![0.0; w.numel()]);
        let mut new_w = Vec::with_capacity(w.numel());
        for ((vi, &gi), &wi) in v.iter_mut().zip(g.data()).zip(w.data()) {
            *vi = config.momentum * *vi + (gi + wd * wi);
            new_w.push(wi - lr * *vi);
        }
        dtype.round_slice(v);
        store.set_values(id, new_w)?;
    }
    state.step += 1;
    Ok(())
}

/// Gradient of each trainable slot, zeros where the graph does not reach.
pub fn grads_by_slot(store: &ParamStore, grads: &GradMap) -> Vec<Tensor> {
    store.iter().map(|(_, p)| grads.get_or_zeros(&p.tensor)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::DType;

    fn one_param(kind: ParamKind) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new(DType::F64, 0);
        let id = s.add("w", kind, &[1], Init::Values(vec![1.0])).unwrap();
        (s, id)
    }

    fn step_with_grad(s: &mut ParamStore, st: &mut OptimizerState, id: crate::params::ParamId, g: f64, cfg: &SgdConfig) {
        let loss = s.get(id).scale(g).sum();
        let grads = loss.backward().unwrap();
        sgd_momentum_step(s, &grads, st, 0.1, cfg).unwrap();
    }

    #[test]
    fn schedule_points() {
        let s = Schedule {
            peak_lr: 40.96,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert_eq!(lr_at_step(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at_step(10, &s).unwrap(), 40.96);
        assert!(lr_at_step(110, &s).unwrap().abs() < 1e-12);
        assert!((lr_at_step(60, &s).unwrap() - 20.48).abs() < 1e-12);
        assert!(lr_at_step(111, &s).is_err());
    }

    #[test]
    fn two_step_recursion() {
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (mut s, id) = one_param(ParamKind::Kernel);
        let mut st = OptimizerState::new(&s);
        step_with_grad(&mut s, &mut st, id, 1.0, &cfg);
        assert_eq!(st.velocities[0].as_ref().unwrap()[0], 1.0);
        assert_eq!(s.get(id).data()[0], 0.9);
        step_with_grad(&mut s, &mut st, id, 1.0, &cfg);
        assert_eq!(st.velocities[0].as_ref().unwrap()[0], 1.9);
        assert!((s.get(id).data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn decay_only_on_kernels() {
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 1e-6,
        };
        for (kind, want_v) in [(ParamKind::Kernel, 1.0 + 1e-6), (ParamKind::Norm, 1.0), (ParamKind::Bias, 1.0)] {
            let (mut s, id) = one_param(kind);
            let mut st = OptimizerState::new(&s);
            step_with_grad(&mut s, &mut st, id, 1.0, &cfg);
            assert_eq!(st.velocities[0].as_ref().unwrap()[0], want_v);
        }
    }

    #[test]
    fn unreached_params_untouched() {
        let mut s = ParamStore::new(DType::F64, 0);
        let a = s.add("a", ParamKind::Kernel, &[2], Init::Values(vec![1.0, 2.0])).unwrap();
        let b = s.add("b", ParamKind::Kernel, &[2], Init::Values(vec![3.0, 4.0])).unwrap();
        let mut st = OptimizerState::new(&s);
        let grads = s.get(a).sum().backward().unwrap();
        sgd_momentum_step(&mut s, &grads, &mut st, 0.5, &SgdConfig::default()).unwrap();
        assert_eq!(s.get(b).data(), &[3.0, 4.0]);
        assert!(st.velocities[b.0].is_none());
        assert_ne!(s.get(a).data(), &[1.0, 2.0]);
    }
}
