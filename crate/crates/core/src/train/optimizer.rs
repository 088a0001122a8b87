use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::network::{ParamKind, ParamMeta};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "adaptive-moment")]
    Adam,
    #[serde(rename = "sgd-momentum")]
    SgdMomentum,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adaptive-moment",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        }
    }
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
pub const SGD_MOMENTUM: f32 = 0.9;

/// Per-parameter optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub steps: u64,
    /// First moment (Adam) or velocity (SGD).
    pub m: Tensor,
    /// Second moment; empty for SGD.
    pub v: Tensor,
}

/// Updates named parameters from their gradients. Parameters whose gradient
/// is identically zero are skipped entirely (value and state untouched).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f32,
    pub slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32) -> Self {
        Optimizer {
            kind,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, meta: &ParamMeta, param: &mut Tensor, grad: &Tensor, lr: f32) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {}", meta.name);
        if grad.data().iter().all(|&g| g == 0.0) {
            return;
        }
        let decay = if meta.kind.decays() { self.weight_decay } else { 0.0 };
        let slot = self.slots.entry(meta.name.clone()).or_insert_with(|| Slot {
            steps: 0,
            m: Tensor::zeros(param.shape()),
            v: match self.kind {
                OptimizerKind::Adam => Tensor::zeros(param.shape()),
                OptimizerKind::SgdMomentum => Tensor::zeros([0, 0, 0, 0]),
            },
        });
        slot.steps += 1;
        let p = param.data_mut();
        let g = grad.data();
        match self.kind {
            OptimizerKind::Adam => {
                let t = slot.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
                for i in 0..p.len() {
                    let gi = g[i] + decay * p[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
            OptimizerKind::SgdMomentum => {
                let m = slot.m.data_mut();
                for i in 0..p.len() {
                    let gi = g[i] + decay * p[i];
                    m[i] = SGD_MOMENTUM * m[i] + gi;
                    p[i] -= lr * m[i];
                }
            }
        }
        if meta.kind == ParamKind::Shadow {
            for x in p.iter_mut() {
                *x = x.clamp(-1.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ParamRole;

    fn meta(kind: ParamKind) -> ParamMeta {
        ParamMeta::new("w".into(), ParamRole::Stem, kind)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut opt = Optimizer::new(kind, 0.1);
            let mut p = Tensor::new([1, 1, 1, 2], vec![0.5, -0.25]).unwrap();
            let before = p.clone();
            opt.step(&meta(ParamKind::FloatWeight), &mut p, &Tensor::zeros([1, 1, 1, 2]), 0.1);
            assert!(p.bit_eq(&before));
            assert!(opt.slots.is_empty());
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0);
        let mut p = Tensor::new([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::new([1, 1, 1, 2], vec![3.0, -0.001]).unwrap();
        opt.step(&meta(ParamKind::FloatWeight), &mut p, &g, 0.01);
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((p.data()[0] + 0.01).abs() < 1e-6);
        assert!((p.data()[1] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.0);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        opt.step(&meta(ParamKind::FloatWeight), &mut p, &g, 0.1);
        opt.step(&meta(ParamKind::FloatWeight), &mut p, &g, 0.1);
        // 1 − 0.1·1 − 0.1·1.9
        assert!((p.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn shadow_weights_are_clipped() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.0);
        let mut p = Tensor::new([1, 1, 1, 2], vec![0.95, -0.95]).unwrap();
        let g = Tensor::new([1, 1, 1, 2], vec![-1.0, 1.0]).unwrap();
        opt.step(&meta(ParamKind::Shadow), &mut p, &g, 1.0);
        assert_eq!(p.data(), &[1.0, -1.0]);
    }

    #[test]
    fn decay_skips_thresholds() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 1.0);
        let mut t = Tensor::scalar(0.5);
        opt.step(&meta(ParamKind::Threshold), &mut t, &Tensor::scalar(1.0), 0.1);
        assert!((t.data()[0] - 0.4).abs() < 1e-7);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 1.0);
        let mut w = Tensor::scalar(0.5);
        opt.step(&meta(ParamKind::FloatWeight), &mut w, &Tensor::scalar(1.0), 0.1);
        assert!((w.data()[0] - 0.35).abs() < 1e-7);
    }
}
