//! Student (binary) and teacher (float) networks built from one [`NetworkSpec`].

mod shortcut;
mod spec;
mod student;
mod teacher;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BnMode, RunningStats, Tape, Tensor, Var};

pub use shortcut::{shortcut_forward, BranchState, ShortcutBranch};
pub use spec::{BlockGeometry, BlockSpec, HeadSpec, InputSpec, NetworkSpec, PoolSpec, StemSpec};
pub use student::{Student, StudentBlock, StudentMode};
pub use teacher::Teacher;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Stem,
    Main(usize),
    Shortcut { block: usize, branch: usize },
    Hidden(usize),
    Head,
}

impl ParamRole {
    /// Everything except shortcut branches.
    pub fn is_main_network(&self) -> bool {
        !matches!(self, ParamRole::Shortcut { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Real shadow weights behind a binarised kernel; clipped to [−1, 1].
    Shadow,
    FloatWeight,
    Threshold,
    BnGamma,
    BnBeta,
    Omega,
    Interaction,
    Bias,
}

impl ParamKind {
    pub fn is_batch_norm(&self) -> bool {
        matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }

    /// Weight decay never applies to thresholds, BN, ω, T or biases.
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::Shadow | ParamKind::FloatWeight)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub role: ParamRole,
    pub kind: ParamKind,
    /// Frozen by the branch state regardless of the training phase
    /// (ω after selection, T after sparsification, anything in a dead branch).
    pub frozen_by_state: bool,
}

impl ParamMeta {
    pub(crate) fn new(name: String, role: ParamRole, kind: ParamKind) -> Self {
        ParamMeta {
            name,
            role,
            kind,
            frozen_by_state: false,
        }
    }
}

/// Visitor access to named parameters and buffers.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&ParamMeta, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&ParamMeta, &mut Tensor));
    /// Non-trainable state (BN running statistics).
    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Places parameters on a tape, deciding per parameter whether it is trainable.
pub struct Binder<'a> {
    trainable: Box<dyn Fn(&ParamMeta) -> bool + 'a>,
    bound: Vec<(String, Var)>,
}

impl<'a> Binder<'a> {
    pub fn new(trainable: impl Fn(&ParamMeta) -> bool + 'a) -> Self {
        Binder {
            trainable: Box::new(trainable),
            bound: Vec::new(),
        }
    }

    /// Every parameter a constant.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    /// Every parameter not frozen by its branch state is trainable.
    pub fn all() -> Self {
        Self::new(|m| !m.frozen_by_state)
    }

    pub fn bind(&mut self, tape: &mut Tape, meta: ParamMeta, value: &Tensor) -> Var {
        let trainable = (self.trainable)(&meta);
        let v = tape.leaf(value.clone(), trainable);
        if trainable {
            self.bound.push((meta.name, v));
        }
        v
    }

    /// Trainable parameters bound so far, in binding order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn into_bound(self) -> Vec<(String, Var)> {
        self.bound
    }
}

/// Kaiming-normal float weights.
pub(crate) fn init_float<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::normal(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

/// Shadow weights: Kaiming-normal, clipped to the straight-through window.
pub(crate) fn init_shadow<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor {
    init_float(shape, rng).map(|v| v.clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones([1, channels, 1, 1]),
            beta: Tensor::zeros([1, channels, 1, 1]),
            stats: RunningStats::new(channels),
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        prefix: &str,
        role: ParamRole,
        mode: BnMode,
    ) -> Result<Var> {
        let g = binder.bind(
            tape,
            ParamMeta::new(format!("{prefix}.bn.gamma"), role, ParamKind::BnGamma),
            &self.gamma,
        );
        let b = binder.bind(
            tape,
            ParamMeta::new(format!("{prefix}.bn.beta"), role, ParamKind::BnBeta),
            &self.beta,
        );
        tape.batch_norm(x, g, b, &mut self.stats, mode)
    }

    fn visit(&self, prefix: &str, role: ParamRole, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        f(
            &ParamMeta::new(format!("{prefix}.bn.gamma"), role, ParamKind::BnGamma),
            &self.gamma,
        );
        f(
            &ParamMeta::new(format!("{prefix}.bn.beta"), role, ParamKind::BnBeta),
            &self.beta,
        );
    }

    fn visit_mut(&mut self, prefix: &str, role: ParamRole, f: &mut dyn FnMut(&ParamMeta, &mut Tensor)) {
        f(
            &ParamMeta::new(format!("{prefix}.bn.gamma"), role, ParamKind::BnGamma),
            &mut self.gamma,
        );
        f(
            &ParamMeta::new(format!("{prefix}.bn.beta"), role, ParamKind::BnBeta),
            &mut self.beta,
        );
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.bn.running_mean"), &self.stats.mean);
        f(&format!("{prefix}.bn.running_var"), &self.stats.var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.bn.running_mean"), &mut self.stats.mean);
        f(&format!("{prefix}.bn.running_var"), &mut self.stats.var);
    }
}

/// Float convolution (no bias) followed by BN.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub weight: Tensor,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub(crate) fn new<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        ConvBn {
            weight: init_float([c_out, c_in, k, k], rng),
            bn: BatchNorm::new(c_out),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        prefix: &str,
        role: ParamRole,
        stride: usize,
        pad: usize,
        mode: BnMode,
    ) -> Result<Var> {
        let w = binder.bind(
            tape,
            ParamMeta::new(format!("{prefix}.weight"), role, ParamKind::FloatWeight),
            &self.weight,
        );
        let y = tape.conv2d(x, w, stride, pad)?;
        self.bn.forward(tape, binder, y, prefix, role, mode)
    }

    fn visit(&self, prefix: &str, role: ParamRole, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        f(
            &ParamMeta::new(format!("{prefix}.weight"), role, ParamKind::FloatWeight),
            &self.weight,
        );
        self.bn.visit(prefix, role, f);
    }

    fn visit_mut(&mut self, prefix: &str, role: ParamRole, f: &mut dyn FnMut(&ParamMeta, &mut Tensor)) {
        f(
            &ParamMeta::new(format!("{prefix}.weight"), role, ParamKind::FloatWeight),
            &mut self.weight,
        );
        self.bn.visit_mut(prefix, role, f);
    }
}

/// Binarised main path `BN(sign(x, t) ⊛ sign(θ*, 0))`, no ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct MainBranch {
    pub theta: Tensor,
    pub t: Tensor,
    pub bn: BatchNorm,
}

impl MainBranch {
    pub(crate) fn new<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        MainBranch {
            theta: init_shadow([c_out, c_in, k, k], rng),
            t: Tensor::scalar(0.0),
            bn: BatchNorm::new(c_out),
        }
    }

    /// With `binarized = false` the kernel is used as a float weight and no
    /// input sign is taken.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        prefix: &str,
        role: ParamRole,
        (stride, pad): (usize, usize),
        binarized: bool,
        mode: BnMode,
    ) -> Result<Var> {
        let y = if binarized {
            let t = binder.bind(
                tape,
                ParamMeta::new(format!("{prefix}.t"), role, ParamKind::Threshold),
                &self.t,
            );
            let th = binder.bind(
                tape,
                ParamMeta::new(format!("{prefix}.theta"), role, ParamKind::Shadow),
                &self.theta,
            );
            let s = tape.biased_sign(x, t)?;
            let w = tape.sign_weights(th);
            tape.binary_conv2d(s, w, stride, pad)?
        } else {
            let th = binder.bind(
                tape,
                ParamMeta::new(format!("{prefix}.theta"), role, ParamKind::FloatWeight),
                &self.theta,
            );
            tape.conv2d(x, th, stride, pad)?
        };
        self.bn.forward(tape, binder, y, prefix, role, mode)
    }

    fn visit(&self, prefix: &str, role: ParamRole, binarized: bool, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        let kind = if binarized {
            ParamKind::Shadow
        } else {
            ParamKind::FloatWeight
        };
        f(&ParamMeta::new(format!("{prefix}.theta"), role, kind), &self.theta);
        f(
            &ParamMeta::new(format!("{prefix}.t"), role, ParamKind::Threshold),
            &self.t,
        );
        self.bn.visit(prefix, role, f);
    }

    fn visit_mut(
        &mut self,
        prefix: &str,
        role: ParamRole,
        binarized: bool,
        f: &mut dyn FnMut(&ParamMeta, &mut Tensor),
    ) {
        let kind = if binarized {
            ParamKind::Shadow
        } else {
            ParamKind::FloatWeight
        };
        f(&ParamMeta::new(format!("{prefix}.theta"), role, kind), &mut self.theta);
        f(
            &ParamMeta::new(format!("{prefix}.t"), role, ParamKind::Threshold),
            &mut self.t,
        );
        self.bn.visit_mut(prefix, role, f);
    }
}

/// Final float classifier: a 1×1 convolution on `(N, F, 1, 1)` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::normal([fan_out, fan_in, 1, 1], (1.0 / fan_in as f32).sqrt(), rng),
            bias: Tensor::zeros([1, fan_out, 1, 1]),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.bind(
            tape,
            ParamMeta::new("head.weight".into(), ParamRole::Head, ParamKind::FloatWeight),
            &self.weight,
        );
        let b = binder.bind(
            tape,
            ParamMeta::new("head.bias".into(), ParamRole::Head, ParamKind::Bias),
            &self.bias,
        );
        let y = tape.conv2d(x, w, 1, 0)?;
        tape.channel_bias(y, b)
    }

    fn visit(&self, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        f(
            &ParamMeta::new("head.weight".into(), ParamRole::Head, ParamKind::FloatWeight),
            &self.weight,
        );
        f(
            &ParamMeta::new("head.bias".into(), ParamRole::Head, ParamKind::Bias),
            &self.bias,
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&ParamMeta, &mut Tensor)) {
        f(
            &ParamMeta::new("head.weight".into(), ParamRole::Head, ParamKind::FloatWeight),
            &mut self.weight,
        );
        f(
            &ParamMeta::new("head.bias".into(), ParamRole::Head, ParamKind::Bias),
            &mut self.bias,
        );
    }
}

/// Output of a forward pass: the per-block (pre-pool) features and logits.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub features: Vec<Var>,
    pub logits: Var,
}

/// Flattens `(N, C, H, W)` into `(N, C·H·W, 1, 1)`.
pub(crate) fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).shape();
    tape.reshape(x, [n, c * h * w, 1, 1])
}
