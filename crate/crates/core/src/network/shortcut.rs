//! Squeeze-and-interaction shortcut branch.
//!
//! The squeeze step binarises the block input with its own threshold,
//! convolves it with a binarised kernel and scales each output channel by
//! ω. In the dense state all `C'` channels are produced directly; after
//! selection only `S` channels are computed and the interaction matrix `T`
//! (`S × C'`) mixes them back to `C'` channels.

use log::warn;
use rand::Rng;

use super::{init_shadow, Binder, ParamKind, ParamMeta, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchState {
    /// All `C'` channels, identity interaction (not materialised).
    Dense,
    /// `S` kept channels with a trainable `T`; ω frozen.
    Selected,
    /// Small entries of `T` zeroed; `T` frozen.
    Sparsified,
    /// Selection kept no channel; the network skips the branch.
    Dead,
}

impl BranchState {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchState::Dense => "dense",
            BranchState::Selected => "selected",
            BranchState::Sparsified => "sparsified",
            BranchState::Dead => "dead",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dense" => BranchState::Dense,
            "selected" => BranchState::Selected,
            "sparsified" => BranchState::Sparsified,
            "dead" => BranchState::Dead,
            other => return Err(Error::Corruption(format!("unknown branch state {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutBranch {
    pub state: BranchState,
    /// Squeeze shadow kernel, `(S, C_in, k, k)` (`S = C'` while dense).
    pub gamma: Tensor,
    /// Per-channel squeeze scale, `(1, S, 1, 1)`.
    pub omega: Tensor,
    /// Input threshold of the branch's biased sign.
    pub t: Tensor,
    /// Interaction matrix `(S, C', 1, 1)`; present once selected.
    pub interaction: Option<Tensor>,
    /// Original channel index of every kept row, ascending.
    pub selected: Vec<usize>,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ShortcutBranch {
    pub fn new_dense<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let gamma = init_shadow([c_out, c_in, kernel, kernel], rng);
        // Small, distinct scales so the branch starts as a gentle perturbation.
        let l = (c_in * kernel * kernel) as f32;
        let omega = Tensor::uniform([1, c_out, 1, 1], -1.0 / l, 1.0 / l, rng);
        ShortcutBranch {
            state: BranchState::Dense,
            gamma,
            omega,
            t: Tensor::scalar(0.0),
            interaction: None,
            selected: (0..c_out).collect(),
            c_out,
            stride,
            padding,
        }
    }

    /// Number of computed squeeze channels `S` (0 when dead).
    pub fn channels(&self) -> usize {
        match self.state {
            BranchState::Dead => 0,
            _ => self.selected.len(),
        }
    }

    pub fn c_in(&self) -> usize {
        self.gamma.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.gamma.shape()[2]
    }

    /// Nonzero interaction entries; in the dense state the implicit identity
    /// is not counted.
    pub fn interaction_nnz(&self) -> usize {
        match (&self.state, &self.interaction) {
            (BranchState::Dead, _) | (_, None) => 0,
            (_, Some(t)) => t.data().iter().filter(|&&v| v != 0.0).count(),
        }
    }

    /// Keeps the rows at `positions` (indices into the current selection).
    /// Dense branches gain an interaction matrix with `T[s, kept[s]] = 1`;
    /// selected branches keep their trained rows. An empty selection kills
    /// the branch.
    pub fn retain(&mut self, positions: &[usize]) -> Result<()> {
        if matches!(self.state, BranchState::Sparsified | BranchState::Dead) {
            return Err(Error::usage(format!(
                "cannot select channels of a {} branch",
                self.state.as_str()
            )));
        }
        let s_now = self.selected.len();
        if let Some(&bad) = positions.iter().find(|&&p| p >= s_now) {
            return Err(Error::Invariant(format!(
                "kept position {bad} out of range for {s_now} channels"
            )));
        }
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            warn!("shortcut selection kept no channel; branch is dead");
            let [_, c_in, k, _] = self.gamma.shape();
            self.state = BranchState::Dead;
            self.selected.clear();
            self.gamma = Tensor::zeros([0, c_in, k, k]);
            self.omega = Tensor::zeros([1, 0, 1, 1]);
            self.interaction = None;
            return Ok(());
        }
        let [_, c_in, k, _] = self.gamma.shape();
        let per = c_in * k * k;
        let mut gamma = Vec::with_capacity(positions.len() * per);
        let mut omega = Vec::with_capacity(positions.len());
        for &p in &positions {
            gamma.extend_from_slice(&self.gamma.data()[p * per..(p + 1) * per]);
            omega.push(self.omega.data()[p]);
        }
        let kept: Vec<usize> = positions.iter().map(|&p| self.selected[p]).collect();
        let c_out = self.c_out;
        let interaction = match &self.interaction {
            Some(t) => {
                let mut rows = Vec::with_capacity(positions.len() * c_out);
                for &p in &positions {
                    rows.extend_from_slice(&t.data()[p * c_out..(p + 1) * c_out]);
                }
                Tensor::from_parts([positions.len(), c_out, 1, 1], rows)
            }
            None => Tensor::from_fn(
                [kept.len(), c_out, 1, 1],
                |[s, c, _, _]| {
                    if kept[s] == c {
                        1.0
                    } else {
                        0.0
                    }
                },
            ),
        };
        self.gamma = Tensor::from_parts([positions.len(), c_in, k, k], gamma);
        self.omega = Tensor::channel_vector(omega);
        self.interaction = Some(interaction);
        self.selected = kept;
        self.state = BranchState::Selected;
        Ok(())
    }

    /// Zeroes interaction entries with `|T| < threshold` and freezes `T`.
    /// Returns how many nonzero entries were zeroed.
    pub fn sparsify(&mut self, threshold: f32) -> Result<usize> {
        match self.state {
            BranchState::Dead => return Ok(0),
            BranchState::Dense => {
                return Err(Error::usage("sparsify needs selected shortcut branches"));
            }
            BranchState::Selected | BranchState::Sparsified => {}
        }
        let t = self.interaction.as_mut().expect("selected branches carry T");
        let mut zeroed = 0;
        for v in t.data_mut() {
            if *v != 0.0 && v.abs() < threshold {
                *v = 0.0;
                zeroed += 1;
            }
        }
        if t.data().iter().all(|&v| v == 0.0) {
            warn!("sparsification zeroed an entire interaction matrix; branch output is zero");
        }
        self.state = BranchState::Sparsified;
        Ok(zeroed)
    }

    fn metas(&self, prefix: &str, role: ParamRole) -> [ParamMeta; 4] {
        let dead = self.state == BranchState::Dead;
        let mk = |suffix: &str, kind: ParamKind, frozen: bool| ParamMeta {
            name: format!("{prefix}.{suffix}"),
            role,
            kind,
            frozen_by_state: dead || frozen,
        };
        [
            mk("gamma", ParamKind::Shadow, false),
            mk("omega", ParamKind::Omega, self.state != BranchState::Dense),
            mk("t", ParamKind::Threshold, false),
            mk(
                "interaction",
                ParamKind::Interaction,
                self.state == BranchState::Sparsified,
            ),
        ]
    }

    pub(crate) fn visit(&self, prefix: &str, role: ParamRole, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        let [g, o, t, i] = self.metas(prefix, role);
        f(&g, &self.gamma);
        f(&o, &self.omega);
        f(&t, &self.t);
        if let Some(m) = &self.interaction {
            f(&i, m);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, role: ParamRole, f: &mut dyn FnMut(&ParamMeta, &mut Tensor)) {
        let [g, o, t, i] = self.metas(prefix, role);
        f(&g, &mut self.gamma);
        f(&o, &mut self.omega);
        f(&t, &mut self.t);
        if let Some(m) = &mut self.interaction {
            f(&i, m);
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        prefix: &str,
        role: ParamRole,
    ) -> Result<Var> {
        if self.state == BranchState::Dead {
            return Err(Error::config(format!("shortcut {prefix} has no selected channels")));
        }
        let [g, o, t, i] = self.metas(prefix, role);
        let tv = binder.bind(tape, t, &self.t);
        let gv = binder.bind(tape, g, &self.gamma);
        let ov = binder.bind(tape, o, &self.omega);
        let s = tape.biased_sign(x, tv)?;
        let w = tape.sign_weights(gv);
        let y = tape.binary_conv2d(s, w, self.stride, self.padding)?;
        let y = tape.channel_scale(y, ov)?;
        match &self.interaction {
            Some(m) if self.state != BranchState::Dense => {
                let mv = binder.bind(tape, i, m);
                tape.channel_mix(y, mv)
            }
            _ => Ok(y),
        }
    }
}

/// Evaluates one branch on a block input with all parameters constant.
pub fn shortcut_forward(tape: &mut Tape, branch: &ShortcutBranch, input: Var) -> Result<Var> {
    let c = tape.value(input).shape()[1];
    if c != branch.c_in() {
        return Err(Error::config(format!(
            "shortcut expects {} input channels, got {c}",
            branch.c_in()
        )));
    }
    let mut binder = Binder::frozen();
    branch.forward(
        tape,
        &mut binder,
        input,
        "shortcut",
        ParamRole::Shortcut { block: 0, branch: 0 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn branch(c_in: usize, c_out: usize) -> ShortcutBranch {
        ShortcutBranch::new_dense(c_in, c_out, 3, 1, 1, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn initial_interaction_routes_kept_channels() {
        // odd receptive field (L = 9) so squeezed maps are never zero
        let mut b = branch(1, 3);
        b.omega = Tensor::channel_vector(vec![1.0, 1.0, 1.0]);
        b.retain(&[0, 2]).unwrap();
        let t = b.interaction.as_ref().unwrap();
        assert_eq!(t.data(), &[1., 0., 0., 0., 0., 1.]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal([1, 1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let y = shortcut_forward(&mut tape, &b, x).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), [1, 3, 4, 4]);
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(yv.at([0, 1, h, w]), 0.0);
                assert_ne!(yv.at([0, 0, h, w]), 0.0);
                assert_ne!(yv.at([0, 2, h, w]), 0.0);
            }
        }
    }

    #[test]
    fn zero_omega_gives_zero_output() {
        let mut b = branch(2, 3);
        b.omega = Tensor::zeros([1, 3, 1, 1]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::normal([2, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let y = shortcut_forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_selection_kills_branch() {
        let mut b = branch(2, 3);
        b.retain(&[]).unwrap();
        assert_eq!(b.state, BranchState::Dead);
        assert_eq!(b.channels(), 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        assert!(matches!(shortcut_forward(&mut tape, &b, x), Err(Error::Config(_))));
    }

    #[test]
    fn sparsify_direct_application() {
        let mut b = branch(2, 2);
        b.retain(&[0, 1]).unwrap();
        b.interaction = Some(Tensor::new([2, 2, 1, 1], vec![1.0, 0.01, 0.0, 0.5]).unwrap());
        assert_eq!(b.sparsify(0.05).unwrap(), 1);
        assert_eq!(b.interaction.as_ref().unwrap().data(), &[1.0, 0.0, 0.0, 0.5]);
        assert_eq!(b.state, BranchState::Sparsified);
    }

    #[test]
    fn reselecting_keeps_trained_rows() {
        let mut b = branch(2, 4);
        b.retain(&[1, 3]).unwrap();
        b.interaction.as_mut().unwrap().data_mut()[7] = 0.25;
        b.retain(&[1]).unwrap();
        assert_eq!(b.selected, vec![3]);
        assert_eq!(b.interaction.as_ref().unwrap().data(), &[0.0, 0.0, 0.0, 0.25]);
    }
}
