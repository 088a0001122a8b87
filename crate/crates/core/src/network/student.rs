use rand::Rng;

use super::{
    flatten, Binder, BranchState, ConvBn, Linear, MainBranch, NetOutput, NetworkSpec, ParamMeta, ParamRole, Params,
    ShortcutBranch,
};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Tape, Tensor};

/// One binarised block: main branch plus `K` shortcut branches fused by addition.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBlock {
    pub main: MainBranch,
    pub shortcuts: Vec<ShortcutBranch>,
}

/// How a student forward pass treats BN and shortcuts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StudentMode {
    /// BN mode for the stem, main branches and hidden FCs.
    pub bn: BnMode,
    /// When false the network behaves as if `K = 0`.
    pub shortcuts: bool,
}

impl StudentMode {
    pub const EVAL: StudentMode = StudentMode {
        bn: BnMode::Eval,
        shortcuts: true,
    };
    pub const TRAIN: StudentMode = StudentMode {
        bn: BnMode::Train,
        shortcuts: true,
    };
}

/// Binary student network.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub spec: NetworkSpec,
    pub stem: ConvBn,
    pub blocks: Vec<StudentBlock>,
    pub hidden: Vec<MainBranch>,
    pub head: Linear,
}

impl Student {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate_runtime()?;
        let stem = ConvBn::new(spec.stem.c_out, spec.input.channels, spec.stem.kernel, rng);
        let blocks = spec
            .blocks
            .iter()
            .map(|b| StudentBlock {
                main: MainBranch::new(b.c_out, b.c_in, b.kernel, rng),
                shortcuts: (0..b.num_shortcuts)
                    .map(|_| ShortcutBranch::new_dense(b.c_in, b.c_out, b.kernel, b.stride, b.padding, rng))
                    .collect(),
            })
            .collect();
        let fcs = spec.fc_layers();
        let (last, hidden) = fcs.split_last().expect("at least the final fc");
        let hidden = hidden
            .iter()
            .map(|&(fin, fout)| MainBranch::new(fout, fin, 1, rng))
            .collect();
        Ok(Student {
            spec: spec.clone(),
            stem,
            blocks,
            head: Linear::new(last.0, last.1, rng),
            hidden,
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let i = &self.spec.input;
        let [_, c, h, w] = input.shape();
        if (c, h, w) != (i.channels, i.height, i.width) {
            return Err(Error::config(format!(
                "input shape {:?} does not match network input ({}, {}, {})",
                input.shape(),
                i.channels,
                i.height,
                i.width
            )));
        }
        Ok(())
    }

    /// Records a forward pass; trainable parameters are chosen by `binder`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        input: &Tensor,
        mode: StudentMode,
    ) -> Result<NetOutput> {
        self.check_input(input)?;
        let spec = &self.spec;
        let x = tape.constant(input.clone());
        let s = &spec.stem;
        let mut x = self
            .stem
            .forward(tape, binder, x, "stem", ParamRole::Stem, s.stride, s.padding, mode.bn)?;
        if let Some(p) = &s.pool {
            x = tape.max_pool(x, p.kernel, p.stride, p.padding)?;
        }
        let mut features = Vec::with_capacity(self.blocks.len());
        for (i, (block, bs)) in self.blocks.iter_mut().zip(&spec.blocks).enumerate() {
            let prefix = format!("block{i}.main");
            let mut y = block.main.forward(
                tape,
                binder,
                x,
                &prefix,
                ParamRole::Main(i),
                (bs.stride, bs.padding),
                bs.binarized,
                mode.bn,
            )?;
            if mode.shortcuts {
                for (k, sc) in block.shortcuts.iter().enumerate() {
                    if sc.state == BranchState::Dead {
                        continue;
                    }
                    let role = ParamRole::Shortcut { block: i, branch: k };
                    let o = sc.forward(tape, binder, x, &format!("block{i}.sc{k}"), role)?;
                    y = tape.add(y, o)?;
                }
            }
            features.push(y);
            x = match &bs.pool_after {
                Some(p) => tape.max_pool(y, p.kernel, p.stride, p.padding)?,
                None => y,
            };
        }
        let mut x = flatten(tape, x)?;
        for (j, fc) in self.hidden.iter_mut().enumerate() {
            x = fc.forward(
                tape,
                binder,
                x,
                &format!("fc{j}"),
                ParamRole::Hidden(j),
                (1, 0),
                true,
                mode.bn,
            )?;
        }
        let logits = self.head.forward(tape, binder, x)?;
        Ok(NetOutput { features, logits })
    }

    /// Logits in eval mode with every parameter constant.
    pub fn predict(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &mut Binder::frozen(), input, StudentMode::EVAL)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Every shortcut branch as `(block, branch, &branch)`.
    pub fn branches(&self) -> impl Iterator<Item = (usize, usize, &ShortcutBranch)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.shortcuts.iter().enumerate().map(move |(k, s)| (i, k, s)))
    }

    pub fn branches_mut(&mut self) -> impl Iterator<Item = (usize, usize, &mut ShortcutBranch)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.shortcuts.iter_mut().enumerate().map(move |(k, s)| (i, k, s)))
    }

    /// Copies stem, main branches and head from another student of the same spec.
    pub fn copy_main_from(&mut self, other: &Student) {
        self.stem = other.stem.clone();
        self.hidden = other.hidden.clone();
        self.head = other.head.clone();
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            dst.main = src.main.clone();
        }
    }
}

impl Params for Student {
    fn visit(&self, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        self.stem.visit("stem", ParamRole::Stem, f);
        for (i, (b, bs)) in self.blocks.iter().zip(&self.spec.blocks).enumerate() {
            b.main
                .visit(&format!("block{i}.main"), ParamRole::Main(i), bs.binarized, f);
            for (k, sc) in b.shortcuts.iter().enumerate() {
                sc.visit(
                    &format!("block{i}.sc{k}"),
                    ParamRole::Shortcut { block: i, branch: k },
                    f,
                );
            }
        }
        for (j, fc) in self.hidden.iter().enumerate() {
            fc.visit(&format!("fc{j}"), ParamRole::Hidden(j), true, f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&ParamMeta, &mut Tensor)) {
        self.stem.visit_mut("stem", ParamRole::Stem, f);
        for (i, (b, bs)) in self.blocks.iter_mut().zip(&self.spec.blocks).enumerate() {
            b.main
                .visit_mut(&format!("block{i}.main"), ParamRole::Main(i), bs.binarized, f);
            for (k, sc) in b.shortcuts.iter_mut().enumerate() {
                sc.visit_mut(
                    &format!("block{i}.sc{k}"),
                    ParamRole::Shortcut { block: i, branch: k },
                    f,
                );
            }
        }
        for (j, fc) in self.hidden.iter_mut().enumerate() {
            fc.visit_mut(&format!("fc{j}"), ParamRole::Hidden(j), true, f);
        }
        self.head.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.bn.visit_buffers("stem", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.main.bn.visit_buffers(&format!("block{i}.main"), f);
        }
        for (j, fc) in self.hidden.iter().enumerate() {
            fc.bn.visit_buffers(&format!("fc{j}"), f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.bn.visit_buffers_mut("stem", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.main.bn.visit_buffers_mut(&format!("block{i}.main"), f);
        }
        for (j, fc) in self.hidden.iter_mut().enumerate() {
            fc.bn.visit_buffers_mut(&format!("fc{j}"), f);
        }
    }
}
