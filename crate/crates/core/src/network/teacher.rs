use rand::Rng;

use super::{flatten, Binder, ConvBn, Linear, NetOutput, NetworkSpec, ParamMeta, ParamRole, Params};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Tape, Tensor};

/// Full-precision teacher: every block is conv → BN → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub spec: NetworkSpec,
    pub stem: ConvBn,
    pub blocks: Vec<ConvBn>,
    pub hidden: Vec<ConvBn>,
    pub head: Linear,
}

impl Teacher {
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate_runtime()?;
        let stem = ConvBn::new(spec.stem.c_out, spec.input.channels, spec.stem.kernel, rng);
        let blocks = spec
            .blocks
            .iter()
            .map(|b| ConvBn::new(b.c_out, b.c_in, b.kernel, rng))
            .collect();
        let fcs = spec.fc_layers();
        let (last, hidden) = fcs.split_last().expect("at least the final fc");
        let hidden = hidden
            .iter()
            .map(|&(fin, fout)| ConvBn::new(fout, fin, 1, rng))
            .collect();
        Ok(Teacher {
            spec: spec.clone(),
            stem,
            blocks,
            head: Linear::new(last.0, last.1, rng),
            hidden,
        })
    }

    /// Whether this teacher can supervise a student built from `spec`
    /// (identical per-block feature shapes).
    pub fn check_compatible(&self, spec: &NetworkSpec) -> Result<()> {
        let mine = self.spec.feature_shapes(1);
        let theirs = spec.feature_shapes(1);
        if mine != theirs || self.spec.input != spec.input {
            return Err(Error::config(format!(
                "teacher {:?} features {mine:?} do not match student {:?} features {theirs:?}",
                self.spec.name, spec.name
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, tape: &mut Tape, binder: &mut Binder, input: &Tensor, bn: BnMode) -> Result<NetOutput> {
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
        let spec = &self.spec;
        let x = tape.constant(input.clone());
        let s = &spec.stem;
        let x = self
            .stem
            .forward(tape, binder, x, "stem", ParamRole::Stem, s.stride, s.padding, bn)?;
        let mut x = tape.relu(x);
        if let Some(p) = &s.pool {
            x = tape.max_pool(x, p.kernel, p.stride, p.padding)?;
        }
        let mut features = Vec::with_capacity(self.blocks.len());
        for (i, (block, bs)) in self.blocks.iter_mut().zip(&spec.blocks).enumerate() {
            let y = block.forward(
                tape,
                binder,
                x,
                &format!("block{i}"),
                ParamRole::Main(i),
                bs.stride,
                bs.padding,
                bn,
            )?;
            let y = tape.relu(y);
            features.push(y);
            x = match &bs.pool_after {
                Some(p) => tape.max_pool(y, p.kernel, p.stride, p.padding)?,
                None => y,
            };
        }
        let mut x = flatten(tape, x)?;
        for (j, fc) in self.hidden.iter_mut().enumerate() {
            let y = fc.forward(tape, binder, x, &format!("fc{j}"), ParamRole::Hidden(j), 1, 0, bn)?;
            x = tape.relu(y);
        }
        let logits = self.head.forward(tape, binder, x)?;
        Ok(NetOutput { features, logits })
    }

    /// Eval-mode features and logits as plain tensors.
    pub fn features(&mut self, input: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &mut Binder::frozen(), input, BnMode::Eval)?;
        Ok((
            out.features.iter().map(|&v| tape.value(v).clone()).collect(),
            tape.value(out.logits).clone(),
        ))
    }
}

impl Params for Teacher {
    fn visit(&self, f: &mut dyn FnMut(&ParamMeta, &Tensor)) {
        self.stem.visit("stem", ParamRole::Stem, f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), ParamRole::Main(i), f);
        }
        for (j, fc) in self.hidden.iter().enumerate() {
            fc.visit(&format!("fc{j}"), ParamRole::Hidden(j), f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&ParamMeta, &mut Tensor)) {
        self.stem.visit_mut("stem", ParamRole::Stem, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), ParamRole::Main(i), f);
        }
        for (j, fc) in self.hidden.iter_mut().enumerate() {
            fc.visit_mut(&format!("fc{j}"), ParamRole::Hidden(j), f);
        }
        self.head.visit_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.bn.visit_buffers("stem", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.bn.visit_buffers(&format!("block{i}"), f);
        }
        for (j, fc) in self.hidden.iter().enumerate() {
            fc.bn.visit_buffers(&format!("fc{j}"), f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.bn.visit_buffers_mut("stem", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.bn.visit_buffers_mut(&format!("block{i}"), f);
        }
        for (j, fc) in self.hidden.iter_mut().enumerate() {
            fc.bn.visit_buffers_mut(&format!("fc{j}"), f);
        }
    }
}
