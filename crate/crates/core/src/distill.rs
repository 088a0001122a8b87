//! Block-wise distillation loss and the overall training objective.
//!
//! Each feature map is summarised by two descriptors: a `C`-vector of
//! spatial maxima and an `H×W` map of channel maxima. Both are L2-normalised
//! per sample; the block loss is the sum of the Euclidean distances between
//! teacher and student descriptors, averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Weight of the distillation term in the total loss.
pub const DEFAULT_ALPHA: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    /// `(teacher block, student block)` pairs; empty means one pair per block.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
}

fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: DEFAULT_ALPHA,
            pairs: Vec::new(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "distill alpha must be finite and ≥ 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Concrete pairing for a network with `blocks` blocks.
    pub fn resolved_pairs(&self, blocks: usize) -> Result<Vec<(usize, usize)>> {
        if self.pairs.is_empty() {
            return Ok((0..blocks).map(|i| (i, i)).collect());
        }
        if let Some(&(t, s)) = self.pairs.iter().find(|&&(t, s)| t >= blocks || s >= blocks) {
            return Err(Error::config(format!(
                "distill pair ({t}, {s}) out of range for {blocks} blocks"
            )));
        }
        Ok(self.pairs.clone())
    }
}

/// `‖n(SP(O)) − n(SP(Ō))‖ + ‖n(CP(O)) − n(CP(Ō))‖`, batch mean. The teacher
/// feature is detached so no gradient reaches the teacher.
pub fn distill_block_loss(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    let (ts, ss) = (tape.value(teacher).shape(), tape.value(student).shape());
    if ts != ss {
        return Err(Error::config(format!(
            "distillation pair shape mismatch: teacher {ts:?} vs student {ss:?}"
        )));
    }
    let teacher = tape.detach(teacher);
    let mut terms = Vec::with_capacity(2);
    for pool in [Tape::spatial_max, Tape::channel_max] {
        let t = pool(tape, teacher);
        let t = tape.l2_normalize_rows(t);
        let s = pool(tape, student);
        let s = tape.l2_normalize_rows(s);
        let d = tape.sub(s, t)?;
        terms.push(tape.l2_norm_rows(d));
    }
    let per_sample = tape.add(terms[0], terms[1])?;
    Ok(tape.mean(per_sample))
}

/// `CE(logits, y) + α·Σᵢ block_lossᵢ`.
pub fn total_loss(tape: &mut Tape, logits: Var, labels: &[usize], block_losses: &[Var], alpha: f32) -> Result<Var> {
    let mut loss = tape.cross_entropy(logits, labels)?;
    if alpha != 0.0 {
        for &b in block_losses {
            let w = tape.scale(b, alpha);
            loss = tape.add(loss, w)?;
        }
    }
    Ok(loss)
}

/// Value of the block loss between two concrete feature maps.
pub fn block_residual(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(teacher.clone());
    let s = tape.constant(student.clone());
    let l = distill_block_loss(&mut tape, t, s)?;
    Ok(tape.value(l).data()[0] as f64)
}
