//! Channel selection for squeeze layers under a memory budget, and
//! interaction-matrix sparsification.

use std::fmt::Write as _;

use log::warn;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{
    block_main_bits, branch_bits, cost_of, selected_channel_bits, BranchCost, CompressionState, Precision,
};
use crate::error::{Error, Result};
use crate::network::{BranchState, Student};

/// Relative interaction threshold used when none is given: entries below
/// this fraction of the branch's largest |T| are zeroed.
pub const DEFAULT_RELATIVE_THRESHOLD: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Blockwise,
    Global,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Blockwise => "blockwise",
            Strategy::Global => "global",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub strategy: Strategy,
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn global(epsilon: f64) -> Self {
        SelectionPolicy {
            strategy: Strategy::Global,
            epsilon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Outcome of selection for one shortcut branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSelection {
    pub block: usize,
    pub branch: usize,
    /// Output channels `C'` of the block.
    pub c_out: usize,
    /// Original channel indices kept, ascending.
    pub kept: Vec<usize>,
    /// Shortcut parameter bits right after selection.
    pub shortcut_bits: u64,
    /// Main-branch parameter bits of the block.
    pub main_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub strategy: Strategy,
    pub epsilon: f64,
    /// Channel budget `n = ⌊ε·ΣC'⌋` over all branches.
    pub budget: usize,
    pub total_kept: usize,
    pub per_branch: Vec<BranchSelection>,
}

impl SelectionReport {
    /// Kept-channel count per block (summed over that block's branches).
    pub fn kept_per_block(&self, blocks: usize) -> Vec<usize> {
        let mut v = vec![0; blocks];
        for b in &self.per_branch {
            v[b.block] += b.kept.len();
        }
        v
    }

    /// Per-block overhead table, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("block\tbranch\tc_out\tkept\tshortcut_bits\tmain_bits\toverhead\n");
        for b in &self.per_branch {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
                b.block,
                b.branch,
                b.c_out,
                b.kept.len(),
                b.shortcut_bits,
                b.main_bits,
                b.shortcut_bits as f64 / b.main_bits as f64
            );
        }
        out
    }
}

/// A candidate squeeze channel: `(block, branch, original channel)` with its
/// position in the branch's current selection.
struct Candidate {
    block: usize,
    branch: usize,
    channel: usize,
    position: usize,
    magnitude: f32,
    bits: u64,
}

/// Keeps the most important squeeze channels and moves every branch to the
/// selected state. Already-selected branches are re-selected among their
/// surviving channels with the same budget, so selecting twice is the same
/// as selecting once.
pub fn select_channels(student: &mut Student, policy: &SelectionPolicy) -> Result<SelectionReport> {
    policy.validate()?;
    if let Some((i, k, b)) = student
        .branches()
        .find(|(_, _, b)| matches!(b.state, BranchState::Sparsified))
    {
        return Err(Error::usage(format!(
            "block {i} shortcut {k} is {}; selection needs dense or selected branches",
            b.state.as_str()
        )));
    }
    let spec = student.spec.clone();
    let total_c: usize = student.branches().map(|(_, _, b)| b.c_out).sum();
    let budget = (policy.epsilon * total_c as f64).floor() as usize;
    if policy.epsilon == 0.0 && total_c > 0 {
        warn!("epsilon is 0; every shortcut branch will be removed");
    }

    // positions to keep, per (block, branch), in branch order
    let mut keep: Vec<Vec<usize>> = student.branches().map(|_| Vec::new()).collect();
    let live: Vec<bool> = student
        .branches()
        .map(|(_, _, b)| b.state != BranchState::Dead)
        .collect();
    match policy.strategy {
        Strategy::Global => {
            let main_bits: u64 = (0..spec.blocks.len())
                .map(|i| block_main_bits(&spec, i, Precision::Binary))
                .sum();
            let bit_budget = policy.epsilon * main_bits as f64;
            let mut cands: Vec<(usize, Candidate)> = Vec::new();
            for (slot, (i, k, b)) in student.branches().enumerate() {
                if !live[slot] {
                    continue;
                }
                let bits = selected_channel_bits(b.c_in(), b.kernel());
                for (p, (&c, &w)) in b.selected.iter().zip(b.omega.data()).enumerate() {
                    cands.push((
                        slot,
                        Candidate {
                            block: i,
                            branch: k,
                            channel: c,
                            position: p,
                            magnitude: w.abs(),
                            bits,
                        },
                    ));
                }
            }
            cands.sort_by(|(_, a), (_, b)| {
                b.magnitude
                    .total_cmp(&a.magnitude)
                    .then(a.block.cmp(&b.block))
                    .then(a.branch.cmp(&b.branch))
                    .then(a.channel.cmp(&b.channel))
            });
            let (mut count, mut bits) = (0usize, 0u64);
            for (slot, c) in cands {
                if count + 1 > budget || (bits + c.bits) as f64 > bit_budget {
                    break;
                }
                count += 1;
                bits += c.bits;
                keep[slot].push(c.position);
            }
        }
        Strategy::Blockwise | Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            for (slot, (_, _, b)) in student.branches().enumerate() {
                if !live[slot] {
                    continue;
                }
                let s = b.selected.len();
                let quota = ((b.c_out as f64 * policy.epsilon).floor() as usize).min(s);
                keep[slot] = if policy.strategy == Strategy::Random {
                    index::sample(&mut rng, s, quota).into_vec()
                } else {
                    let mut order: Vec<usize> = (0..s).collect();
                    let w = b.omega.data();
                    order.sort_by(|&x, &y| w[y].abs().total_cmp(&w[x].abs()).then(x.cmp(&y)));
                    order.truncate(quota);
                    order
                };
            }
        }
    }

    let mut per_branch = Vec::new();
    for (slot, (i, k, b)) in student.branches_mut().enumerate() {
        if live[slot] {
            let positions = &keep[slot];
            // re-selecting every surviving channel must leave the branch untouched
            if b.state == BranchState::Dense || positions.len() != b.selected.len() {
                b.retain(positions)?;
            }
        }
        let cost = BranchCost {
            state: b.state,
            channels: b.channels(),
            interaction_nnz: b.interaction_nnz(),
        };
        per_branch.push(BranchSelection {
            block: i,
            branch: k,
            c_out: b.c_out,
            kept: if b.state == BranchState::Dead {
                Vec::new()
            } else {
                b.selected.clone()
            },
            shortcut_bits: branch_bits(&cost, b.c_in(), b.kernel()),
            main_bits: block_main_bits(&spec, i, Precision::Binary),
        });
    }
    let total_kept = per_branch.iter().map(|b| b.kept.len()).sum();
    if total_kept > budget && policy.strategy == Strategy::Global {
        return Err(Error::Invariant(format!(
            "kept {total_kept} channels over budget {budget}"
        )));
    }
    Ok(SelectionReport {
        strategy: policy.strategy,
        epsilon: policy.epsilon,
        budget,
        total_kept,
        per_branch,
    })
}

/// Zeroes interaction entries below `threshold` (or, when `None`, below
/// 1% of each branch's largest |T|) and freezes every interaction matrix.
/// Returns the number of entries zeroed.
pub fn sparsify_interaction(student: &mut Student, threshold: Option<f32>) -> Result<usize> {
    if let Some(t) = threshold {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::config(format!("keep threshold must be finite and ≥ 0, got {t}")));
        }
    }
    if let Some((i, k, _)) = student.branches().find(|(_, _, b)| b.state == BranchState::Dense) {
        return Err(Error::usage(format!(
            "block {i} shortcut {k} is dense; run channel selection before sparsification"
        )));
    }
    let mut zeroed = 0;
    for (_, _, b) in student.branches_mut() {
        let thr = match (threshold, &b.interaction) {
            (Some(t), _) => t,
            (None, Some(m)) => DEFAULT_RELATIVE_THRESHOLD * m.max_abs(),
            (None, None) => 0.0,
        };
        zeroed += b.sparsify(thr)?;
    }
    Ok(zeroed)
}

/// Shortcut parameter bits over main-branch parameter bits.
pub fn overhead_fraction(student: &Student) -> f64 {
    cost_of(&student.spec, &CompressionState::from_student(student)).overhead_fraction()
}

/// Fixed per-branch bits the channel budget does not control, relative to
/// main-branch bits: one 32-bit threshold per surviving branch.
pub fn rounding_slack(student: &Student) -> f64 {
    let live = student
        .branches()
        .filter(|(_, _, b)| b.state != BranchState::Dead)
        .count();
    cost_of(&student.spec, &CompressionState::from_student(student)).rounding_slack(live)
}
