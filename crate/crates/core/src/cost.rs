//! Static FLOPs and model-size accounting.
//!
//! Conventions:
//! - only multiplications are counted;
//! - `effective_flops = float_ops + binary_ops / 64`;
//! - a binary weight costs 1 bit, every real 32 bits, and sizes are
//!   reported in decimal megabits (10⁶ bits);
//! - BN contributes two reals per channel (γ, β); running statistics are
//!   buffers and not counted;
//! - every binarised layer carries one 32-bit input threshold;
//! - hidden fully-connected layers have no bias (BN follows them); the
//!   final classifier has one.

use std::fmt::Write as _;

use crate::network::{BranchState, NetworkSpec, Student};

const REAL_BITS: u64 = 32;

/// Whether binarisable layers are counted as binary or float.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Every layer at full precision, shortcuts ignored.
    Full,
    /// Layers flagged `binarized` count as 1-bit.
    Binary,
}

/// What the cost model needs to know about one shortcut branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchCost {
    pub state: BranchState,
    /// Computed squeeze channels `S`.
    pub channels: usize,
    /// Nonzero interaction entries (ignored while dense).
    pub interaction_nnz: usize,
}

/// How the interaction matrix of a calibration profile is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InteractionFill {
    /// One entry per kept channel (the initial pattern, or a fully
    /// sparsified matrix).
    Diagonal,
    /// Every `S × C'` entry nonzero (trained, not sparsified).
    Dense,
}

/// Compression state of a network as seen by the cost model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressionState {
    pub precision: Precision,
    /// `branches[block][k]`.
    pub branches: Vec<Vec<BranchCost>>,
}

impl CompressionState {
    pub fn full_precision(spec: &NetworkSpec) -> Self {
        CompressionState {
            precision: Precision::Full,
            branches: spec.blocks.iter().map(|_| Vec::new()).collect(),
        }
    }

    /// Binary network with every declared shortcut dense.
    pub fn dense(spec: &NetworkSpec) -> Self {
        CompressionState {
            precision: Precision::Binary,
            branches: spec
                .blocks
                .iter()
                .map(|b| {
                    (0..b.num_shortcuts)
                        .map(|_| BranchCost {
                            state: BranchState::Dense,
                            channels: b.c_out,
                            interaction_nnz: 0,
                        })
                        .collect()
                })
                .collect(),
        }
    }

    /// One selected branch per block keeping `kept[i]` channels.
    pub fn profile(spec: &NetworkSpec, kept: &[usize], fill: InteractionFill) -> Self {
        CompressionState {
            precision: Precision::Binary,
            branches: spec
                .blocks
                .iter()
                .zip(kept)
                .map(|(b, &s)| {
                    vec![if s == 0 {
                        BranchCost {
                            state: BranchState::Dead,
                            channels: 0,
                            interaction_nnz: 0,
                        }
                    } else {
                        BranchCost {
                            state: match fill {
                                InteractionFill::Diagonal => BranchState::Sparsified,
                                InteractionFill::Dense => BranchState::Selected,
                            },
                            channels: s,
                            interaction_nnz: match fill {
                                InteractionFill::Diagonal => s,
                                InteractionFill::Dense => s * b.c_out,
                            },
                        }
                    }]
                })
                .collect(),
        }
    }

    pub fn from_student(student: &Student) -> Self {
        CompressionState {
            precision: Precision::Binary,
            branches: student
                .blocks
                .iter()
                .map(|b| {
                    b.shortcuts
                        .iter()
                        .map(|s| BranchCost {
                            state: s.state,
                            channels: s.channels(),
                            interaction_nnz: s.interaction_nnz(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Reference selection profiles used to cost the `K = 1` rows of the
/// comparison tables. Kept-channel counts depend on trained ω, so the cost
/// table uses these fixed profiles. Both keep fewer than `⌊0.1·ΣC'⌋`
/// channels.
pub mod calibration {
    use super::InteractionFill;

    /// VGG-small, ε = 0.1: 166 of 1664 channels, interaction sparsified to
    /// one entry per kept channel.
    pub const VGG_SMALL_K1: ([usize; 5], InteractionFill) = ([60, 80, 16, 6, 4], InteractionFill::Diagonal);
    /// ResNet18, ε = 0.1 per stage output width, interaction trained dense.
    pub const RESNET18_K1: ([usize; 4], InteractionFill) = ([44, 48, 56, 60], InteractionFill::Dense);
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub binary_ops: u64,
    pub float_ops: u64,
    pub param_bits: u64,
    /// Shortcut-branch share of the three fields above (blocks only).
    pub shortcut_binary_ops: u64,
    pub shortcut_float_ops: u64,
    pub shortcut_bits: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub float_ops: u64,
    pub binary_ops: u64,
    pub effective_flops: f64,
    pub size_mbits: f64,
    pub param_bits: u64,
    /// Main-branch parameter bits of all blocks (excludes stem and head).
    pub main_bits: u64,
    pub shortcut_bits: u64,
    /// Stem, blocks, hidden FCs and classifier, in order.
    pub per_block: Vec<LayerCost>,
}

impl CostReport {
    /// Shortcut parameter bits over block main-branch parameter bits.
    pub fn overhead_fraction(&self) -> f64 {
        if self.main_bits == 0 {
            0.0
        } else {
            self.shortcut_bits as f64 / self.main_bits as f64
        }
    }

    /// Fixed per-branch bits (the shortcut threshold) over main bits: the
    /// slack a channel budget cannot control.
    pub fn rounding_slack(&self, live_branches: usize) -> f64 {
        if self.main_bits == 0 {
            0.0
        } else {
            (live_branches as u64 * REAL_BITS) as f64 / self.main_bits as f64
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &LayerCost> {
        self.per_block.iter().filter(|l| l.name.starts_with("block:"))
    }
}

/// Parameter bits of one shortcut branch.
pub fn branch_bits(branch: &BranchCost, c_in: usize, kernel: usize) -> u64 {
    let s = branch.channels as u64;
    let l = (c_in * kernel * kernel) as u64;
    match branch.state {
        BranchState::Dead => 0,
        BranchState::Dense => s * l + REAL_BITS * (s + 1),
        BranchState::Selected | BranchState::Sparsified => s * l + REAL_BITS * (s + branch.interaction_nnz as u64 + 1),
    }
}

/// Per-channel bits used by the channel budget: one binary kernel row, ω,
/// and the initial interaction entry.
pub fn selected_channel_bits(c_in: usize, kernel: usize) -> u64 {
    (c_in * kernel * kernel) as u64 + 2 * REAL_BITS
}

/// Main-branch parameter bits of block `i`.
pub fn block_main_bits(spec: &NetworkSpec, i: usize, precision: Precision) -> u64 {
    let b = &spec.blocks[i];
    let binary = precision == Precision::Binary && b.binarized;
    let mut bits = 0;
    for j in 0..b.depth {
        let c_in = if j == 0 { b.c_in } else { b.c_out };
        let weights = (b.c_out * c_in * b.kernel * b.kernel) as u64;
        bits += if binary {
            weights + REAL_BITS
        } else {
            weights * REAL_BITS
        };
        bits += 2 * REAL_BITS * b.c_out as u64;
    }
    if b.projection {
        bits += REAL_BITS * (b.c_out * b.c_in) as u64 + 2 * REAL_BITS * b.c_out as u64;
    }
    bits
}

pub fn cost_of(spec: &NetworkSpec, state: &CompressionState) -> CostReport {
    let mut layers = Vec::new();
    let s = &spec.stem;
    let (sh, sw) = spec.stem_conv_output();
    let stem_weights = (s.c_out * spec.input.channels * s.kernel * s.kernel) as u64;
    layers.push(LayerCost {
        name: "stem".into(),
        float_ops: stem_weights * (sh * sw) as u64,
        param_bits: REAL_BITS * stem_weights + 2 * REAL_BITS * s.c_out as u64,
        ..Default::default()
    });

    let mut main_bits = 0;
    for (i, (b, g)) in spec.blocks.iter().zip(spec.block_geometry()).enumerate() {
        let binary = state.precision == Precision::Binary && b.binarized;
        let positions = (g.h_out * g.w_out) as u64;
        let mut layer = LayerCost {
            name: format!("block:{}", b.name),
            ..Default::default()
        };
        for j in 0..b.depth {
            let c_in = if j == 0 { b.c_in } else { b.c_out };
            let mults = (b.c_out * c_in * b.kernel * b.kernel) as u64 * positions;
            if binary {
                layer.binary_ops += mults;
            } else {
                layer.float_ops += mults;
            }
        }
        if b.projection {
            layer.float_ops += (b.c_out * b.c_in) as u64 * positions;
        }
        layer.param_bits = block_main_bits(spec, i, state.precision);
        main_bits += layer.param_bits;
        if state.precision == Precision::Binary {
            for br in state.branches.get(i).map(|v| v.as_slice()).unwrap_or(&[]) {
                let sq = br.channels as u64;
                let l = (b.c_in * b.kernel * b.kernel) as u64;
                let (bin, flt) = match br.state {
                    BranchState::Dead => (0, 0),
                    BranchState::Dense => (sq * l * positions, sq * positions),
                    BranchState::Selected | BranchState::Sparsified => {
                        (sq * l * positions, (sq + br.interaction_nnz as u64) * positions)
                    }
                };
                layer.shortcut_binary_ops += bin;
                layer.shortcut_float_ops += flt;
                layer.shortcut_bits += branch_bits(br, b.c_in, b.kernel);
            }
        }
        layer.binary_ops += layer.shortcut_binary_ops;
        layer.float_ops += layer.shortcut_float_ops;
        layer.param_bits += layer.shortcut_bits;
        layers.push(layer);
    }

    let fcs = spec.fc_layers();
    for (j, &(fin, fout)) in fcs.iter().enumerate() {
        let mults = (fin * fout) as u64;
        let last = j + 1 == fcs.len();
        let layer = if last {
            LayerCost {
                name: "head".into(),
                float_ops: mults,
                param_bits: REAL_BITS * (mults + fout as u64),
                ..Default::default()
            }
        } else if state.precision == Precision::Binary {
            LayerCost {
                name: format!("fc{j}"),
                binary_ops: mults,
                param_bits: mults + REAL_BITS + 2 * REAL_BITS * fout as u64,
                ..Default::default()
            }
        } else {
            LayerCost {
                name: format!("fc{j}"),
                float_ops: mults,
                param_bits: REAL_BITS * mults + 2 * REAL_BITS * fout as u64,
                ..Default::default()
            }
        };
        layers.push(layer);
    }

    let float_ops: u64 = layers.iter().map(|l| l.float_ops).sum();
    let binary_ops: u64 = layers.iter().map(|l| l.binary_ops).sum();
    let param_bits: u64 = layers.iter().map(|l| l.param_bits).sum();
    let shortcut_bits: u64 = layers.iter().map(|l| l.shortcut_bits).sum();
    CostReport {
        float_ops,
        binary_ops,
        effective_flops: float_ops as f64 + binary_ops as f64 / 64.0,
        size_mbits: param_bits as f64 / 1e6,
        param_bits,
        main_bits,
        shortcut_bits,
        per_block: layers,
    }
}

/// Tab-separated comparison table, one row per `(label, report)`.
pub fn cost_table(rows: &[(String, CostReport)]) -> String {
    let mut out = String::from("model\tfloat_ops\tbinary_ops\teffective_flops\tsize_mbits\toverhead\n");
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label}\t{}\t{}\t{:.4e}\t{:.2}\t{:.4}",
            r.float_ops,
            r.binary_ops,
            r.effective_flops,
            r.size_mbits,
            r.overhead_fraction()
        );
    }
    out
}

/// Tab-separated per-block breakdown: main and shortcut operations (in
/// millions) and the shortcut parameter overhead of every block.
pub fn block_table(report: &CostReport) -> String {
    let mut out = String::from(
        "block\tmain_binary_mops\tmain_float_mops\tshortcut_binary_mops\tshortcut_float_mops\tmain_bits\tshortcut_bits\toverhead\n",
    );
    for l in report.blocks() {
        let main_bits = l.param_bits - l.shortcut_bits;
        let _ = writeln!(
            out,
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}\t{}\t{:.4}",
            l.name.trim_start_matches("block:"),
            (l.binary_ops - l.shortcut_binary_ops) as f64 / 1e6,
            (l.float_ops - l.shortcut_float_ops) as f64 / 1e6,
            l.shortcut_binary_ops as f64 / 1e6,
            l.shortcut_float_ops as f64 / 1e6,
            main_bits,
            l.shortcut_bits,
            l.shortcut_bits as f64 / main_bits as f64
        );
    }
    out
}

/// The standard comparison rows for a spec: full precision, binary `K = 0`
/// and, when a calibration profile exists, the `K = 1` reference state.
pub fn standard_rows(spec: &NetworkSpec) -> Vec<(String, CostReport)> {
    let k0 = spec.clone().with_shortcuts(0);
    let mut rows = vec![
        (
            "full-precision".to_string(),
            cost_of(&k0, &CompressionState::full_precision(&k0)),
        ),
        ("binary K=0".to_string(), cost_of(&k0, &CompressionState::dense(&k0))),
    ];
    let k1 = spec.clone().with_shortcuts(1);
    let profile = match (spec.name.as_str(), spec.blocks.len()) {
        ("vgg-small", 5) => Some((calibration::VGG_SMALL_K1.0.to_vec(), calibration::VGG_SMALL_K1.1)),
        ("resnet18", 4) => Some((calibration::RESNET18_K1.0.to_vec(), calibration::RESNET18_K1.1)),
        _ => None,
    };
    if let Some((kept, fill)) = profile {
        rows.push((
            "K=1 eps=0.1".to_string(),
            cost_of(&k1, &CompressionState::profile(&k1, &kept, fill)),
        ));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = cost_table(&[]);
        assert_eq!(t.lines().count(), 1);
        assert!(t.starts_with("model\t"));
    }

    #[test]
    fn effective_flops_identity() {
        let spec = NetworkSpec::vgg_small(1).unwrap();
        for row in standard_rows(&spec) {
            let r = row.1;
            assert_eq!(r.effective_flops, r.float_ops as f64 + r.binary_ops as f64 / 64.0);
            assert_eq!(r.size_mbits, r.param_bits as f64 / 1e6);
        }
    }

    #[test]
    fn k0_shortcut_fields_are_zero() {
        let spec = NetworkSpec::vgg_small(1).unwrap();
        let r = cost_of(&spec, &CompressionState::dense(&spec));
        assert_eq!(r.shortcut_bits, 0);
        assert_eq!(r.overhead_fraction(), 0.0);
        assert!(r
            .blocks()
            .all(|l| l.shortcut_binary_ops == 0 && l.shortcut_float_ops == 0));
    }

    #[test]
    fn dense_mirrored_branch_is_about_one() {
        let spec = NetworkSpec::vgg_small(1).unwrap().with_shortcuts(1);
        let r = cost_of(&spec, &CompressionState::dense(&spec));
        assert!((r.overhead_fraction() - 1.0).abs() < 0.02, "{}", r.overhead_fraction());
    }

    #[test]
    fn adding_a_branch_never_decreases_cost() {
        let spec = NetworkSpec::vgg_small(1).unwrap();
        let base = cost_of(&spec, &CompressionState::dense(&spec));
        for k in 1..3 {
            let s = spec.clone().with_shortcuts(k);
            let r = cost_of(&s, &CompressionState::dense(&s));
            assert!(r.float_ops >= base.float_ops && r.binary_ops >= base.binary_ops);
            assert!(r.param_bits >= base.param_bits);
        }
    }

    #[test]
    fn block_table_has_one_row_per_block() {
        let spec = NetworkSpec::resnet18().with_shortcuts(1);
        let r = cost_of(&spec, &CompressionState::dense(&spec));
        assert_eq!(block_table(&r).lines().count(), 1 + spec.blocks.len());
    }
}
