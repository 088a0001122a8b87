//! Declarative architecture shared by the student, the teacher and the cost model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl PoolSpec {
    pub const fn two_by_two() -> Self {
        PoolSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
        }
    }
}

/// The first convolution, always kept at full precision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

/// One distillation unit: a stack of `depth` convolutions whose output is
/// matched against the teacher. Only `depth = 1` without projection runs;
/// deeper stages are encodable for costing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "default_true")]
    pub binarized: bool,
    #[serde(default)]
    pub num_shortcuts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_after: Option<PoolSpec>,
    /// Convolutions in the stage; the first carries `stride`, later ones map
    /// `c_out → c_out` at stride 1.
    #[serde(default = "default_one")]
    pub depth: usize,
    /// Float 1×1 projection on the stage's identity path (residual stages).
    #[serde(default)]
    pub projection: bool,
}

impl BlockSpec {
    pub fn binary(name: &str, c_in: usize, c_out: usize, pool_after: bool) -> Self {
        BlockSpec {
            name: name.to_string(),
            c_in,
            c_out,
            kernel: 3,
            stride: 1,
            padding: 1,
            binarized: true,
            num_shortcuts: 0,
            pool_after: pool_after.then(PoolSpec::two_by_two),
            depth: 1,
            projection: false,
        }
    }

    /// `(C_in, H, W)` → output `(H', W')` of the stage's first convolution.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_output_size(h, self.kernel, self.stride, self.padding)?,
            conv_output_size(w, self.kernel, self.stride, self.padding)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Average over space before the classifier instead of flattening.
    #[serde(default)]
    pub global_avg_pool: bool,
    /// Widths of hidden fully-connected layers (binarised in the student).
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputSpec,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub head: HeadSpec,
}

fn pooled(h: usize, w: usize, pool: &PoolSpec) -> Option<(usize, usize)> {
    Some((
        conv_output_size(h, pool.kernel, pool.stride, pool.padding)?,
        conv_output_size(w, pool.kernel, pool.stride, pool.padding)?,
    ))
}

/// Spatial geometry of one block as seen by the cost model and the runtime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    /// Input extent.
    pub h_in: usize,
    pub w_in: usize,
    /// Extent of the block's (pre-pool) output.
    pub h_out: usize,
    pub w_out: usize,
}

impl NetworkSpec {
    /// VGG-small for 32×32 inputs: a float 3×3 stem, five binarised 3×3
    /// blocks with 2×2 pooling after blocks 0, 2 and 4, and two hidden
    /// fully-connected layers. `width_divisor` shrinks every width (4 gives
    /// the desk-scale profile).
    pub fn vgg_small(width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 || 128 % width_divisor != 0 {
            return Err(Error::config(format!(
                "width_divisor must divide 128, got {width_divisor}"
            )));
        }
        let d = width_divisor;
        let (a, b, c) = (128 / d, 256 / d, 512 / d);
        Ok(NetworkSpec {
            name: if d == 1 {
                "vgg-small".into()
            } else {
                format!("vgg-small/{d}")
            },
            input: InputSpec {
                channels: 3,
                height: 32,
                width: 32,
            },
            stem: StemSpec {
                c_out: a,
                kernel: 3,
                stride: 1,
                padding: 1,
                pool: None,
            },
            blocks: vec![
                BlockSpec::binary("conv1", a, a, true),
                BlockSpec::binary("conv2", a, b, false),
                BlockSpec::binary("conv3", b, b, true),
                BlockSpec::binary("conv4", b, c, false),
                BlockSpec::binary("conv5", c, c, true),
            ],
            head: HeadSpec {
                global_avg_pool: false,
                hidden: vec![1024 / d, 1024 / d],
                classes: 10,
            },
        })
    }

    /// ResNet18 for 224×224 inputs with one distillation unit per stage.
    /// Encodable and costable; not runnable.
    pub fn resnet18() -> Self {
        let stage = |name: &str, c_in: usize, c_out: usize, stride: usize| BlockSpec {
            name: name.to_string(),
            c_in,
            c_out,
            kernel: 3,
            stride,
            padding: 1,
            binarized: true,
            num_shortcuts: 0,
            pool_after: None,
            depth: 4,
            projection: stride != 1 || c_in != c_out,
        };
        NetworkSpec {
            name: "resnet18".into(),
            input: InputSpec {
                channels: 3,
                height: 224,
                width: 224,
            },
            stem: StemSpec {
                c_out: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                pool: Some(PoolSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }),
            },
            blocks: vec![
                stage("stage1", 64, 64, 1),
                stage("stage2", 64, 128, 2),
                stage("stage3", 128, 256, 2),
                stage("stage4", 256, 512, 2),
            ],
            head: HeadSpec {
                global_avg_pool: true,
                hidden: vec![],
                classes: 1000,
            },
        }
    }

    /// Two binarised blocks on 8×8 inputs, small enough for exhaustive
    /// finite-difference checks.
    pub fn toy() -> Self {
        NetworkSpec {
            name: "toy".into(),
            input: InputSpec {
                channels: 3,
                height: 8,
                width: 8,
            },
            stem: StemSpec {
                c_out: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
                pool: None,
            },
            blocks: vec![
                BlockSpec::binary("conv1", 8, 8, true),
                BlockSpec::binary("conv2", 8, 16, true),
            ],
            head: HeadSpec {
                global_avg_pool: false,
                hidden: vec![16],
                classes: 10,
            },
        }
    }

    pub fn preset(name: &str, width_divisor: usize) -> Result<Self> {
        match name {
            "vgg-small" => Self::vgg_small(width_divisor),
            "resnet18" => Ok(Self::resnet18()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(format!(
                "unknown network preset {other:?} (expected vgg-small, resnet18 or toy)"
            ))),
        }
    }

    /// Sets `K` on every block.
    pub fn with_shortcuts(mut self, k: usize) -> Self {
        for b in &mut self.blocks {
            b.num_shortcuts = k;
        }
        self
    }

    pub fn num_shortcuts(&self) -> usize {
        self.blocks.iter().map(|b| b.num_shortcuts).sum()
    }

    /// Checks channel compatibility and that every layer produces output.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config(format!("network {:?} has no blocks", self.name)));
        }
        if self.head.classes == 0 || self.head.hidden.contains(&0) {
            return Err(Error::config("head widths must be positive"));
        }
        let mut c = self.input.channels;
        let (mut h, mut w) = (self.input.height, self.input.width);
        let stem = &self.stem;
        let fail = |what: &str| Error::config(format!("network {:?}: {what}", self.name));
        if c == 0 || h == 0 || w == 0 || stem.c_out == 0 || stem.kernel == 0 {
            return Err(fail("zero-sized input or stem"));
        }
        (h, w) = match (
            conv_output_size(h, stem.kernel, stem.stride, stem.padding),
            conv_output_size(w, stem.kernel, stem.stride, stem.padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(fail("stem leaves no output")),
        };
        if let Some(p) = &stem.pool {
            (h, w) = pooled(h, w, p).ok_or_else(|| fail("stem pool leaves no output"))?;
        }
        c = stem.c_out;
        for b in &self.blocks {
            if b.c_in != c {
                return Err(fail(&format!(
                    "block {:?} expects {} input channels but receives {c}",
                    b.name, b.c_in
                )));
            }
            if b.c_out == 0 || b.kernel == 0 || b.depth == 0 {
                return Err(fail(&format!("block {:?} has a zero-sized field", b.name)));
            }
            (h, w) = b
                .conv_out(h, w)
                .ok_or_else(|| fail(&format!("block {:?} leaves no output", b.name)))?;
            if b.depth > 1 && conv_output_size(h, b.kernel, 1, b.padding) != Some(h) {
                return Err(fail(&format!(
                    "block {:?}: stacked convolutions must preserve size",
                    b.name
                )));
            }
            if let Some(p) = &b.pool_after {
                (h, w) = pooled(h, w, p).ok_or_else(|| fail(&format!("pool after {:?} leaves no output", b.name)))?;
            }
            c = b.c_out;
        }
        Ok(())
    }

    /// Additionally rejects constructs that are only encodable for costing.
    pub fn validate_runtime(&self) -> Result<()> {
        self.validate()?;
        if let Some(b) = self.blocks.iter().find(|b| b.depth != 1 || b.projection) {
            return Err(Error::config(format!(
                "network {:?}: block {:?} (depth {}, projection {}) is cost-only; \
                 runnable blocks have depth 1 and no projection",
                self.name, b.name, b.depth, b.projection
            )));
        }
        if self.head.global_avg_pool {
            return Err(Error::config(format!(
                "network {:?}: global average pooling head is cost-only",
                self.name
            )));
        }
        Ok(())
    }

    /// Extent after the stem (including its pool).
    pub fn stem_output(&self) -> (usize, usize) {
        let s = &self.stem;
        let h = conv_output_size(self.input.height, s.kernel, s.stride, s.padding).unwrap_or(0);
        let w = conv_output_size(self.input.width, s.kernel, s.stride, s.padding).unwrap_or(0);
        match &s.pool {
            Some(p) => pooled(h, w, p).unwrap_or((0, 0)),
            None => (h, w),
        }
    }

    /// Stem convolution output before its pool.
    pub fn stem_conv_output(&self) -> (usize, usize) {
        let s = &self.stem;
        (
            conv_output_size(self.input.height, s.kernel, s.stride, s.padding).unwrap_or(0),
            conv_output_size(self.input.width, s.kernel, s.stride, s.padding).unwrap_or(0),
        )
    }

    /// Per-block geometry; call on a validated spec.
    pub fn block_geometry(&self) -> Vec<BlockGeometry> {
        let (mut h, mut w) = self.stem_output();
        self.blocks
            .iter()
            .map(|b| {
                let (ho, wo) = b.conv_out(h, w).unwrap_or((0, 0));
                let g = BlockGeometry {
                    h_in: h,
                    w_in: w,
                    h_out: ho,
                    w_out: wo,
                };
                (h, w) = match &b.pool_after {
                    Some(p) => pooled(ho, wo, p).unwrap_or((0, 0)),
                    None => (ho, wo),
                };
                g
            })
            .collect()
    }

    /// Shapes of the per-block (pre-pool) features for a batch of `n`.
    pub fn feature_shapes(&self, n: usize) -> Vec<Shape> {
        self.blocks
            .iter()
            .zip(self.block_geometry())
            .map(|(b, g)| [n, b.c_out, g.h_out, g.w_out])
            .collect()
    }

    /// Width entering the fully-connected head.
    pub fn flatten_dim(&self) -> usize {
        let last = self.blocks.last().expect("validated spec has blocks");
        if self.head.global_avg_pool {
            return last.c_out;
        }
        let g = *self.block_geometry().last().expect("non-empty");
        let (h, w) = match &last.pool_after {
            Some(p) => pooled(g.h_out, g.w_out, p).unwrap_or((0, 0)),
            None => (g.h_out, g.w_out),
        };
        last.c_out * h * w
    }

    /// `(fan_in, fan_out)` of every fully-connected layer, final one last.
    pub fn fc_layers(&self) -> Vec<(usize, usize)> {
        let mut fin = self.flatten_dim();
        let mut out = Vec::new();
        for &hidden in &self.head.hidden {
            out.push((fin, hidden));
            fin = hidden;
        }
        out.push((fin, self.head.classes));
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network spec serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("network spec: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_small_has_five_binarised_blocks() {
        let spec = NetworkSpec::vgg_small(1).unwrap();
        spec.validate_runtime().unwrap();
        assert_eq!(spec.blocks.len(), 5);
        assert!(spec.blocks.iter().all(|b| b.binarized));
        let c_prime: Vec<usize> = spec.blocks.iter().map(|b| b.c_out).collect();
        assert_eq!(c_prime, vec![128, 256, 256, 512, 512]);
        assert_eq!(spec.flatten_dim(), 512 * 4 * 4);
    }

    #[test]
    fn desk_profile_widths() {
        let spec = NetworkSpec::vgg_small(4).unwrap();
        assert_eq!(spec.stem.c_out, 32);
        let widths: Vec<usize> = spec.blocks.iter().map(|b| b.c_out).collect();
        assert_eq!(widths, vec![32, 64, 64, 128, 128]);
        assert_eq!(spec.head.hidden, vec![256, 256]);
    }

    #[test]
    fn feature_shapes_follow_pooling() {
        let spec = NetworkSpec::vgg_small(1).unwrap();
        let shapes = spec.feature_shapes(2);
        assert_eq!(shapes[0], [2, 128, 32, 32]);
        assert_eq!(shapes[1], [2, 256, 16, 16]);
        assert_eq!(shapes[4], [2, 512, 8, 8]);
    }

    #[test]
    fn resnet18_is_cost_only() {
        let spec = NetworkSpec::resnet18();
        spec.validate().unwrap();
        assert_eq!(spec.stem_output(), (56, 56));
        let geo = spec.block_geometry();
        assert_eq!((geo[3].h_out, geo[3].w_out), (7, 7));
        assert!(matches!(spec.validate_runtime(), Err(Error::Config(_))));
    }

    #[test]
    fn incompatible_channels_rejected() {
        let mut spec = NetworkSpec::toy();
        spec.blocks[1].c_in = 9;
        let msg = spec.validate().unwrap_err().to_string();
        assert!(msg.contains("conv2"), "{msg}");
    }

    #[test]
    fn toml_round_trip() {
        for spec in [
            NetworkSpec::vgg_small(2).unwrap(),
            NetworkSpec::resnet18(),
            NetworkSpec::toy().with_shortcuts(2),
        ] {
            let back = NetworkSpec::from_toml(&spec.to_toml()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = NetworkSpec::toy().to_toml();
        text = text.replacen("name = \"toy\"", "name = \"toy\"\nbogus = 1", 1);
        assert!(NetworkSpec::from_toml(&text).is_err());
    }
}
