//! Biased-sign binarisation, bit packing and XNOR/popcount convolution.
//!
//! A `+1` is stored as a set bit and `−1` as a clear bit, least significant
//! bit first. Rows along `W` are padded to whole 64-bit words; pad bits are
//! always clear and never counted.

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Shape, Tensor};

const WORD: usize = 64;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

/// Bit-packed ±1 tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// Packs a tensor whose entries are all exactly ±1.
    pub fn pack(x: &Tensor) -> Result<Self> {
        let shape = x.shape();
        let w = shape[3];
        let rows = shape[0] * shape[1] * shape[2];
        let words_per_row = words_for(w);
        let mut words = vec![0u64; rows * words_per_row];
        for (r, row) in x.data().chunks(w).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v == 1.0 {
                    words[r * words_per_row + j / WORD] |= 1 << (j % WORD);
                } else if v != -1.0 {
                    return Err(Error::usage(format!(
                        "pack needs ±1 entries, found {v} at flat index {}",
                        r * w + j
                    )));
                }
            }
        }
        Ok(BitTensor {
            shape,
            words_per_row,
            words,
        })
    }

    pub fn unpack(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for r in 0..n * c * h {
            for j in 0..w {
                data.push(if self.row_bit(r, j) { 1.0 } else { -1.0 });
            }
        }
        Tensor::from_parts(self.shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Mask of valid bits in the final word of every row.
    pub fn pad_mask(&self) -> u64 {
        match self.shape[3] % WORD {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }

    #[inline]
    fn row_bit(&self, row: usize, j: usize) -> bool {
        self.words[row * self.words_per_row + j / WORD] >> (j % WORD) & 1 == 1
    }

    /// `true` for `+1`.
    #[inline]
    pub fn get(&self, [n, c, h, w]: [usize; 4]) -> bool {
        let row = (n * self.shape[1] + c) * self.shape[2] + h;
        self.row_bit(row, w)
    }

    /// Number of `+1` entries; pad bits are excluded by construction.
    pub fn count_ones(&self) -> u64 {
        let mask = self.pad_mask();
        self.words
            .chunks(self.words_per_row)
            .map(|row| {
                let (last, body) = row.split_last().expect("rows hold at least one word");
                body.iter().map(|w| w.count_ones() as u64).sum::<u64>() + (last & mask).count_ones() as u64
            })
            .sum()
    }
}

/// Hard biased sign: −1 where `x ≤ t`, +1 where `x > t`.
pub fn biased_sign(x: &Tensor, t: f32) -> Tensor {
    x.map(|v| if v > t { 1.0 } else { -1.0 })
}

/// Straight-through gradient `upstream ⊙ 1[|x − t| < 1]`.
///
/// The gradient with respect to `t` is the negated sum of this result.
pub fn ste_backward(upstream: &[f32], x: &[f32], t: f32) -> Vec<f32> {
    debug_assert_eq!(upstream.len(), x.len());
    upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| if (v - t).abs() < 1.0 { g } else { 0.0 })
        .collect()
}

/// Packs `sign(θ*, 0)`.
pub fn binarize_weights(theta_star: &Tensor) -> BitTensor {
    BitTensor::pack(&biased_sign(theta_star, 0.0)).expect("biased_sign yields ±1")
}

/// ±1 convolution via `L − 2·popcount(a ⊕ b)`, padding with −1.
pub fn conv2d_xnor(input: &BitTensor, kernel: &BitTensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let l = g.patch_len();
    let wpp = words_for(l);
    let p = g.positions();

    // Kernel rows flattened in (c, kh, kw) order.
    let mut krows = vec![0u64; g.c_out * wpp];
    for co in 0..g.c_out {
        for c in 0..g.c_in {
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let bit = (c * g.k + kh) * g.k + kw;
                    if kernel.get([co, c, kh, kw]) {
                        krows[co * wpp + bit / WORD] |= 1 << (bit % WORD);
                    }
                }
            }
        }
    }

    let mut out = vec![0.0f32; g.n * g.c_out * p];
    let mut patches = vec![0u64; p * wpp];
    for n in 0..g.n {
        patches.iter_mut().for_each(|w| *w = 0);
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let patch = &mut patches[(oh * g.w_out + ow) * wpp..][..wpp];
                for c in 0..g.c_in {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            // padding taps stay clear, i.e. −1
                            if let Some((ih, iw)) = g.source(oh, ow, kh, kw) {
                                if input.get([n, c, ih, iw]) {
                                    let bit = (c * g.k + kh) * g.k + kw;
                                    patch[bit / WORD] |= 1 << (bit % WORD);
                                }
                            }
                        }
                    }
                }
            }
        }
        for co in 0..g.c_out {
            let krow = &krows[co * wpp..(co + 1) * wpp];
            let dst = &mut out[(n * g.c_out + co) * p..(n * g.c_out + co + 1) * p];
            for (pos, d) in dst.iter_mut().enumerate() {
                let patch = &patches[pos * wpp..(pos + 1) * wpp];
                let disagree: u32 = krow.iter().zip(patch).map(|(a, b)| (a ^ b).count_ones()).sum();
                *d = (l as i64 - 2 * disagree as i64) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}
