//! Value-level numeric kernels shared by the tape and by the oracles.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Output extent of a strided, padded window: `(size + 2·pad − k)/stride + 1`.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = input;
        let [c_out, kc, kh, kw] = kernel;
        if kc != c_in || kh != kw {
            return Err(Error::config(format!(
                "conv shape mismatch: input {input:?} vs kernel {kernel:?} \
                 (kernel must be (C_out, C_in, k, k) with C_in = {c_in})"
            )));
        }
        let (h_out, w_out) = match (
            conv_output_size(h, kh, stride, pad),
            conv_output_size(w, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::config(format!(
                    "conv shape mismatch: input {input:?} vs kernel {kernel:?} \
                     with stride {stride}, padding {pad} leaves no output"
                )))
            }
        };
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// Receptive-field length `C_in·k·k`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_shape(&self) -> Shape {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    /// Input coordinate for output `(oh, ow)` and kernel tap `(kh, kw)`,
    /// or `None` when the tap lands in the padding.
    #[inline]
    pub fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
        let iw = (ow * self.stride + kw) as isize - self.pad as isize;
        if ih < 0 || iw < 0 || ih as usize >= self.h || iw as usize >= self.w {
            None
        } else {
            Some((ih as usize, iw as usize))
        }
    }
}

/// Lays one sample's receptive fields out as an `(L, P)` row-major matrix.
pub(crate) fn im2col(sample: &[f32], g: &ConvGeom, pad_value: f32, cols: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    for ow in 0..g.w_out {
                        dst[oh * g.w_out + ow] = match g.source(oh, ow, kh, kw) {
                            Some((ih, iw)) => plane[ih * g.w + iw],
                            None => pad_value,
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds an `(L, P)` column gradient back onto one sample.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, sample_grad: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut sample_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    for ow in 0..g.w_out {
                        if let Some((ih, iw)) = g.source(oh, ow, kh, kw) {
                            plane[ih * g.w + iw] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index touched under the given strides
    // (checked above in debug builds; guaranteed by ConvGeom in callers).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    pad_value: f32,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let l = g.patch_len();
    let p = g.positions();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * p;
    let mut out = vec![0.0f32; g.n * out_per];
    let mut cols = vec![0.0f32; l * p];
    for n in 0..g.n {
        im2col(&input.data()[n * in_per..(n + 1) * in_per], &g, pad_value, &mut cols);
        gemm(
            g.c_out,
            l,
            p,
            kernel.data(),
            (l, 1),
            &cols,
            (p, 1),
            0.0,
            &mut out[n * out_per..(n + 1) * out_per],
        );
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gradients of a convolution with respect to its input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f32],
    stride: usize,
    pad: usize,
    pad_value: f32,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad).expect("geometry validated in forward");
    let l = g.patch_len();
    let p = g.positions();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * p;
    let mut d_input = want_input.then(|| vec![0.0f32; input.len()]);
    let mut d_kernel = want_kernel.then(|| vec![0.0f32; kernel.len()]);
    let mut cols = vec![0.0f32; l * p];
    let mut d_cols = vec![0.0f32; l * p];
    for n in 0..g.n {
        let dy = &grad_out[n * out_per..(n + 1) * out_per];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input.data()[n * in_per..(n + 1) * in_per], &g, pad_value, &mut cols);
            // dK (Co×L) += dY (Co×P) · colsᵀ (P×L)
            gemm(g.c_out, p, l, dy, (p, 1), &cols, (1, p), 1.0, dk);
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols (L×P) = Kᵀ (L×Co) · dY (Co×P)
            gemm(l, g.c_out, p, kernel.data(), (1, l), dy, (p, 1), 0.0, &mut d_cols);
            col2im(&d_cols, &g, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    (d_input, d_kernel)
}

/// Standard zero-padded cross-correlation.
pub fn conv2d_real(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv_forward(input, kernel, stride, padding, 0.0)
}

/// Pads both spatial axes by `pad` with a constant.
pub fn pad_constant(input: &Tensor, pad: usize, value: f32) -> Tensor {
    let [n, c, h, w] = input.shape();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::full([n, c, hp, wp], value);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let src = input.index([ni, ci, hi, 0]);
                let dst = out.index([ni, ci, hi + pad, pad]);
                out.data_mut()[dst..dst + w].copy_from_slice(&input.data()[src..src + w]);
            }
        }
    }
    out
}

/// Max pooling with `-inf` padding. Returns the output and, for each output
/// element, the flat input index of its first maximum in row-major order.
pub(crate) fn max_pool(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    let (ho, wo) = match (conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::config(format!(
                "max pool {k}x{k}/{stride} pad {pad} does not fit input {:?}",
                input.shape()
            )))
        }
    };
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for kh in 0..k {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        let i = base + ih as usize * w + iw as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts([n, c, ho, wo], out), arg))
}

/// Max over `(H, W)` for each `(n, c)`; first maximum wins ties.
pub(crate) fn spatial_max(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = input.shape();
    let x = input.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let base = plane * hw;
        let mut best_i = base;
        for i in base + 1..base + hw {
            if x[i] > x[best_i] {
                best_i = i;
            }
        }
        out.push(x[best_i]);
        arg.push(best_i);
    }
    (Tensor::from_parts([n, c, 1, 1], out), arg)
}

/// Max over `C` for each `(n, h, w)`; first maximum wins ties.
pub(crate) fn channel_max(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = input.shape();
    let x = input.data();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    let mut arg = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for pos in 0..hw {
            let mut best_i = ni * c * hw + pos;
            for ci in 1..c {
                let i = (ni * c + ci) * hw + pos;
                if x[i] > x[best_i] {
                    best_i = i;
                }
            }
            out.push(x[best_i]);
            arg.push(best_i);
        }
    }
    (Tensor::from_parts([n, 1, h, w], out), arg)
}
