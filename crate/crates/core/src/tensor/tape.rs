//! Arena-backed reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the arena once in reverse
//! recording order, so each backward rule runs exactly once.

use log::warn;

use super::kernels;
use super::{numel, Shape, Tensor};
use crate::bits;
use crate::error::{Error, Result};

/// Batch-norm denominator epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f32 = 0.1;
/// Norm floor used by the row normalisation.
pub const NORM_DELTA: f32 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the sign quantisers behave in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SignMode {
    /// Hard ±1 output with straight-through gradients.
    #[default]
    Hard,
    /// `clamp(x − t, −1, 1)`: a continuous forward whose derivative is
    /// exactly the straight-through window, used for finite-difference checks.
    Relaxed,
}

/// Which kernel evaluates convolutions between binarised operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BinaryConvPath {
    /// Bit-packed XNOR/popcount.
    #[default]
    Xnor,
    /// The same ±1 values pushed through the float convolution.
    Float,
}

/// Batch-norm running statistics, stored as `(1, C, 1, 1)` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros([1, channels, 1, 1]),
            var: Tensor::ones([1, channels, 1, 1]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and update the running averages.
    Train,
    /// Normalise with the running averages.
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        pad_value: f32,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ChannelScale(Var, Var),
    ChannelBias(Var, Var),
    ChannelMix(Var, Var),
    BiasedSign(Var, Var),
    SignWeights(Var),
    Relu(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    RowNormalize {
        input: Var,
        norms: Vec<f32>,
    },
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    sign_mode: SignMode,
    conv_path: BinaryConvPath,
    zero_norm_events: usize,
}

fn shape_mismatch(what: &str, a: Shape, b: Shape) -> Error {
    Error::config(format!("{what}: shape mismatch {a:?} vs {b:?}"))
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sign_mode(sign_mode: SignMode) -> Self {
        Tape {
            sign_mode,
            ..Self::default()
        }
    }

    pub fn sign_mode(&self) -> SignMode {
        self.sign_mode
    }

    pub fn set_binary_conv_path(&mut self, path: BinaryConvPath) {
        self.conv_path = path;
    }

    pub fn binary_conv_path(&self) -> BinaryConvPath {
        self.conv_path
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of all-zero rows met by [`Tape::l2_normalize_rows`].
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Zero-padded float cross-correlation.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv_forward(self.value(input), self.value(kernel), stride, pad, 0.0)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                pad_value: 0.0,
            },
            &[input, kernel],
        ))
    }

    /// Convolution between binarised operands, padded with −1.
    ///
    /// In hard sign mode on the XNOR path the forward runs on packed bits;
    /// otherwise the float kernel is used. Gradients are identical either way.
    pub fn binary_conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let y = if self.sign_mode == SignMode::Hard && self.conv_path == BinaryConvPath::Xnor {
            let xb = bits::BitTensor::pack(x)?;
            let kb = bits::BitTensor::pack(k)?;
            bits::conv2d_xnor(&xb, &kb, stride, pad)?
        } else {
            kernels::conv_forward(x, k, stride, pad, -1.0)?
        };
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                pad_value: -1.0,
            },
            &[input, kernel],
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(input);
        let vec_shape = [1, c, 1, 1];
        for (what, v) in [("batch_norm gamma", gamma), ("batch_norm beta", beta)] {
            if self.shape(v) != vec_shape {
                return Err(shape_mismatch(what, self.shape(v), vec_shape));
            }
        }
        if stats.mean.shape() != vec_shape || stats.var.shape() != vec_shape {
            return Err(shape_mismatch(
                "batch_norm running stats",
                stats.mean.shape(),
                vec_shape,
            ));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let hw = h * w;
        let m = n * hw;
        let mut inv_std = vec![0.0f32; c];
        let mut mean = vec![0.0f32; c];
        match mode {
            BnMode::Train => {
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        s += x[base..base + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        ss += x[base..base + hw].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                    }
                    let var = ss / m as f64;
                    let unbiased = if m > 1 { ss / (m - 1) as f64 } else { var };
                    mean[ci] = mu as f32;
                    inv_std[ci] = (1.0 / (var + BN_EPS as f64).sqrt()) as f32;
                    let rm = &mut stats.mean.data_mut()[ci];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mu as f32;
                    let rv = &mut stats.var.data_mut()[ci];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
                }
            }
            BnMode::Eval => {
                for ci in 0..c {
                    mean[ci] = stats.mean.data()[ci];
                    inv_std[ci] = 1.0 / (stats.var.data()[ci] + BN_EPS).sqrt();
                }
            }
        }
        let mut xhat = vec![0.0f32; x.len()];
        let mut y = vec![0.0f32; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    y[i] = g[ci] * xh + b[ci];
                }
            }
        }
        let y = Tensor::from_parts([n, c, h, w], y);
        Ok(self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            &[input, gamma, beta],
        ))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<(Tensor, Shape)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_mismatch(what, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::from_parts(sa, data), sa))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, _) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (y, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let y = self.value(a).map(|v| v * s);
        self.push(y, Op::Scale(a, s), &[a])
    }

    fn check_channel_vector(&self, x: Var, v: Var, what: &str) -> Result<()> {
        let c = self.shape(x)[1];
        if self.shape(v) != [1, c, 1, 1] {
            return Err(shape_mismatch(what, self.shape(v), [1, c, 1, 1]));
        }
        Ok(())
    }

    /// `y[n,c,h,w] = x[n,c,h,w] · w[c]` with `w` shaped `(1, C, 1, 1)`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check_channel_vector(x, w, "channel_scale")?;
        let [_, c, h, wd] = self.shape(x);
        let hw = h * wd;
        let wv = self.value(w).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v *= wv[(i / hw) % c];
        }
        Ok(self.push(y, Op::ChannelScale(x, w), &[x, w]))
    }

    /// `y[n,c,h,w] = x[n,c,h,w] + b[c]` with `b` shaped `(1, C, 1, 1)`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_channel_vector(x, b, "channel_bias")?;
        let [_, c, h, w] = self.shape(x);
        let hw = h * w;
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += bv[(i / hw) % c];
        }
        Ok(self.push(y, Op::ChannelBias(x, b), &[x, b]))
    }

    /// Channel mixing `y[n,c',h,w] = Σ_s x[n,s,h,w] · T[s,c']` with `T`
    /// stored as `(S, C', 1, 1)`.
    pub fn channel_mix(&mut self, x: Var, t: Var) -> Result<Var> {
        let [n, s, h, w] = self.shape(x);
        let [ts, c_out, th, tw] = self.shape(t);
        if ts != s || th != 1 || tw != 1 {
            return Err(shape_mismatch("channel_mix", self.shape(x), self.shape(t)));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let tv = self.value(t).data();
        let mut y = vec![0.0f32; n * c_out * hw];
        for ni in 0..n {
            for si in 0..s {
                let src = &xv[(ni * s + si) * hw..(ni * s + si + 1) * hw];
                for co in 0..c_out {
                    let coef = tv[si * c_out + co];
                    if coef == 0.0 {
                        continue;
                    }
                    let dst = &mut y[(ni * c_out + co) * hw..(ni * c_out + co + 1) * hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v * coef;
                    }
                }
            }
        }
        let y = Tensor::from_parts([n, c_out, h, w], y);
        Ok(self.push(y, Op::ChannelMix(x, t), &[x, t]))
    }

    /// Biased sign: −1 where `x ≤ t`, +1 where `x > t` (`t` a scalar node).
    pub fn biased_sign(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.shape(t) != [1, 1, 1, 1] {
            return Err(shape_mismatch("biased_sign threshold", self.shape(t), [1, 1, 1, 1]));
        }
        let tv = self.value(t).data()[0];
        let y = match self.sign_mode {
            SignMode::Hard => bits::biased_sign(self.value(x), tv),
            SignMode::Relaxed => self.value(x).map(|v| (v - tv).clamp(-1.0, 1.0)),
        };
        Ok(self.push(y, Op::BiasedSign(x, t), &[x, t]))
    }

    /// Weight binarisation `sign(θ*, 0)` with the `1[|θ*| < 1]` pass-through.
    pub fn sign_weights(&mut self, theta: Var) -> Var {
        let y = match self.sign_mode {
            SignMode::Hard => bits::biased_sign(self.value(theta), 0.0),
            SignMode::Relaxed => self.value(theta).map(|v| v.clamp(-1.0, 1.0)),
        };
        self.push(y, Op::SignWeights(theta), &[theta])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    fn gather(&mut self, input: Var, y: Tensor, index: Vec<usize>) -> Var {
        self.push(y, Op::Gather { input, index }, &[input])
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, index) = kernels::max_pool(self.value(x), k, stride, pad)?;
        Ok(self.gather(x, y, index))
    }

    /// Max over `(H, W)` → `(N, C, 1, 1)`.
    pub fn spatial_max(&mut self, x: Var) -> Var {
        let (y, index) = kernels::spatial_max(self.value(x));
        self.gather(x, y, index)
    }

    /// Max over `C` → `(N, 1, H, W)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (y, index) = kernels::channel_max(self.value(x));
        self.gather(x, y, index)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Divides each sample's flattened row by `max(‖row‖₂, δ)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let d = numel(&shape) / shape[0];
        let mut y = self.value(x).clone();
        let mut norms = Vec::with_capacity(shape[0]);
        let mut zero_rows = 0;
        for row in y.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            if norm <= NORM_DELTA {
                zero_rows += 1;
            }
            let denom = norm.max(NORM_DELTA);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        if zero_rows > 0 {
            self.zero_norm_events += zero_rows;
            warn!("l2 normalisation met {zero_rows} all-zero row(s); returning zeros");
        }
        self.push(y, Op::RowNormalize { input: x, norms }, &[x])
    }

    /// Per-sample Euclidean norm → `(N, 1, 1, 1)`.
    pub fn l2_norm_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let d = numel(&shape) / shape[0];
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32)
            .collect();
        let y = Tensor::from_parts([shape[0], 1, 1, 1], data);
        self.push(y, Op::RowNorm(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum() as f32);
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar((t.sum() / t.len() as f64) as f32);
        self.push(y, Op::Mean(x), &[x])
    }

    /// Batch-mean softmax cross-entropy of `(N, classes, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, classes, h, w] = self.shape(logits);
        if h != 1 || w != 1 {
            return Err(Error::config(format!(
                "cross_entropy expects (N, classes, 1, 1) logits, got {:?}",
                self.shape(logits)
            )));
        }
        if labels.len() != n {
            return Err(Error::config(format!(
                "cross_entropy: {} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(
                format!("label {bad} out of range for {classes} classes"),
                None,
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; z.len()];
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * classes..(i + 1) * classes];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * classes + j] = ((v as f64 - max).exp() / denom) as f32;
            }
            total += denom.ln() + max - row[label] as f64;
        }
        let y = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients replace any earlier sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v), g.clone()))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                pad_value,
            } => {
                let (dx, dk) = kernels::conv_backward(
                    self.value(*input),
                    self.value(*kernel),
                    dy,
                    *stride,
                    *pad,
                    *pad_value,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                for (v, g) in [(*input, dx), (*kernel, dk)] {
                    if let Some(g) = g {
                        accumulate(&mut grads[v.0], g.len(), |acc| {
                            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b)
                        });
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = self.shape(*input);
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for j in base..base + hw {
                            sum_dy[ci] += dy[j] as f64;
                            sum_dy_xhat[ci] += (dy[j] * xhat[j]) as f64;
                        }
                    }
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], c, |acc| {
                        for ci in 0..c {
                            acc[ci] += sum_dy_xhat[ci] as f32;
                        }
                    });
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], c, |acc| {
                        for ci in 0..c {
                            acc[ci] += sum_dy[ci] as f32;
                        }
                    });
                }
                if self.wants(*input) {
                    let g = self.value(*gamma).data();
                    accumulate(&mut grads[input.0], len(*input), |acc| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                let k = g[ci] * inv_std[ci];
                                for j in base..base + hw {
                                    acc[j] += if *train {
                                        let t = m * dy[j] as f64 - sum_dy[ci] - xhat[j] as f64 * sum_dy_xhat[ci];
                                        (k as f64 * t / m) as f32
                                    } else {
                                        k * dy[j]
                                    };
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], dy.len(), |acc| {
                            acc.iter_mut().zip(dy).for_each(|(x, g)| *x += g)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0f32), (*b, -1.0)] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], dy.len(), |acc| {
                            acc.iter_mut().zip(dy).for_each(|(x, g)| *x += sign * g)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let o = self.value(other).data();
                        accumulate(&mut grads[v.0], dy.len(), |acc| {
                            for j in 0..dy.len() {
                                acc[j] += dy[j] * o[j];
                            }
                        });
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.len(), |acc| {
                        acc.iter_mut().zip(dy).for_each(|(x, g)| *x += s * g)
                    });
                }
            }
            Op::ChannelScale(x, w) => {
                let [_, c, h, wd] = self.shape(*x);
                let hw = h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xv.len(), |acc| {
                        for j in 0..xv.len() {
                            acc[j] += dy[j] * wv[(j / hw) % c];
                        }
                    });
                }
                if self.wants(*w) {
                    let mut s = vec![0.0f64; c];
                    for j in 0..xv.len() {
                        s[(j / hw) % c] += (dy[j] * xv[j]) as f64;
                    }
                    accumulate(&mut grads[w.0], c, |acc| {
                        acc.iter_mut().zip(&s).for_each(|(a, v)| *a += *v as f32)
                    });
                }
            }
            Op::ChannelBias(x, b) => {
                let [_, c, h, w] = self.shape(*x);
                let hw = h * w;
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |acc| {
                        acc.iter_mut().zip(dy).for_each(|(a, g)| *a += g)
                    });
                }
                if self.wants(*b) {
                    let mut s = vec![0.0f64; c];
                    for (j, &g) in dy.iter().enumerate() {
                        s[(j / hw) % c] += g as f64;
                    }
                    accumulate(&mut grads[b.0], c, |acc| {
                        acc.iter_mut().zip(&s).for_each(|(a, v)| *a += *v as f32)
                    });
                }
            }
            Op::ChannelMix(x, t) => {
                let [n, s, h, w] = self.shape(*x);
                let c_out = self.shape(*t)[1];
                let hw = h * w;
                let xv = self.value(*x).data();
                let tv = self.value(*t).data();
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xv.len(), |acc| {
                        for ni in 0..n {
                            for si in 0..s {
                                let dst = &mut acc[(ni * s + si) * hw..(ni * s + si + 1) * hw];
                                for co in 0..c_out {
                                    let coef = tv[si * c_out + co];
                                    if coef == 0.0 {
                                        continue;
                                    }
                                    let src = &dy[(ni * c_out + co) * hw..(ni * c_out + co + 1) * hw];
                                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += coef * g);
                                }
                            }
                        }
                    });
                }
                if self.wants(*t) {
                    let mut acc_t = vec![0.0f64; s * c_out];
                    for ni in 0..n {
                        for si in 0..s {
                            let xs = &xv[(ni * s + si) * hw..(ni * s + si + 1) * hw];
                            for co in 0..c_out {
                                let g = &dy[(ni * c_out + co) * hw..(ni * c_out + co + 1) * hw];
                                acc_t[si * c_out + co] += xs.iter().zip(g).map(|(&a, &b)| (a * b) as f64).sum::<f64>();
                            }
                        }
                    }
                    accumulate(&mut grads[t.0], s * c_out, |acc| {
                        acc.iter_mut().zip(&acc_t).for_each(|(a, v)| *a += *v as f32)
                    });
                }
            }
            Op::BiasedSign(x, t) => {
                let tv = self.value(*t).data()[0];
                let xv = self.value(*x).data();
                let pass = bits::ste_backward(dy, xv, tv);
                if self.wants(*t) {
                    let s: f64 = pass.iter().map(|&v| v as f64).sum();
                    accumulate(&mut grads[t.0], 1, |acc| acc[0] -= s as f32);
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], xv.len(), |acc| {
                        acc.iter_mut().zip(&pass).for_each(|(a, g)| *a += g)
                    });
                }
            }
            Op::SignWeights(theta) => {
                if self.wants(*theta) {
                    let pass = bits::ste_backward(dy, self.value(*theta).data(), 0.0);
                    accumulate(&mut grads[theta.0], pass.len(), |acc| {
                        acc.iter_mut().zip(&pass).for_each(|(a, g)| *a += g)
                    });
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[x.0], xv.len(), |acc| {
                        for j in 0..xv.len() {
                            if xv[j] > 0.0 {
                                acc[j] += dy[j];
                            }
                        }
                    });
                }
            }
            Op::Gather { input, index } => {
                if self.wants(*input) {
                    accumulate(&mut grads[input.0], len(*input), |acc| {
                        for (j, &src) in index.iter().enumerate() {
                            acc[src] += dy[j];
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.len(), |acc| {
                        acc.iter_mut().zip(dy).for_each(|(a, g)| *a += g)
                    });
                }
            }
            Op::RowNormalize { input, norms } => {
                if self.wants(*input) {
                    let y = node.value.data();
                    let d = y.len() / norms.len();
                    accumulate(&mut grads[input.0], y.len(), |acc| {
                        for (r, &norm) in norms.iter().enumerate() {
                            let (yr, gr) = (&y[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                            let ar = &mut acc[r * d..(r + 1) * d];
                            if norm > NORM_DELTA {
                                let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| (a * b) as f64).sum();
                                for j in 0..d {
                                    ar[j] += (gr[j] - yr[j] * dot as f32) / norm;
                                }
                            } else {
                                for j in 0..d {
                                    ar[j] += gr[j] / NORM_DELTA;
                                }
                            }
                        }
                    });
                }
            }
            Op::RowNorm(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let norms = node.value.data();
                    let d = xv.len() / norms.len();
                    accumulate(&mut grads[x.0], xv.len(), |acc| {
                        for (r, &norm) in norms.iter().enumerate() {
                            if norm == 0.0 {
                                continue;
                            }
                            for j in r * d..(r + 1) * d {
                                acc[j] += dy[r] * xv[j] / norm;
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], len(*x), |acc| acc.iter_mut().for_each(|a| *a += dy[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = len(*x);
                    let g = dy[0] / n as f32;
                    accumulate(&mut grads[x.0], n, |acc| acc.iter_mut().for_each(|a| *a += g));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let classes = probs.len() / labels.len();
                    let scale = dy[0] / labels.len() as f32;
                    accumulate(&mut grads[logits.0], probs.len(), |acc| {
                        for (i, &label) in labels.iter().enumerate() {
                            for j in 0..classes {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                acc[i * classes + j] += scale * (probs[i * classes + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }
}
