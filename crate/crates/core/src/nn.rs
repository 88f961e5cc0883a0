//! Forward and backward passes for the layer kinds of the sequential CNNs:
//! valid convolution, ceil-mode max pooling, batch normalization with scale,
//! ReLU, fully connected, inverted dropout and softmax cross-entropy.
//!
//! Every forward accepts a batch (`N×C×H×W` for maps, `N×F` for vectors) and
//! returns the output together with the cache its backward consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Gradients produced by one layer's backward pass.
///
/// `params` follows the order of the layer's parameter tensors
/// (conv and fc: weight, bias; batch norm: gamma, beta) and is empty for
/// parameter-free layers.
#[derive(Clone, Debug)]
pub struct LayerGrad<T = f32> {
    pub input: Tensor<T>,
    pub params: Vec<Tensor<T>>,
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        [c, h, w] => Ok([1, c, h, w]),
        ref s => Err(Error::Shape(format!("{what} expects C×H×W or N×C×H×W input, got {s:?}"))),
    }
}

fn with_rank_of<T: Scalar>(out: Tensor<T>, like: &Tensor<T>) -> Result<Tensor<T>> {
    if like.rank() == 3 {
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    } else {
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `Cout×Cin×k×k`
    pub weight: Tensor<T>,
    /// `Cout`
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::Shape(format!("conv weight must be Cout×Cin×k×k, got {s:?}")));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::Shape(format!(
                "conv bias must be [{}], got {:?}",
                s[0],
                self.bias.shape()
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("conv stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvCache<T = f32> {
    input: Tensor<T>,
}

/// Output side length of a valid convolution.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    (size >= kernel && stride > 0).then(|| (size - kernel) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = (c * self.k + u) * self.k + v;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for i in 0..self.oh {
                        let src = &plane[(i * self.s + u) * self.w + v..];
                        let out = &mut dst[i * self.ow..(i + 1) * self.ow];
                        if self.s == 1 {
                            out.copy_from_slice(&src[..self.ow]);
                        } else {
                            for (j, o) in out.iter_mut().enumerate() {
                                *o = src[j * self.s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for u in 0..self.k {
                for v in 0..self.k {
                    let row = (c * self.k + u) * self.k + v;
                    let src = &cols[row * p..(row + 1) * p];
                    for i in 0..self.oh {
                        let base = (i * self.s + u) * self.w + v;
                        let row_src = &src[i * self.ow..(i + 1) * self.ow];
                        if self.s == 1 {
                            for (d, &g) in plane[base..base + self.ow].iter_mut().zip(row_src) {
                                *d += g;
                            }
                        } else {
                            for (j, &g) in row_src.iter().enumerate() {
                                plane[base + j * self.s] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(dims: [usize; 4], p: &ConvParams<T>) -> Result<ConvGeom> {
    p.validate()?;
    let [_, cin, h, w] = dims;
    if cin != p.in_channels() {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {cin}",
            p.in_channels()
        )));
    }
    let k = p.kernel();
    let (Some(oh), Some(ow)) = (conv_out_size(h, k, p.stride), conv_out_size(w, k, p.stride)) else {
        return Err(Error::Shape(format!("input {h}×{w} smaller than {k}×{k} kernel")));
    };
    Ok(ConvGeom {
        cin,
        h,
        w,
        k,
        s: p.stride,
        oh,
        ow,
    })
}

/// Valid cross-correlation: `out[o][i][j] = bias[o] + Σ w[o][c][u][v]·x[c][i·s+u][j·s+v]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let dims = dims4(input, "conv2d")?;
    let g = conv_geom(dims, p)?;
    let n = dims[0];
    let cout = p.out_channels();
    let (rows, cols_n) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow])?;
    let mut cols = vec![T::zero(); rows * cols_n];
    let x = input.data();
    for b in 0..n {
        g.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
        let y = &mut out.data_mut()[b * cout * cols_n..(b + 1) * cout * cols_n];
        for (o, chunk) in y.chunks_mut(cols_n).enumerate() {
            chunk.fill(p.bias[o]);
        }
        T::gemm(
            cout,
            rows,
            cols_n,
            T::one(),
            p.weight.data(),
            rows as isize,
            1,
            &cols,
            cols_n as isize,
            1,
            T::one(),
            y,
            cols_n as isize,
            1,
        );
    }
    let out = with_rank_of(out, input)?;
    Ok((
        out,
        ConvCache {
            input: input.clone(),
        },
    ))
}

/// Adjoint of [`conv2d_forward`]; `params` of the result are `[weight, bias]`.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let dims = dims4(&cache.input, "conv2d")?;
    let g = conv_geom(dims, p)?;
    let n = dims[0];
    let cout = p.out_channels();
    let (rows, cols_n) = (g.rows(), g.cols());
    if grad_out.len() != n * cout * cols_n {
        return Err(Error::Shape(format!(
            "conv upstream gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, g.oh, g.ow]
        )));
    }
    let in_len = g.cin * g.h * g.w;
    let mut dw = Tensor::zeros(p.weight.shape())?;
    let mut db = Tensor::zeros(p.bias.shape())?;
    let mut dx = Tensor::zeros(cache.input.shape())?;
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dcols = vec![T::zero(); rows * cols_n];
    let x = cache.input.data();
    for b in 0..n {
        let dy = &grad_out.data()[b * cout * cols_n..(b + 1) * cout * cols_n];
        for (o, chunk) in dy.chunks(cols_n).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        g.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
        // dW += dY · colsᵀ
        T::gemm(
            cout,
            cols_n,
            rows,
            T::one(),
            dy,
            cols_n as isize,
            1,
            &cols,
            1,
            cols_n as isize,
            T::one(),
            dw.data_mut(),
            rows as isize,
            1,
        );
        // dcols = Wᵀ · dY
        T::gemm(
            rows,
            cout,
            cols_n,
            T::one(),
            p.weight.data(),
            1,
            rows as isize,
            dy,
            cols_n as isize,
            1,
            T::zero(),
            &mut dcols,
            cols_n as isize,
            1,
        );
        g.col2im_add(&dcols, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
    }
    Ok(LayerGrad {
        input: dx,
        params: vec![dw, db],
    })
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Ceil-mode pooled size; edge windows are truncated to the input.
pub fn pool_out_size(size: usize, kernel: usize, stride: usize) -> usize {
    if size <= kernel {
        1
    } else {
        (size - kernel).div_ceil(stride) + 1
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidParameter("pool kernel and stride must be >= 1".into()));
    }
    let [n, c, h, w] = dims4(input, "maxpool")?;
    if input.len() > u32::MAX as usize {
        return Err(Error::Shape("pool input too large for 32-bit argmax indices".into()));
    }
    let (oh, ow) = (pool_out_size(h, kernel, stride), pool_out_size(w, kernel, stride));
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax: Vec<u32> = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        let xp = &x[base..base + h * w];
        for i in 0..oh {
            let (r0, r1) = (i * stride, (i * stride + kernel).min(h));
            for j in 0..ow {
                let (c0, c1) = (j * stride, (j * stride + kernel).min(w));
                let mut best = r0 * w + c0;
                let mut best_v = xp[best];
                for r in r0..r1 {
                    let row = &xp[r * w + c0..r * w + c1];
                    for (dc, &v) in row.iter().enumerate() {
                        // strict comparison keeps the first maximum in scan order
                        if v > best_v {
                            best_v = v;
                            best = r * w + c0 + dc;
                        }
                    }
                }
                y.push(best_v);
                argmax.push((base + best) as u32);
            }
        }
    }
    let out = with_rank_of(Tensor::from_vec(&[n, c, oh, ow], y)?, input)?;
    Ok((
        out,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Shape(format!(
            "pool upstream gradient has {} entries, expected {}",
            grad_out.len(),
            cache.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&cache.input_shape)?;
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        dx[idx as usize] += g;
    }
    Ok(LayerGrad {
        input: dx,
        params: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Batch normalization + scale
// ---------------------------------------------------------------------------

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_EMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct BnScaleParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight of the old running value in the moving average.
    pub ema_factor: f64,
    pub epsilon: f64,
    /// Train-mode updates folded into the running statistics so far.
    pub updates: u64,
}

impl<T: Scalar> BnScaleParams<T> {
    /// Identity transform in inference mode: mean 0, var 1, gamma 1, beta 0.
    pub fn identity(channels: usize, ema_factor: f64, epsilon: f64) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            ema_factor,
            epsilon,
            updates: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::Shape(format!("batch-norm {name} must be [{c}], got {:?}", t.shape())));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("batch-norm epsilon must be > 0".into()));
        }
        if !(self.ema_factor > 0.0 && self.ema_factor < 1.0) {
            return Err(Error::InvalidParameter("batch-norm ema factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T = f32> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// `[N, C, spatial]` view of a `N×C×H×W` or `N×C` tensor.
fn bn_dims<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 3]> {
    match *t.shape() {
        [n, c] => Ok([n, c, 1]),
        [n, c, h, w] => Ok([n, c, h * w]),
        ref s => Err(Error::Shape(format!("batch norm expects N×C or N×C×H×W input, got {s:?}"))),
    }
}

/// Train mode normalizes by batch statistics and folds them into the running
/// averages; infer mode uses the running statistics only.
///
/// The running averages are bias-corrected exponential moving averages: after
/// `t` updates with factor `a` each equals `Σ a^(t−i)·(1−a)·s_i / (1 − a^t)`
/// over the batch statistics `s_i`, so the initial values are forgotten on
/// the first update.
pub fn batchnorm_scale_forward<T: Scalar>(
    input: &Tensor<T>,
    p: &mut BnScaleParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    if mode == Mode::Infer {
        return batchnorm_scale_infer(input, p);
    }
    p.validate()?;
    let [n, c, sp] = bn_dims(input)?;
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "batch norm expects {} channels, got {c}",
            p.channels()
        )));
    }
    let count = n * sp;
    let x = input.data();
    let a = p.ema_factor;
    let weight = (1.0 - a) / (1.0 - a.powi(p.updates.saturating_add(1).min(i32::MAX as u64) as i32));
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        if count < 2 {
            return Err(Error::DegenerateVariance { channel: ch });
        }
        let mut sum = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * sp;
            sum += x[off..off + sp].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * sp;
            sq += x[off..off + sp].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let unbiased = sq / (count - 1) as f64;
        let blend = |old: T, new: f64| T::from_f64(old.as_f64() + weight * (new - old.as_f64()));
        p.running_mean[ch] = blend(p.running_mean[ch], mean);
        p.running_var[ch] = blend(p.running_var[ch], unbiased);
        stats.push((mean, sq / count as f64));
    }
    p.updates += 1;
    bn_apply(input, p, &stats, Mode::Train)
}

/// Inference-mode batch norm; does not touch the running statistics.
pub fn batchnorm_scale_infer<T: Scalar>(
    input: &Tensor<T>,
    p: &BnScaleParams<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    p.validate()?;
    let [_, c, _] = bn_dims(input)?;
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "batch norm expects {} channels, got {c}",
            p.channels()
        )));
    }
    let stats: Vec<(f64, f64)> = (0..c)
        .map(|ch| (p.running_mean[ch].as_f64(), p.running_var[ch].as_f64().max(0.0)))
        .collect();
    bn_apply(input, p, &stats, Mode::Infer)
}

fn bn_apply<T: Scalar>(
    input: &Tensor<T>,
    p: &BnScaleParams<T>,
    stats: &[(f64, f64)],
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, sp] = bn_dims(input)?;
    let inv_std: Vec<f64> = stats.iter().map(|&(_, var)| 1.0 / (var + p.epsilon).sqrt()).collect();
    let coef: Vec<(T, T, T, T)> = stats
        .iter()
        .zip(&inv_std)
        .enumerate()
        .map(|(ch, (&(mean, _), &is))| (T::from_f64(mean), T::from_f64(is), p.gamma[ch], p.beta[ch]))
        .collect();
    let mut xhat = Vec::with_capacity(input.len());
    let mut out = Vec::with_capacity(input.len());
    for (i, chunk) in input.data().chunks(sp).enumerate() {
        let (m, is, g, bt) = coef[i % c];
        for &x in chunk {
            let xh = (x - m) * is;
            xhat.push(xh);
            out.push(g * xh + bt);
        }
    }
    debug_assert_eq!(xhat.len(), n * c * sp);
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        BnCache {
            xhat: Tensor::from_vec(input.shape(), xhat)?,
            inv_std,
            mode,
        },
    ))
}

/// `params` of the result are `[gamma, beta]`.
pub fn batchnorm_scale_backward<T: Scalar>(
    cache: &BnCache<T>,
    p: &BnScaleParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    cache.xhat.expect_same_shape(grad_out)?;
    let [n, c, sp] = bn_dims(grad_out)?;
    let count = (n * sp) as f64;
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut sums = vec![(0.0f64, 0.0f64); c];
    for (i, (gy, gx)) in dy.chunks(sp).zip(xh.chunks(sp)).enumerate() {
        let (sg, sb) = &mut sums[i % c];
        *sg += gy.iter().zip(gx).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>();
        *sb += gy.iter().map(|&a| a.as_f64()).sum::<f64>();
    }
    // dx = k·(dy − a − x̂·b) with k = γ·inv_std and a, b the per-channel means
    // of dy and dy·x̂ (zero in infer mode, where the statistics are constants)
    let coef: Vec<(T, T, T)> = sums
        .iter()
        .enumerate()
        .map(|(ch, &(sg, sb))| {
            let k = p.gamma[ch].as_f64() * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => (T::from_f64(k), T::from_f64(sb / count), T::from_f64(sg / count)),
                Mode::Infer => (T::from_f64(k), T::zero(), T::zero()),
            }
        })
        .collect();
    let mut dx = Vec::with_capacity(dy.len());
    for (i, (gy, gx)) in dy.chunks(sp).zip(xh.chunks(sp)).enumerate() {
        let (k, a, b) = coef[i % c];
        dx.extend(gy.iter().zip(gx).map(|(&g, &x)| k * (g - a - x * b)));
    }
    let dgamma = sums.iter().map(|&(sg, _)| T::from_f64(sg)).collect();
    let dbeta = sums.iter().map(|&(_, sb)| T::from_f64(sb)).collect();
    Ok(LayerGrad {
        input: Tensor::from_vec(grad_out.shape(), dx)?,
        params: vec![Tensor::from_vec(&[c], dgamma)?, Tensor::from_vec(&[c], dbeta)?],
    })
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, ReluCache) {
    let active = input.data().iter().map(|&v| v > T::zero()).collect();
    (
        input.map(|v| if v > T::zero() { v } else { T::zero() }),
        ReluCache {
            active,
            shape: input.shape().to_vec(),
        },
    )
}

pub fn relu_backward<T: Scalar>(cache: &ReluCache, grad_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "relu upstream gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &a)| if a { g } else { T::zero() })
        .collect();
    Ok(LayerGrad {
        input: Tensor::from_vec(&cache.shape, data)?,
        params: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T = f32> {
    /// `Nout×Nin`
    pub weight: Tensor<T>,
    /// `Nout`
    pub bias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct FcCache<T = f32> {
    input: Tensor<T>,
}

/// Rows of `input` (flattened per sample) times `weightᵀ` plus `bias`.
///
/// A rank-1 input is a single sample and yields a rank-1 output.
pub fn fc_forward<T: Scalar>(input: &Tensor<T>, p: &FcParams<T>) -> Result<(Tensor<T>, FcCache<T>)> {
    let (nout, nin) = (p.outputs(), p.inputs());
    if p.bias.shape() != [nout] {
        return Err(Error::Shape(format!("fc bias must be [{nout}], got {:?}", p.bias.shape())));
    }
    let n = if input.rank() == 1 { 1 } else { input.shape()[0] };
    if input.len() != n * nin {
        return Err(Error::Shape(format!(
            "fc expects {nin} inputs per sample, got shape {:?}",
            input.shape()
        )));
    }
    let flat = input.clone().reshape(&[n, nin])?;
    let mut out = Tensor::zeros(&[n, nout])?;
    for row in out.data_mut().chunks_mut(nout) {
        row.copy_from_slice(p.bias.data());
    }
    T::gemm(
        n,
        nin,
        nout,
        T::one(),
        flat.data(),
        nin as isize,
        1,
        p.weight.data(),
        1,
        nin as isize,
        T::one(),
        out.data_mut(),
        nout as isize,
        1,
    );
    let out = if input.rank() == 1 { out.reshape(&[nout])? } else { out };
    Ok((out, FcCache { input: input.clone() }))
}

/// `params` of the result are `[weight, bias]`; the input gradient has the
/// shape of the original (unflattened) input.
pub fn fc_backward<T: Scalar>(
    cache: &FcCache<T>,
    p: &FcParams<T>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (nout, nin) = (p.outputs(), p.inputs());
    let n = cache.input.len() / nin;
    if grad_out.len() != n * nout {
        return Err(Error::Shape(format!(
            "fc upstream gradient has {} entries, expected {}",
            grad_out.len(),
            n * nout
        )));
    }
    let x = cache.input.data();
    let dy = grad_out.data();
    let mut dw = Tensor::zeros(&[nout, nin])?;
    T::gemm(
        nout,
        n,
        nin,
        T::one(),
        dy,
        1,
        nout as isize,
        x,
        nin as isize,
        1,
        T::zero(),
        dw.data_mut(),
        nin as isize,
        1,
    );
    let mut db = Tensor::zeros(&[nout])?;
    for row in dy.chunks(nout) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(cache.input.shape())?;
    T::gemm(
        n,
        nout,
        nin,
        T::one(),
        dy,
        nout as isize,
        1,
        p.weight.data(),
        nin as isize,
        1,
        T::zero(),
        dx.data_mut(),
        nin as isize,
        1,
    );
    Ok(LayerGrad {
        input: dx,
        params: vec![dw, db],
    })
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DropoutCache<T = f32> {
    /// `None` when the forward pass was the identity.
    mask: Option<Vec<T>>,
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` at train time.
pub fn dropout_forward<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<T>, DropoutCache<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), DropoutCache { mask: None }));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, DropoutCache { mask: Some(mask) }))
}

pub fn dropout_backward<T: Scalar>(cache: &DropoutCache<T>, grad_out: &Tensor<T>) -> Result<LayerGrad<T>> {
    let input = match &cache.mask {
        None => grad_out.clone(),
        Some(mask) => {
            if mask.len() != grad_out.len() {
                return Err(Error::Shape("dropout upstream gradient size differs from mask".into()));
            }
            let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            Tensor::from_vec(grad_out.shape(), data)?
        }
    };
    Ok(LayerGrad {
        input,
        params: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SoftmaxXent<T = f32> {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    pub probs: Tensor<T>,
    /// `(probs - onehot) / N`
    pub grad_logits: Tensor<T>,
}

/// Row-wise softmax of `N×2` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = two_class_dims(logits)?;
    let mut probs = Tensor::zeros(&[n, k])?;
    for (row, out) in logits.data().chunks(k).zip(probs.data_mut().chunks_mut(k)) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        for (o, &z) in out.iter_mut().zip(row) {
            *o = T::from_f64((z.as_f64() - max).exp() / denom);
        }
    }
    Ok(probs)
}

fn two_class_dims<T: Scalar>(logits: &Tensor<T>) -> Result<[usize; 2]> {
    match *logits.shape() {
        [n, 2] => Ok([n, 2]),
        ref s => Err(Error::Shape(format!("softmax expects N×2 logits, got {s:?}"))),
    }
}

pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxXent<T>> {
    let [n, k] = two_class_dims(logits)?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!("class index {bad} outside 0..{k}")));
    }
    let probs = softmax(logits)?;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (b, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[y].as_f64();
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        g[y] -= T::one();
        let inv_n = T::from_f64(1.0 / n as f64);
        g.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok(SoftmaxXent {
        loss: loss / n as f64,
        probs,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::fill_normal(shape, 0.0, 1.0, rng).unwrap()
    }

    #[test]
    fn conv_output_shapes() {
        let mut rng = Rng::new(0);
        let p = ConvParams {
            weight: Tensor::<f32>::fill_normal(&[27, 3, 3, 3], 0.0, 0.1, &mut rng).unwrap(),
            bias: Tensor::zeros(&[27]).unwrap(),
            stride: 1,
        };
        let x = Tensor::<f32>::zeros(&[3, 96, 96]).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().0.shape(), &[27, 94, 94]);

        let p = ConvParams {
            weight: Tensor::<f32>::zeros(&[3, 3, 3, 3]).unwrap(),
            bias: Tensor::zeros(&[3]).unwrap(),
            stride: 1,
        };
        let x = Tensor::<f32>::zeros(&[3, 32, 32]).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().0.shape(), &[3, 30, 30]);
    }

    #[test]
    fn conv_sum_of_ones() {
        let p = ConvParams {
            weight: Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap(),
            bias: Tensor::zeros(&[1]).unwrap(),
            stride: 1,
        };
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y[0], 9.0);
    }

    #[test]
    fn conv_matches_direct_sum_with_stride() {
        let mut rng = Rng::new(5);
        let p = ConvParams {
            weight: randn(&[2, 3, 5, 5], &mut rng),
            bias: randn(&[2], &mut rng),
            stride: 2,
        };
        let x = randn(&[2, 3, 11, 12], &mut rng);
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4, 4]);
        for b in 0..2 {
            for o in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        let mut acc = p.bias[o];
                        for c in 0..3 {
                            for u in 0..5 {
                                for v in 0..5 {
                                    acc += p.weight[((o * 3 + c) * 5 + u) * 5 + v]
                                        * x[((b * 3 + c) * 11 + 2 * i + u) * 12 + 2 * j + v];
                                }
                            }
                        }
                        let got = y[((b * 2 + o) * 4 + i) * 4 + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let p = ConvParams {
            weight: Tensor::<f32>::zeros(&[4, 3, 3, 3]).unwrap(),
            bias: Tensor::zeros(&[4]).unwrap(),
            stride: 1,
        };
        assert!(matches!(
            conv2d_forward(&Tensor::<f32>::zeros(&[2, 8, 8]).unwrap(), &p),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv2d_forward(&Tensor::<f32>::zeros(&[3, 2, 8]).unwrap(), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = Rng::new(9);
        let p = ConvParams {
            weight: randn(&[3, 2, 3, 3], &mut rng),
            bias: randn(&[3], &mut rng),
            stride: 1,
        };
        let x = randn(&[2, 2, 6, 6], &mut rng);
        let (y, cache) = conv2d_forward(&x, &p).unwrap();
        let g = conv2d_backward(&cache, &p, &Tensor::zeros(y.shape()).unwrap()).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.params.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pool_ceil_sizes() {
        for (h, expect) in [(94, 47), (45, 23), (21, 11), (9, 5), (30, 15), (13, 7), (5, 3), (1, 1)] {
            assert_eq!(pool_out_size(h, 2, 2), expect, "H={h}");
        }
        // floor mode would give 22 here
        assert_eq!((45 - 2) / 2 + 1, 22);
        let x = Tensor::<f32>::zeros(&[6, 1, 1]).unwrap();
        assert_eq!(maxpool_forward(&x, 2, 2).unwrap().0.shape(), &[6, 1, 1]);
    }

    #[test]
    fn pool_truncated_edge_and_ties() {
        let x = t(&[1, 3, 3], &[1.0, 5.0, 2.0, 5.0, 0.0, 7.0, 3.0, 4.0, -1.0]);
        let (y, cache) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 4.0, -1.0]);
        let g = maxpool_backward(&cache, &t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        // the tie between x[1] and x[3] routes to x[1], first in scan order
        assert_eq!(g.input.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn bn_infer_identity() {
        let mut p = BnScaleParams::<f64>::identity(3, DEFAULT_BN_EMA, DEFAULT_BN_EPSILON).unwrap();
        let mut rng = Rng::new(1);
        let x = randn(&[2, 3, 4, 4], &mut rng);
        let (y, _) = batchnorm_scale_forward(&x, &mut p, Mode::Infer).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * scale - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_train_constant_channel_gives_beta() {
        let mut p = BnScaleParams::<f64>::identity(1, DEFAULT_BN_EMA, DEFAULT_BN_EPSILON).unwrap();
        p.gamma[0] = 3.0;
        p.beta[0] = 0.25;
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 7.0).unwrap();
        let (y, _) = batchnorm_scale_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bn_train_statistics_and_running_update() {
        let mut p = BnScaleParams::<f32>::identity(3, 0.9, DEFAULT_BN_EPSILON).unwrap();
        let mut rng = Rng::new(2);
        let x = Tensor::<f32>::fill_normal(&[4, 3, 5, 5], 2.0, 3.0, &mut rng).unwrap();
        let (y, _) = batchnorm_scale_forward(&x, &mut p, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");

            let xs: Vec<f64> = (0..4)
                .flat_map(|b| x.data()[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].to_vec())
                .map(|v| v as f64)
                .collect();
            let xm = xs.iter().sum::<f64>() / 100.0;
            // the first update replaces the initial value
            assert!((p.running_mean[ch] as f64 - xm).abs() < 1e-5);
        }
        assert_eq!(p.updates, 1);
    }

    #[test]
    fn bn_running_average_is_bias_corrected() {
        let a = 0.9;
        let mut p = BnScaleParams::<f64>::identity(1, a, DEFAULT_BN_EPSILON).unwrap();
        let batches = [[1.0, 3.0], [10.0, 14.0], [-4.0, 0.0]];
        for b in batches {
            let x = Tensor::from_vec(&[2, 1], b.to_vec()).unwrap();
            batchnorm_scale_forward(&x, &mut p, Mode::Train).unwrap();
        }
        // oracle: weighted means of the batch statistics with weights a^(t-i)
        let means = [2.0, 12.0, -2.0];
        let vars = [2.0, 8.0, 8.0];
        let w = [a * a, a, 1.0];
        let norm: f64 = w.iter().sum();
        let m: f64 = means.iter().zip(&w).map(|(m, w)| m * w).sum::<f64>() / norm;
        let v: f64 = vars.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / norm;
        assert!((p.running_mean[0] - m).abs() < 1e-12);
        assert!((p.running_var[0] - v).abs() < 1e-12);
        assert_eq!(p.updates, 3);
    }

    #[test]
    fn bn_train_rejects_single_value() {
        let mut p = BnScaleParams::<f32>::identity(2, DEFAULT_BN_EMA, DEFAULT_BN_EPSILON).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 2]).unwrap();
        assert!(matches!(
            batchnorm_scale_forward(&x, &mut p, Mode::Train),
            Err(Error::DegenerateVariance { channel: 0 })
        ));
        assert!(batchnorm_scale_forward(&x, &mut p, Mode::Infer).is_ok());
    }

    #[test]
    fn relu_examples() {
        let (y, cache) = relu_forward(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (y, _) = relu_forward(&t(&[2], &[-3.0, -0.5]));
        assert_eq!(y.data(), &[0.0, 0.0]);
        let (y, pos) = relu_forward(&t(&[2], &[3.0, 0.5]));
        assert_eq!(y.data(), &[3.0, 0.5]);
        let g = relu_backward(&pos, &t(&[2], &[-4.0, 9.0])).unwrap();
        assert_eq!(g.input.data(), &[-4.0, 9.0]);
        let g = relu_backward(&cache, &t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(g.input.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fc_examples() {
        let mut w = Tensor::<f64>::zeros(&[4, 4]).unwrap();
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let p = FcParams {
            weight: w,
            bias: Tensor::zeros(&[4]).unwrap(),
        };
        let x = t(&[4], &[1.0, -2.0, 3.5, 0.0]);
        assert_eq!(fc_forward(&x, &p).unwrap().0.data(), x.data());

        let p = FcParams::<f32> {
            weight: Tensor::zeros(&[450, 1350]).unwrap(),
            bias: Tensor::zeros(&[450]).unwrap(),
        };
        let x = Tensor::<f32>::zeros(&[2, 54, 5, 5]).unwrap();
        assert_eq!(fc_forward(&x, &p).unwrap().0.shape(), &[2, 450]);

        let p = FcParams::<f32> {
            weight: Tensor::zeros(&[50, 6]).unwrap(),
            bias: Tensor::zeros(&[50]).unwrap(),
        };
        let x = Tensor::<f32>::zeros(&[6, 1, 1]).unwrap();
        let (y, _) = fc_forward(&x.reshape(&[1, 6, 1, 1]).unwrap(), &p).unwrap();
        assert_eq!(y.shape(), &[1, 50]);
        assert!(matches!(
            fc_forward(&Tensor::<f32>::zeros(&[1, 7]).unwrap(), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::fill_normal(&[100], 0.0, 1.0, &mut rng).unwrap();
        let (y, _) = dropout_forward(&x, 0.5, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
        let (y, _) = dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            dropout_forward(&x, 1.0, Mode::Train, &mut rng),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn dropout_survivor_fraction() {
        // Binomial(10000, 0.5): standard error of the fraction is 0.005.
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::full(&[10_000], 1.0).unwrap();
        let (y, _) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((survivors - 0.5).abs() < 3.0 * 0.005, "fraction {survivors}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        // E[y] = x
        let mean = y.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 3.0 * 0.01);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_xent(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert_eq!(s.probs.data(), &[0.5, 0.5]);
        assert!((s.loss - std::f64::consts::LN_2).abs() < 1e-12);

        let s = softmax_xent(&t(&[1, 2], &[1000.0, 0.0]), &[0]).unwrap();
        assert!(s.loss.is_finite() && s.loss.abs() < 1e-12);
        assert!(s.probs.data().iter().all(|v| v.is_finite()));

        let s = softmax_xent(&Tensor::<f32>::from_vec(&[1, 2], vec![0.0, 1000.0]).unwrap(), &[0]).unwrap();
        assert!((s.loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_and_shift_invariance() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let z = randn(&[7, 2], &mut rng).map(|v| 5.0 * v);
            let labels: Vec<usize> = (0..7).map(|_| rng.below(2)).collect();
            let a = softmax_xent(&z, &labels).unwrap();
            for row in a.probs.data().chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            }
            let c = rng.normal(0.0, 10.0);
            let shifted = z.map(|v| v + c);
            let b = softmax_xent(&shifted, &labels).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-6);
        }
    }
}
