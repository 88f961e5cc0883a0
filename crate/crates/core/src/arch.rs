//! Declarative sequential architectures, shape inference, parameter
//! initialization and the forward/backward pass over a whole network.
//!
//! A network is a list of [`LayerSpec`]s. Every convolution is implicitly
//! followed by batch norm + scale + ReLU, as is every fully connected layer
//! except the final softmax classifier, which is a plain linear map.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    self, BnCache, BnScaleParams, ConvCache, ConvParams, DropoutCache, FcCache, FcParams, Mode,
    PoolCache, ReluCache,
};
use crate::tensor::{Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Pool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        out: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax {
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub bn_epsilon: f64,
    pub bn_ema_factor: f64,
}

/// Shape of a layer's input or output: a feature map or a flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dims {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Dims {
    pub fn len(&self) -> usize {
        match *self {
            Dims::Map { c, h, w } => c * h * w,
            Dims::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rendered like the architecture tables: `27×(94×94)` or `1×(450)`.
impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Dims::Map { c, h, w } => write!(f, "{c}×({h}×{w})"),
            Dims::Flat(n) => write!(f, "1×({n})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerShape {
    pub name: String,
    pub input: Dims,
    pub output: Dims,
}

const CONV_KERNELS: [usize; 2] = [3, 5];

impl ArchitectureSpec {
    /// Stable per-layer names: `Conv1`, `Pool1`, …, `FC1`, `Drop1`, `Softmax`.
    pub fn layer_names(&self) -> Vec<String> {
        let (mut conv, mut pool, mut fc, mut drop) = (0, 0, 0, 0);
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { .. } => {
                    conv += 1;
                    format!("Conv{conv}")
                }
                LayerSpec::Pool { .. } => {
                    pool += 1;
                    format!("Pool{pool}")
                }
                LayerSpec::Fc { .. } => {
                    fc += 1;
                    format!("FC{fc}")
                }
                LayerSpec::Dropout { .. } => {
                    drop += 1;
                    format!("Drop{drop}")
                }
                LayerSpec::Softmax { .. } => "Softmax".to_string(),
            })
            .collect()
    }

    pub fn input_dims(&self) -> Dims {
        Dims::Map {
            c: self.input_channels,
            h: self.input_size,
            w: self.input_size,
        }
    }

    /// Input and output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Config(format!("{}: empty input", self.name)));
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_ema_factor > 0.0 && self.bn_ema_factor < 1.0) {
            return Err(Error::Config(format!("{}: invalid batch-norm settings", self.name)));
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax { classes: 2 }) => {}
            _ => {
                return Err(Error::Config(format!(
                    "{}: last layer must be a two-way softmax",
                    self.name
                )))
            }
        }
        let names = self.layer_names();
        let mut cur = self.input_dims();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, (layer, name)) in self.layers.iter().zip(names).enumerate() {
            let bad = |why: String| Error::Config(format!("{}: layer {name}: {why}", self.name));
            let out = match (*layer, cur) {
                (LayerSpec::Conv { out_channels, kernel, stride }, Dims::Map { h, w, .. }) => {
                    if out_channels == 0 || stride == 0 || !CONV_KERNELS.contains(&kernel) {
                        return Err(bad(format!(
                            "unsupported conv (out {out_channels}, kernel {kernel}, stride {stride})"
                        )));
                    }
                    let (Some(oh), Some(ow)) = (
                        nn::conv_out_size(h, kernel, stride),
                        nn::conv_out_size(w, kernel, stride),
                    ) else {
                        return Err(bad(format!("{h}×{w} input smaller than {kernel}×{kernel} kernel")));
                    };
                    Dims::Map { c: out_channels, h: oh, w: ow }
                }
                (LayerSpec::Pool { kernel, stride }, Dims::Map { c, h, w }) => {
                    if kernel == 0 || stride == 0 {
                        return Err(bad("pool kernel and stride must be >= 1".into()));
                    }
                    Dims::Map {
                        c,
                        h: nn::pool_out_size(h, kernel, stride),
                        w: nn::pool_out_size(w, kernel, stride),
                    }
                }
                (LayerSpec::Conv { .. } | LayerSpec::Pool { .. }, Dims::Flat(_)) => {
                    return Err(bad("spatial layer after a fully connected layer".into()))
                }
                (LayerSpec::Fc { out }, _) if out > 0 => Dims::Flat(out),
                (LayerSpec::Fc { .. }, _) => return Err(bad("fc width must be >= 1".into())),
                (LayerSpec::Dropout { rate }, d) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    d
                }
                (LayerSpec::Softmax { classes }, _) => {
                    if i + 1 != self.layers.len() {
                        return Err(bad("softmax must be the last layer".into()));
                    }
                    Dims::Flat(classes)
                }
            };
            shapes.push(LayerShape {
                name,
                input: cur,
                output: out,
            });
            cur = out;
        }
        Ok(shapes)
    }

    /// SHA-256 over the canonical JSON encoding of the spec.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect()
    }

    /// Number of leading layers up to and including the last pooling layer.
    pub fn trunk_len(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Pool { .. }))
            .map_or(0, |i| i + 1)
    }
}

fn standard_stack(
    name: &str,
    input_channels: usize,
    input_size: usize,
    widths: &[usize],
    kernel: usize,
    stride: usize,
    fc: usize,
) -> ArchitectureSpec {
    let mut layers = Vec::new();
    for &w in widths {
        layers.push(LayerSpec::Conv {
            out_channels: w,
            kernel,
            stride,
        });
        layers.push(LayerSpec::Pool { kernel: 2, stride: 2 });
    }
    layers.push(LayerSpec::Fc { out: fc });
    layers.push(LayerSpec::Dropout { rate: 0.5 });
    layers.push(LayerSpec::Softmax { classes: 2 });
    ArchitectureSpec {
        name: name.to_string(),
        input_channels,
        input_size,
        layers,
        bn_epsilon: nn::DEFAULT_BN_EPSILON,
        bn_ema_factor: nn::DEFAULT_BN_EMA,
    }
}

/// The full network on 3×96×96 faces.
pub fn build_lscnn() -> ArchitectureSpec {
    standard_stack("lscnn", 3, 96, &[27, 36, 45, 54], 3, 1, 450)
}

/// One ninth of [`build_lscnn`], on 3×32×32 patches.
pub fn build_patchnet() -> ArchitectureSpec {
    standard_stack("patchnet", 3, 32, &[3, 4, 5, 6], 3, 1, 50)
}

/// Shallow grayscale variant: two 5×5 stride-2 convolutions, wider layers.
pub fn build_nuaa_variant(for_patch: bool) -> ArchitectureSpec {
    if for_patch {
        standard_stack("nuaa-patchnet", 1, 21, &[10, 15], 5, 2, 150)
    } else {
        standard_stack("nuaa-lscnn", 1, 64, &[90, 135], 5, 2, 1350)
    }
}

/// Architecture family selector used by configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lscnn,
    Nuaa,
}

impl Family {
    pub fn whole(self) -> ArchitectureSpec {
        match self {
            Family::Lscnn => build_lscnn(),
            Family::Nuaa => build_nuaa_variant(false),
        }
    }

    pub fn patch(self) -> ArchitectureSpec {
        match self {
            Family::Lscnn => build_patchnet(),
            Family::Nuaa => build_nuaa_variant(true),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams<T = f32> {
    Conv { conv: ConvParams<T>, bn: BnScaleParams<T> },
    Fc { fc: FcParams<T>, bn: BnScaleParams<T> },
    Softmax { fc: FcParams<T> },
    None,
}

/// Parameters of every layer, aligned index-for-index with `spec.layers`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

fn bn_names(layer: &str) -> String {
    match layer.strip_prefix("Conv") {
        Some(i) => format!("BN{i}"),
        None => format!("{layer}-BN"),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Every tensor with its checkpoint name, including batch-norm running
    /// statistics, in layer order.
    pub fn named(&self, spec: &ArchitectureSpec) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (lp, name) in self.layers.iter().zip(spec.layer_names()) {
            match lp {
                LayerParams::Conv { conv, bn } => {
                    out.push((format!("{name}.weight"), &conv.weight));
                    out.push((format!("{name}.bias"), &conv.bias));
                    push_bn(&mut out, &bn_names(&name), bn);
                }
                LayerParams::Fc { fc, bn } => {
                    out.push((format!("{name}.weight"), &fc.weight));
                    out.push((format!("{name}.bias"), &fc.bias));
                    push_bn(&mut out, &bn_names(&name), bn);
                }
                LayerParams::Softmax { fc } => {
                    out.push((format!("{name}.weight"), &fc.weight));
                    out.push((format!("{name}.bias"), &fc.bias));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::named`], same order.
    pub fn named_mut(&mut self, spec: &ArchitectureSpec) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (lp, name) in self.layers.iter_mut().zip(spec.layer_names()) {
            match lp {
                LayerParams::Conv { conv, bn } => {
                    out.push((format!("{name}.weight"), &mut conv.weight));
                    out.push((format!("{name}.bias"), &mut conv.bias));
                    push_bn_mut(&mut out, &bn_names(&name), bn);
                }
                LayerParams::Fc { fc, bn } => {
                    out.push((format!("{name}.weight"), &mut fc.weight));
                    out.push((format!("{name}.bias"), &mut fc.bias));
                    push_bn_mut(&mut out, &bn_names(&name), bn);
                }
                LayerParams::Softmax { fc } => {
                    out.push((format!("{name}.weight"), &mut fc.weight));
                    out.push((format!("{name}.bias"), &mut fc.bias));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Tensors updated by the optimizer, in the order of [`Gradients`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for lp in &mut self.layers {
            match lp {
                LayerParams::Conv { conv, bn } => {
                    out.extend([&mut conv.weight, &mut conv.bias, &mut bn.gamma, &mut bn.beta]);
                }
                LayerParams::Fc { fc, bn } => {
                    out.extend([&mut fc.weight, &mut fc.bias, &mut bn.gamma, &mut bn.beta]);
                }
                LayerParams::Softmax { fc } => out.extend([&mut fc.weight, &mut fc.bias]),
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for lp in &self.layers {
            match lp {
                LayerParams::Conv { conv, bn } => {
                    out.extend([&conv.weight, &conv.bias, &bn.gamma, &bn.beta]);
                }
                LayerParams::Fc { fc, bn } => out.extend([&fc.weight, &fc.bias, &bn.gamma, &bn.beta]),
                LayerParams::Softmax { fc } => out.extend([&fc.weight, &fc.bias]),
                LayerParams::None => {}
            }
        }
        out
    }

    pub fn get(&self, spec: &ArchitectureSpec, name: &str) -> Option<&Tensor<T>> {
        self.named(spec).into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let bn = |b: &BnScaleParams<T>| BnScaleParams {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            ema_factor: b.ema_factor,
            epsilon: b.epsilon,
            updates: b.updates,
        };
        let fc = |f: &FcParams<T>| FcParams {
            weight: f.weight.cast(),
            bias: f.bias.cast(),
        };
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|lp| match lp {
                    LayerParams::Conv { conv, bn: b } => LayerParams::Conv {
                        conv: ConvParams {
                            weight: conv.weight.cast(),
                            bias: conv.bias.cast(),
                            stride: conv.stride,
                        },
                        bn: bn(b),
                    },
                    LayerParams::Fc { fc: f, bn: b } => LayerParams::Fc { fc: fc(f), bn: bn(b) },
                    LayerParams::Softmax { fc: f } => LayerParams::Softmax { fc: fc(f) },
                    LayerParams::None => LayerParams::None,
                })
                .collect(),
        }
    }

    /// Checks every tensor against the shapes inferred from `spec`.
    pub fn validate(&self, spec: &ArchitectureSpec) -> Result<()> {
        let expected = zero_params::<T>(spec)?;
        if expected.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} layers of parameters for a {}-layer spec",
                self.layers.len(),
                expected.layers.len()
            )));
        }
        for ((name, want), (_, got)) in expected.named(spec).iter().zip(self.named(spec)) {
            if want.shape() != got.shape() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        if expected.named(spec).len() != self.named(spec).len() {
            return Err(Error::Shape("parameter layout differs from spec".into()));
        }
        Ok(())
    }
}

fn push_bn<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, name: &str, bn: &'a BnScaleParams<T>) {
    out.push((format!("{name}.gamma"), &bn.gamma));
    out.push((format!("{name}.beta"), &bn.beta));
    out.push((format!("{name}.running_mean"), &bn.running_mean));
    out.push((format!("{name}.running_var"), &bn.running_var));
}

fn push_bn_mut<'a, T>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    name: &str,
    bn: &'a mut BnScaleParams<T>,
) {
    out.push((format!("{name}.gamma"), &mut bn.gamma));
    out.push((format!("{name}.beta"), &mut bn.beta));
    out.push((format!("{name}.running_mean"), &mut bn.running_mean));
    out.push((format!("{name}.running_var"), &mut bn.running_var));
}

fn build_params<T: Scalar>(
    spec: &ArchitectureSpec,
    mut weight: impl FnMut(&[usize]) -> Result<Tensor<T>>,
) -> Result<ModelParams<T>> {
    let shapes = spec.infer_shapes()?;
    let bn = |c| BnScaleParams::identity(c, spec.bn_ema_factor, spec.bn_epsilon);
    let mut layers = Vec::with_capacity(shapes.len());
    for (layer, shape) in spec.layers.iter().zip(&shapes) {
        let lp = match (*layer, shape.input) {
            (LayerSpec::Conv { out_channels, kernel, stride }, Dims::Map { c, .. }) => LayerParams::Conv {
                conv: ConvParams {
                    weight: weight(&[out_channels, c, kernel, kernel])?,
                    bias: Tensor::zeros(&[out_channels])?,
                    stride,
                },
                bn: bn(out_channels)?,
            },
            (LayerSpec::Fc { out }, input) => LayerParams::Fc {
                fc: FcParams {
                    weight: weight(&[out, input.len()])?,
                    bias: Tensor::zeros(&[out])?,
                },
                bn: bn(out)?,
            },
            (LayerSpec::Softmax { classes }, input) => LayerParams::Softmax {
                fc: FcParams {
                    weight: weight(&[classes, input.len()])?,
                    bias: Tensor::zeros(&[classes])?,
                },
            },
            _ => LayerParams::None,
        };
        layers.push(lp);
    }
    Ok(ModelParams { layers })
}

/// All weights zero, biases zero, batch norm at identity.
pub fn zero_params<T: Scalar>(spec: &ArchitectureSpec) -> Result<ModelParams<T>> {
    build_params(spec, |s| Tensor::zeros(s))
}

/// Conv and fc weights from `Normal(0, std)`, biases zero, batch norm at
/// identity (gamma 1, beta 0, mean 0, var 1). Weights are drawn in layer order.
pub fn init_params<T: Scalar>(spec: &ArchitectureSpec, std: f64, rng: &mut Rng) -> Result<ModelParams<T>> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::InvalidParameter(format!("init std must be > 0, got {std}")));
    }
    build_params(spec, |s| Tensor::fill_normal(s, 0.0, std, rng))
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum LayerCache<T> {
    Conv(ConvCache<T>, BnCache<T>, ReluCache),
    Pool(PoolCache),
    /// The first field is the input shape before flattening.
    Fc(Vec<usize>, FcCache<T>, BnCache<T>, ReluCache),
    Dropout(DropoutCache<T>),
    Softmax(Vec<usize>, FcCache<T>),
}

/// Per-layer state recorded by a train-mode forward pass.
#[derive(Debug)]
pub struct ForwardCache<T = f32> {
    layers: Vec<LayerCache<T>>,
}

#[derive(Debug)]
pub struct ForwardOutput<T = f32> {
    /// `N×2`
    pub logits: Tensor<T>,
    /// `N×2`
    pub probs: Tensor<T>,
    /// Present only for train-mode passes.
    pub cache: Option<ForwardCache<T>>,
}

/// Gradients of the trainable tensors, ordered as [`ModelParams::trainable_mut`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

fn check_batch<T: Scalar>(spec: &ArchitectureSpec, batch: &Tensor<T>) -> Result<()> {
    let want = [spec.input_channels, spec.input_size, spec.input_size];
    if batch.rank() != 4 || batch.shape()[1..] != want {
        return Err(Error::Shape(format!(
            "{} expects N×{}×{}×{} input, got {:?}",
            spec.name,
            want[0],
            want[1],
            want[2],
            batch.shape()
        )));
    }
    Ok(())
}

fn flatten<T: Scalar>(x: Tensor<T>) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    let f = x.len() / n;
    x.reshape(&[n, f])
}

fn params_missing(name: &str) -> Error {
    Error::State(format!("parameters for layer {name} do not match the spec"))
}

/// Runs the network on an `N×C×H×W` batch.
///
/// In train mode batch norm uses batch statistics and updates the running
/// averages in `params`, dropout draws its mask from `rng`, and the returned
/// output carries the cache needed by [`backward`].
pub fn forward<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &mut ModelParams<T>,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardOutput<T>> {
    if mode == Mode::Infer {
        let (logits, probs) = infer(spec, params, batch)?;
        return Ok(ForwardOutput {
            logits,
            probs,
            cache: None,
        });
    }
    check_batch(spec, batch)?;
    if params.layers.len() != spec.layers.len() {
        return Err(params_missing(&spec.name));
    }
    let names = spec.layer_names();
    let mut x = batch.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    for ((layer, lp), name) in spec.layers.iter().zip(&mut params.layers).zip(&names) {
        let cache = match (layer, lp) {
            (LayerSpec::Conv { .. }, LayerParams::Conv { conv, bn }) => {
                let (y, cc) = nn::conv2d_forward(&x, conv)?;
                let (y, bc) = nn::batchnorm_scale_forward(&y, bn, Mode::Train)?;
                let (y, rc) = nn::relu_forward(&y);
                x = y;
                LayerCache::Conv(cc, bc, rc)
            }
            (LayerSpec::Pool { kernel, stride }, LayerParams::None) => {
                let (y, pc) = nn::maxpool_forward(&x, *kernel, *stride)?;
                x = y;
                LayerCache::Pool(pc)
            }
            (LayerSpec::Fc { .. }, LayerParams::Fc { fc, bn }) => {
                let shape = x.shape().to_vec();
                let (y, fcc) = nn::fc_forward(&flatten(x)?, fc)?;
                let (y, bc) = nn::batchnorm_scale_forward(&y, bn, Mode::Train)?;
                let (y, rc) = nn::relu_forward(&y);
                x = y;
                LayerCache::Fc(shape, fcc, bc, rc)
            }
            (LayerSpec::Dropout { rate }, LayerParams::None) => {
                let (y, dc) = nn::dropout_forward(&x, *rate, Mode::Train, rng)?;
                x = y;
                LayerCache::Dropout(dc)
            }
            (LayerSpec::Softmax { .. }, LayerParams::Softmax { fc }) => {
                let shape = x.shape().to_vec();
                let (y, fcc) = nn::fc_forward(&flatten(x)?, fc)?;
                x = y;
                LayerCache::Softmax(shape, fcc)
            }
            _ => return Err(params_missing(name)),
        };
        caches.push(cache);
    }
    let probs = nn::softmax(&x)?;
    Ok(ForwardOutput {
        logits: x,
        probs,
        cache: Some(ForwardCache { layers: caches }),
    })
}

/// Inference-mode pass over the first `n_layers` layers of the spec.
pub fn infer_prefix<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    n_layers: usize,
) -> Result<Tensor<T>> {
    check_batch(spec, batch)?;
    if params.layers.len() != spec.layers.len() {
        return Err(params_missing(&spec.name));
    }
    let names = spec.layer_names();
    let mut x = batch.clone();
    for ((layer, lp), name) in spec.layers.iter().zip(&params.layers).zip(&names).take(n_layers) {
        x = match (layer, lp) {
            (LayerSpec::Conv { .. }, LayerParams::Conv { conv, bn }) => {
                let (y, _) = nn::conv2d_forward(&x, conv)?;
                let (y, _) = nn::batchnorm_scale_infer(&y, bn)?;
                nn::relu_forward(&y).0
            }
            (LayerSpec::Pool { kernel, stride }, LayerParams::None) => nn::maxpool_forward(&x, *kernel, *stride)?.0,
            (LayerSpec::Fc { .. }, LayerParams::Fc { fc, bn }) => {
                let (y, _) = nn::fc_forward(&flatten(x)?, fc)?;
                let (y, _) = nn::batchnorm_scale_infer(&y, bn)?;
                nn::relu_forward(&y).0
            }
            (LayerSpec::Dropout { .. }, LayerParams::None) => x,
            (LayerSpec::Softmax { .. }, LayerParams::Softmax { fc }) => nn::fc_forward(&flatten(x)?, fc)?.0,
            _ => return Err(params_missing(name)),
        };
    }
    Ok(x)
}

/// Inference-mode logits and probabilities; `params` are not modified.
pub fn infer<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let logits = infer_prefix(spec, params, batch, spec.layers.len())?;
    let probs = nn::softmax(&logits)?;
    Ok((logits, probs))
}

/// Back-propagates `grad_logits` through a train-mode forward pass.
pub fn backward<T: Scalar>(
    spec: &ArchitectureSpec,
    params: &ModelParams<T>,
    cache: Option<ForwardCache<T>>,
    grad_logits: &Tensor<T>,
) -> Result<Gradients<T>> {
    let cache = cache.ok_or_else(|| Error::State("backward needs the cache of a train-mode forward pass".into()))?;
    if cache.layers.len() != spec.layers.len() || params.layers.len() != spec.layers.len() {
        return Err(Error::State("forward cache does not match the spec".into()));
    }
    let mut g = grad_logits.clone();
    let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(spec.layers.len());
    for (lc, lp) in cache.layers.iter().zip(&params.layers).rev() {
        let grads = match (lc, lp) {
            (LayerCache::Conv(cc, bc, rc), LayerParams::Conv { conv, bn }) => {
                let r = nn::relu_backward(rc, &g)?;
                let b = nn::batchnorm_scale_backward(bc, bn, &r.input)?;
                let c = nn::conv2d_backward(cc, conv, &b.input)?;
                g = c.input;
                let [dw, db] = <[Tensor<T>; 2]>::try_from(c.params).expect("conv grads");
                let [dg, dbeta] = <[Tensor<T>; 2]>::try_from(b.params).expect("bn grads");
                vec![dw, db, dg, dbeta]
            }
            (LayerCache::Pool(pc), LayerParams::None) => {
                g = nn::maxpool_backward(pc, &g)?.input;
                Vec::new()
            }
            (LayerCache::Fc(shape, fc_cache, bc, rc), LayerParams::Fc { fc, bn }) => {
                let r = nn::relu_backward(rc, &g)?;
                let b = nn::batchnorm_scale_backward(bc, bn, &r.input)?;
                let f = nn::fc_backward(fc_cache, fc, &b.input)?;
                g = f.input.reshape(shape)?;
                let [dw, db] = <[Tensor<T>; 2]>::try_from(f.params).expect("fc grads");
                let [dg, dbeta] = <[Tensor<T>; 2]>::try_from(b.params).expect("bn grads");
                vec![dw, db, dg, dbeta]
            }
            (LayerCache::Dropout(dc), LayerParams::None) => {
                g = nn::dropout_backward(dc, &g)?.input;
                Vec::new()
            }
            (LayerCache::Softmax(shape, fc_cache), LayerParams::Softmax { fc }) => {
                let f = nn::fc_backward(fc_cache, fc, &g)?;
                g = f.input.reshape(shape)?;
                f.params
            }
            _ => return Err(Error::State("forward cache does not match the parameters".into())),
        };
        per_layer.push(grads);
    }
    per_layer.reverse();
    Ok(Gradients {
        tensors: per_layer.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(spec: &ArchitectureSpec) -> Vec<(String, String)> {
        spec.infer_shapes()
            .unwrap()
            .into_iter()
            .filter(|s| !s.name.starts_with("Drop"))
            .map(|s| (s.name, s.output.to_string()))
            .collect()
    }

    fn expected(rows: &[(&str, &str)]) -> Vec<(String, String)> {
        rows.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn lscnn_shape_chain() {
        assert_eq!(
            table(&build_lscnn()),
            expected(&[
                ("Conv1", "27×(94×94)"),
                ("Pool1", "27×(47×47)"),
                ("Conv2", "36×(45×45)"),
                ("Pool2", "36×(23×23)"),
                ("Conv3", "45×(21×21)"),
                ("Pool3", "45×(11×11)"),
                ("Conv4", "54×(9×9)"),
                ("Pool4", "54×(5×5)"),
                ("FC1", "1×(450)"),
                ("Softmax", "1×(2)"),
            ])
        );
    }

    #[test]
    fn patchnet_shape_chain() {
        assert_eq!(
            table(&build_patchnet()),
            expected(&[
                ("Conv1", "3×(30×30)"),
                ("Pool1", "3×(15×15)"),
                ("Conv2", "4×(13×13)"),
                ("Pool2", "4×(7×7)"),
                ("Conv3", "5×(5×5)"),
                ("Pool3", "5×(3×3)"),
                ("Conv4", "6×(1×1)"),
                ("Pool4", "6×(1×1)"),
                ("FC1", "1×(50)"),
                ("Softmax", "1×(2)"),
            ])
        );
    }

    #[test]
    fn patchnet_is_one_ninth_of_lscnn() {
        let big = build_lscnn();
        let small = build_patchnet();
        let bw = big.conv_widths();
        let sw = small.conv_widths();
        assert_eq!(bw, sw.iter().map(|w| 9 * w).collect::<Vec<_>>());
        let fc = |s: &ArchitectureSpec| {
            s.layers
                .iter()
                .find_map(|l| match l {
                    LayerSpec::Fc { out } => Some(*out),
                    _ => None,
                })
                .unwrap()
        };
        assert_eq!(fc(&big), 9 * fc(&small));
    }

    #[test]
    fn nuaa_variants() {
        let whole = build_nuaa_variant(false);
        assert_eq!(whole.input_dims().to_string(), "1×(64×64)");
        assert_eq!(whole.conv_widths(), vec![90, 135]);
        let shapes = whole.infer_shapes().unwrap();
        assert_eq!(shapes.iter().find(|s| s.name == "FC1").unwrap().output, Dims::Flat(1350));
        let patch = build_nuaa_variant(true);
        assert_eq!(patch.input_dims().to_string(), "1×(21×21)");
        assert_eq!(patch.conv_widths(), vec![10, 15]);
        let shapes = patch.infer_shapes().unwrap();
        assert_eq!(shapes.iter().find(|s| s.name == "FC1").unwrap().output, Dims::Flat(150));
    }

    #[test]
    fn shape_inference_is_idempotent() {
        let s = build_lscnn();
        assert_eq!(s.infer_shapes().unwrap(), s.infer_shapes().unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = build_patchnet();
        s.layers.pop();
        assert!(matches!(s.infer_shapes(), Err(Error::Config(_))));
        let mut s = build_patchnet();
        s.input_size = 8;
        assert!(matches!(s.infer_shapes(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_counts() {
        let spec = build_lscnn();
        let p: ModelParams = zero_params(&spec).unwrap();
        let named = p.named(&spec);
        let size = |n: &str| named.iter().find(|(k, _)| k == n).unwrap().1.len();
        assert_eq!(size("Conv1.weight") + size("Conv1.bias"), 756);
        assert_eq!(p.get(&spec, "FC1.weight").unwrap().shape(), &[450, 1350]);
        assert_eq!(p.get(&spec, "Softmax.weight").unwrap().shape(), &[2, 450]);
        assert!(p.get(&spec, "FC1-BN.running_var").is_some());
        assert!(p.get(&spec, "BN4.gamma").is_some());
    }

    #[test]
    fn init_params_contract() {
        let spec = build_lscnn();
        let p: ModelParams = init_params(&spec, 1e-4, &mut Rng::new(1)).unwrap();
        let w = p.get(&spec, "Conv1.weight").unwrap();
        assert_eq!(w.len(), 729);
        let n = w.len() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 1e-4).abs() < 0.1 * 1e-4, "std {sd}");
        for (name, t) in p.named(&spec) {
            if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".running_mean") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") || name.ends_with(".running_var") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        let q: ModelParams = init_params(&spec, 1e-4, &mut Rng::new(1)).unwrap();
        assert_eq!(p, q);
        assert!(init_params::<f32>(&spec, 0.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn forward_shapes_and_modes() {
        let spec = build_lscnn();
        let mut rng = Rng::new(3);
        let mut p: ModelParams = init_params(&spec, 0.01, &mut rng).unwrap();
        let x = Tensor::fill_normal(&[1, 3, 96, 96], 0.0, 1.0, &mut rng).unwrap();
        let out = forward(&spec, &mut p, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2]);
        assert!(out.cache.is_none());
        let again = forward(&spec, &mut p, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(out.probs, again.probs);

        let bad = Tensor::<f32>::zeros(&[1, 3, 32, 32]).unwrap();
        assert!(matches!(forward(&spec, &mut p, &bad, Mode::Infer, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_probabilities_sum_to_one() {
        let spec = build_patchnet();
        let mut rng = Rng::new(4);
        let mut p: ModelParams = init_params(&spec, 0.1, &mut rng).unwrap();
        let x = Tensor::fill_normal(&[64, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let out = forward(&spec, &mut p, &x, Mode::Train, &mut rng).unwrap();
        for row in out.probs.data().chunks(2) {
            assert!((row[0] as f64 + row[1] as f64 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_requires_train_cache() {
        let spec = build_patchnet();
        let mut rng = Rng::new(5);
        let mut p: ModelParams = init_params(&spec, 0.1, &mut rng).unwrap();
        let x = Tensor::fill_normal(&[2, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let out = forward(&spec, &mut p, &x, Mode::Infer, &mut rng).unwrap();
        let g = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(backward(&spec, &p, out.cache, &g), Err(Error::State(_))));
    }

    #[test]
    fn gradients_align_with_trainables() {
        let spec = build_patchnet();
        let mut rng = Rng::new(6);
        let mut p: ModelParams = init_params(&spec, 0.1, &mut rng).unwrap();
        let x = Tensor::fill_normal(&[4, 3, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let out = forward(&spec, &mut p, &x, Mode::Train, &mut rng).unwrap();
        let xent = nn::softmax_xent(&out.logits, &[0, 1, 0, 1]).unwrap();
        let grads = backward(&spec, &p, out.cache, &xent.grad_logits).unwrap();
        let shapes: Vec<Vec<usize>> = p.trainable().iter().map(|t| t.shape().to_vec()).collect();
        let gshapes: Vec<Vec<usize>> = grads.tensors.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, gshapes);
    }

    #[test]
    fn digest_distinguishes_specs() {
        assert_eq!(build_lscnn().digest(), build_lscnn().digest());
        assert_ne!(build_lscnn().digest(), build_patchnet().digest());
    }
}
