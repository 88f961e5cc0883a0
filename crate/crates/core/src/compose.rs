//! The fixed 3×3 patch grid and the block-diagonal composition of nine
//! PatchNets into one large network.
//!
//! Block `k` (0-based, row-major from the top-left patch) of every conv layer
//! of the large network holds the weights of PatchNet `k`. The first conv
//! layer reads the shared input planes, so each block copies its PatchNet's
//! kernels over all input channels; from the second conv layer on, block `k`
//! only connects to block `k` of the previous layer and every cross-block
//! weight is zero. The fully connected layers are drawn fresh.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchitectureSpec, LayerParams, LayerSpec, ModelParams};
use crate::error::{Error, Result};
use crate::nn::{BnScaleParams, ConvParams};
use crate::tensor::{Rng, Scalar, Tensor};

pub const GRID: usize = 3;
pub const PATCHES: usize = GRID * GRID;

/// Where the patch grid sits when the image side is not a multiple of 3.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    /// Grid anchored top-left; leftover rows/columns at the bottom/right are unused.
    #[default]
    DropTrailing,
    /// Leftover pixels split evenly between both sides (extra pixel at the end).
    Centered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    image_size: usize,
    patch_size: usize,
    offset: usize,
}

impl PatchGrid {
    pub fn new(image_size: usize) -> Result<Self> {
        Self::with_policy(image_size, RemainderPolicy::DropTrailing)
    }

    pub fn with_policy(image_size: usize, policy: RemainderPolicy) -> Result<Self> {
        if image_size < GRID {
            return Err(Error::InvalidInput(format!(
                "image of {image_size}×{image_size} pixels is too small for a 3×3 patch grid"
            )));
        }
        let patch_size = image_size / GRID;
        let offset = match policy {
            RemainderPolicy::DropTrailing => 0,
            RemainderPolicy::Centered => (image_size - GRID * patch_size) / 2,
        };
        Ok(Self {
            image_size,
            patch_size,
            offset,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Top-left pixel `(row, col)` of patch `k` (0-based; `k = 0` is p1).
    pub fn origin(&self, k: usize) -> (usize, usize) {
        (
            self.offset + (k / GRID) * self.patch_size,
            self.offset + (k % GRID) * self.patch_size,
        )
    }

    /// Patch `k` of a `C×H×W` image.
    pub fn extract<T: Scalar>(&self, face: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        let [c, h, w] = self.check_face(face)?;
        if k >= PATCHES {
            return Err(Error::Bounds(format!("patch index {k} outside 0..9")));
        }
        let p = self.patch_size;
        let (r0, c0) = self.origin(k);
        let mut data = Vec::with_capacity(c * p * p);
        for ch in 0..c {
            for r in r0..r0 + p {
                let start = (ch * h + r) * w + c0;
                data.extend_from_slice(&face.data()[start..start + p]);
            }
        }
        Tensor::from_vec(&[c, p, p], data)
    }

    /// Inverse of [`split_patches`] for the covered region; uncovered pixels are zero.
    pub fn assemble<T: Scalar>(&self, patches: &[Tensor<T>]) -> Result<Tensor<T>> {
        if patches.len() != PATCHES {
            return Err(Error::InvalidInput(format!("expected 9 patches, got {}", patches.len())));
        }
        let p = self.patch_size;
        let c = patches[0].shape()[0];
        let n = self.image_size;
        let mut face = Tensor::zeros(&[c, n, n])?;
        for (k, patch) in patches.iter().enumerate() {
            if patch.shape() != [c, p, p] {
                return Err(Error::Shape(format!("patch {} has shape {:?}", k + 1, patch.shape())));
            }
            let (r0, c0) = self.origin(k);
            for ch in 0..c {
                for r in 0..p {
                    let dst = (ch * n + r0 + r) * n + c0;
                    face.data_mut()[dst..dst + p].copy_from_slice(&patch.data()[(ch * p + r) * p..(ch * p + r + 1) * p]);
                }
            }
        }
        Ok(face)
    }

    fn check_face<T: Scalar>(&self, face: &Tensor<T>) -> Result<[usize; 3]> {
        match *face.shape() {
            [c, h, w] if h == self.image_size && w == self.image_size => Ok([c, h, w]),
            ref s => Err(Error::InvalidInput(format!(
                "expected a C×{n}×{n} face, got {s:?}",
                n = self.image_size
            ))),
        }
    }
}

/// The nine patches p1..p9 of a `C×H×W` face, row-major from the top-left.
pub fn split_patches<T: Scalar>(face: &Tensor<T>, grid: &PatchGrid) -> Result<Vec<Tensor<T>>> {
    (0..PATCHES).map(|k| grid.extract(face, k)).collect()
}

/// Channel ranges owned by each block in one layer of the large network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerBlocks {
    Conv {
        /// Output-channel range of each block.
        outputs: Vec<Range<usize>>,
        /// Input-channel range of each block; `None` for the first conv layer,
        /// whose input planes are shared by every block.
        inputs: Option<Vec<Range<usize>>>,
    },
    /// Drawn from a normal distribution instead of copied.
    RandomInit,
    /// Parameter-free layer.
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMap {
    pub layers: Vec<LayerBlocks>,
}

fn blocks(width: usize) -> Vec<Range<usize>> {
    (0..PATCHES).map(|k| k * width..(k + 1) * width).collect()
}

impl BlockMap {
    /// Validates that `whole` is nine side-by-side copies of `patch` and
    /// returns the channel partition.
    pub fn new(patch: &ArchitectureSpec, whole: &ArchitectureSpec) -> Result<Self> {
        patch.infer_shapes()?;
        whole.infer_shapes()?;
        let err = |why: String| Error::Composition(format!("{} from {}: {why}", whole.name, patch.name));
        if patch.layers.len() != whole.layers.len() {
            return Err(err("layer counts differ".into()));
        }
        if patch.input_channels != whole.input_channels {
            return Err(err("input channel counts differ".into()));
        }
        if whole.input_size / GRID != patch.input_size {
            return Err(err(format!(
                "patch input {} is not a third of {}",
                patch.input_size, whole.input_size
            )));
        }
        let mut layers = Vec::with_capacity(whole.layers.len());
        let mut prev_width: Option<usize> = None;
        for (i, (p, w)) in patch.layers.iter().zip(&whole.layers).enumerate() {
            let entry = match (*p, *w) {
                (
                    LayerSpec::Conv { out_channels: pw, kernel: pk, stride: ps },
                    LayerSpec::Conv { out_channels: ww, kernel: wk, stride: wst },
                ) => {
                    if pk != wk || ps != wst {
                        return Err(err(format!("layer {i}: kernel/stride differ")));
                    }
                    if ww != PATCHES * pw {
                        return Err(err(format!("layer {i}: width {ww} is not 9 × {pw}")));
                    }
                    let inputs = prev_width.map(blocks);
                    prev_width = Some(pw);
                    LayerBlocks::Conv {
                        outputs: blocks(pw),
                        inputs,
                    }
                }
                (LayerSpec::Pool { kernel: a, stride: b }, LayerSpec::Pool { kernel: c, stride: d }) => {
                    if (a, b) != (c, d) {
                        return Err(err(format!("layer {i}: pooling differs")));
                    }
                    LayerBlocks::Passthrough
                }
                (LayerSpec::Fc { .. }, LayerSpec::Fc { .. }) | (LayerSpec::Softmax { .. }, LayerSpec::Softmax { .. }) => {
                    LayerBlocks::RandomInit
                }
                (LayerSpec::Dropout { .. }, LayerSpec::Dropout { .. }) => LayerBlocks::Passthrough,
                _ => return Err(err(format!("layer {i}: layer kinds differ"))),
            };
            layers.push(entry);
        }
        Ok(Self { layers })
    }

    /// Output-channel range of block `k` in the last conv layer.
    pub fn final_block(&self, k: usize) -> Option<Range<usize>> {
        self.layers.iter().rev().find_map(|l| match l {
            LayerBlocks::Conv { outputs, .. } => outputs.get(k).cloned(),
            _ => None,
        })
    }
}

fn copy_bn<T: Scalar>(dst: &mut BnScaleParams<T>, src: &BnScaleParams<T>, lo: usize) -> Result<()> {
    dst.gamma.assign_channels(lo, &src.gamma)?;
    dst.beta.assign_channels(lo, &src.beta)?;
    dst.running_mean.assign_channels(lo, &src.running_mean)?;
    dst.running_var.assign_channels(lo, &src.running_var)?;
    Ok(())
}

fn copy_conv<T: Scalar>(
    dst: &mut ConvParams<T>,
    src: &ConvParams<T>,
    out: &Range<usize>,
    input: Option<&Range<usize>>,
) -> Result<()> {
    let [_, dst_in, k, _] = *dst.weight.shape() else {
        unreachable!("conv weights are rank 4")
    };
    let src_in = src.in_channels();
    let in_lo = input.map_or(0, |r| r.start);
    if src.out_channels() != out.len() || in_lo + src_in > dst_in {
        return Err(Error::Composition("PatchNet conv shape does not fit its block".into()));
    }
    let kk = k * k;
    for o in 0..out.len() {
        let s = o * src_in * kk;
        let d = ((out.start + o) * dst_in + in_lo) * kk;
        dst.weight.data_mut()[d..d + src_in * kk].copy_from_slice(&src.weight.data()[s..s + src_in * kk]);
    }
    dst.bias.assign_channels(out.start, &src.bias)
}

/// Builds large-network parameters from nine trained PatchNets.
///
/// Conv weights, biases and batch-norm parameters and statistics are copied
/// into their blocks; cross-block conv weights stay exactly zero. The fully
/// connected and softmax weights are drawn from `Normal(0, fc_std)` (in that
/// order) with zero biases, and the fully connected layer's batch norm starts
/// at identity.
///
/// The copied running statistics describe patches, while a composed block
/// sees the whole face. Every update counter is therefore zero, so the first
/// train-mode batch replaces the statistics and later ones average over
/// whole-face batches only.
pub fn compose<T: Scalar>(
    patchnets: &[ModelParams<T>],
    patch_spec: &ArchitectureSpec,
    whole_spec: &ArchitectureSpec,
    fc_std: f64,
    rng: &mut Rng,
) -> Result<ModelParams<T>> {
    if patchnets.len() != PATCHES {
        return Err(Error::Composition(format!("need 9 PatchNets, got {}", patchnets.len())));
    }
    let map = BlockMap::new(patch_spec, whole_spec)?;
    for (k, p) in patchnets.iter().enumerate() {
        p.validate(patch_spec)
            .map_err(|e| Error::Composition(format!("PatchNet p{}: {e}", k + 1)))?;
    }
    let mut out: ModelParams<T> = arch::zero_params(whole_spec)?;
    for (li, blocks) in map.layers.iter().enumerate() {
        match blocks {
            LayerBlocks::Conv { outputs, inputs } => {
                let LayerParams::Conv { conv, bn } = &mut out.layers[li] else {
                    unreachable!("block map and params agree")
                };
                for (k, range) in outputs.iter().enumerate() {
                    let LayerParams::Conv { conv: pc, bn: pb } = &patchnets[k].layers[li] else {
                        unreachable!("validated PatchNet layout")
                    };
                    copy_conv(conv, pc, range, inputs.as_ref().map(|r| &r[k]))?;
                    copy_bn(bn, pb, range.start)?;
                }
            }
            LayerBlocks::RandomInit => match &mut out.layers[li] {
                LayerParams::Fc { fc, .. } | LayerParams::Softmax { fc } => {
                    fc.weight = Tensor::fill_normal(fc.weight.shape(), 0.0, fc_std, rng)?;
                }
                _ => unreachable!("random-init layers carry fc parameters"),
            },
            LayerBlocks::Passthrough => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    /// 0-based block index.
    pub block: usize,
    /// Entries of the block's trunk output that changed under perturbation.
    pub changed: usize,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndependenceReport {
    pub blocks: Vec<BlockCheck>,
}

impl IndependenceReport {
    pub fn holds(&self) -> bool {
        self.blocks.iter().all(|b| b.changed == 0)
    }

    /// `Err` listing every violating block.
    pub fn into_result(self) -> Result<Self> {
        if self.holds() {
            return Ok(self);
        }
        let detail: Vec<String> = self
            .blocks
            .iter()
            .filter(|b| b.changed > 0)
            .map(|b| format!("p{}: {} entries changed (max |Δ| {:.3e})", b.block + 1, b.changed, b.max_abs_diff))
            .collect();
        Err(Error::Composition(format!("block independence violated: {}", detail.join("; "))))
    }
}

fn perturb_block<T: Scalar>(params: &mut ModelParams<T>, map: &BlockMap, skip: usize, rng: &mut Rng) {
    for (li, blocks) in map.layers.iter().enumerate() {
        let LayerBlocks::Conv { outputs, .. } = blocks else { continue };
        let LayerParams::Conv { conv, bn } = &mut params.layers[li] else { continue };
        let per_out = conv.weight.len() / conv.out_channels();
        for (j, range) in outputs.iter().enumerate() {
            if j == skip {
                continue;
            }
            let noise = |rng: &mut Rng| T::from_f64(rng.normal(0.0, 1.0));
            for o in range.clone() {
                for w in &mut conv.weight.data_mut()[o * per_out..(o + 1) * per_out] {
                    *w += noise(rng);
                }
                conv.bias[o] += noise(rng);
                bn.gamma[o] += noise(rng);
                bn.beta[o] += noise(rng);
                bn.running_mean[o] += noise(rng);
                bn.running_var[o] += noise(rng).abs();
            }
        }
    }
}

/// Perturbs every conv-layer parameter of the blocks other than `k` and
/// checks, for each `k`, that block `k`'s channels of the trunk output (after
/// the last pooling layer, inference mode) are unchanged. Values are compared
/// exactly, with `+0.0 == -0.0`.
pub fn verify_block_independence<T: Scalar>(
    composed: &ModelParams<T>,
    patch_spec: &ArchitectureSpec,
    whole_spec: &ArchitectureSpec,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<IndependenceReport> {
    let map = BlockMap::new(patch_spec, whole_spec)?;
    composed.validate(whole_spec)?;
    let n = whole_spec.input_size;
    let x: Tensor<T> = Tensor::fill_normal(&[batch_size.max(1), whole_spec.input_channels, n, n], 0.0, 1.0, rng)?;
    let trunk = whole_spec.trunk_len();
    let reference = arch::infer_prefix(whole_spec, composed, &x, trunk)?;
    let mut report = IndependenceReport { blocks: Vec::new() };
    for k in 0..PATCHES {
        let mut perturbed = composed.clone();
        perturb_block(&mut perturbed, &map, k, rng);
        let out = arch::infer_prefix(whole_spec, &perturbed, &x, trunk)?;
        let range = map.final_block(k).expect("conv layers present");
        let a = reference.slice_axis(1, range.start, range.end)?;
        let b = out.slice_axis(1, range.start, range.end)?;
        let mut changed = 0;
        let mut max_abs_diff: f64 = 0.0;
        for (&u, &v) in a.data().iter().zip(b.data()) {
            if u != v {
                changed += 1;
                max_abs_diff = max_abs_diff.max((u.as_f64() - v.as_f64()).abs());
            }
        }
        report.blocks.push(BlockCheck {
            block: k,
            changed,
            max_abs_diff,
        });
    }
    Ok(report)
}
