//! Binary checkpoint files.
//!
//! Layout, little-endian: magic `LSCN`, format version `u32`, the 32-byte
//! architecture digest, tensor count `u32`, then per tensor the name length
//! `u32`, the UTF-8 name, rank `u32`, each dimension as `u32`, a dtype tag
//! `u8` (0 = `f32`) and the raw values.
//!
//! Besides the model tensors a checkpoint carries `meta.iteration` and
//! `meta.bn_updates` (batch-norm update counts in layer order), and may carry
//! `meta.norm_mean` and, per trainable tensor, `adam.<name>.m|v|t`.

use std::fs;
use std::path::Path;

use crate::arch::{ArchitectureSpec, LayerParams, ModelParams};
use crate::data::{NormalizationStats, NORMALIZATION_DIVISOR};
use crate::error::{Error, Result};
use crate::nn::BnScaleParams;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSCN";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const ITERATION: &str = "meta.iteration";
const NORM_MEAN: &str = "meta.norm_mean";
const BN_UPDATES: &str = "meta.bn_updates";
/// Largest iteration count an `f32` holds exactly.
const MAX_ITERATION: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
}

fn batch_norms(params: &ModelParams) -> Vec<&BnScaleParams> {
    params
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerParams::Conv { bn, .. } | LayerParams::Fc { bn, .. } => Some(bn),
            _ => None,
        })
        .collect()
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl Checkpoint {
    pub fn from_params(
        spec: &ArchitectureSpec,
        params: &ModelParams,
        iteration: u64,
        stats: Option<&NormalizationStats>,
        adam: Option<&[AdamState]>,
    ) -> Result<Self> {
        params.validate(spec)?;
        if iteration > MAX_ITERATION {
            return Err(Error::InvalidParameter(format!("iteration {iteration} too large to record")));
        }
        let named = params.named(spec);
        let mut tensors: Vec<(String, Tensor)> = named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        tensors.push((ITERATION.into(), Tensor::from_vec(&[1], vec![iteration as f32])?));
        let updates: Vec<f32> = batch_norms(params).iter().map(|bn| bn.updates.min(MAX_ITERATION) as f32).collect();
        if !updates.is_empty() {
            tensors.push((BN_UPDATES.into(), Tensor::from_vec(&[updates.len()], updates)?));
        }
        if let Some(stats) = stats {
            tensors.push((NORM_MEAN.into(), Tensor::from_vec(&[stats.mean.len()], stats.mean.clone())?));
        }
        if let Some(states) = adam {
            let names: Vec<&String> = named.iter().map(|(n, _)| n).filter(|n| !is_running_stat(n)).collect();
            if names.len() != states.len() {
                return Err(Error::State(format!(
                    "{} optimizer states for {} trainable tensors",
                    states.len(),
                    names.len()
                )));
            }
            for (name, st) in names.into_iter().zip(states) {
                tensors.push((format!("adam.{name}.m"), st.m.clone()));
                tensors.push((format!("adam.{name}.v"), st.v.clone()));
                tensors.push((format!("adam.{name}.t"), Tensor::from_vec(&[1], vec![st.t as f32])?));
            }
        }
        Ok(Self {
            digest: spec.digest(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iteration(&self) -> u64 {
        self.get(ITERATION).map_or(0, |t| t.data()[0] as u64)
    }

    pub fn normalization(&self) -> Option<NormalizationStats> {
        self.get(NORM_MEAN).map(|t| NormalizationStats {
            mean: t.data().to_vec(),
            divisor: NORMALIZATION_DIVISOR,
        })
    }

    pub fn check_spec(&self, spec: &ArchitectureSpec) -> Result<()> {
        if self.digest != spec.digest() {
            return Err(Error::Format {
                field: "spec_digest",
                detail: format!(
                    "checkpoint {} does not match architecture `{}` ({})",
                    hex::encode(self.digest),
                    spec.name,
                    hex::encode(spec.digest())
                ),
            });
        }
        Ok(())
    }

    /// Model parameters, after checking the digest and every shape.
    pub fn params(&self, spec: &ArchitectureSpec) -> Result<ModelParams> {
        self.check_spec(spec)?;
        let mut params: ModelParams = crate::arch::zero_params(spec)?;
        for (name, slot) in params.named_mut(spec) {
            let t = self.get(&name).ok_or_else(|| Error::Format {
                field: "tensors",
                detail: format!("missing tensor `{name}`"),
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Format {
                    field: "dims",
                    detail: format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t.clone();
        }
        if let Some(updates) = self.get(BN_UPDATES) {
            let mut bns: Vec<&mut BnScaleParams> = params
                .layers
                .iter_mut()
                .filter_map(|l| match l {
                    LayerParams::Conv { bn, .. } | LayerParams::Fc { bn, .. } => Some(bn),
                    _ => None,
                })
                .collect();
            if updates.len() != bns.len() {
                return Err(Error::Format {
                    field: "tensors",
                    detail: format!("`{BN_UPDATES}` has {} entries for {} batch norms", updates.len(), bns.len()),
                });
            }
            for (bn, &u) in bns.iter_mut().zip(updates.data()) {
                bn.updates = u as u64;
            }
        }
        Ok(params)
    }

    /// Optimizer states in trainable order, if every one is present.
    pub fn adam_states(&self, spec: &ArchitectureSpec) -> Result<Option<Vec<AdamState>>> {
        self.check_spec(spec)?;
        let zero: ModelParams = crate::arch::zero_params(spec)?;
        let mut out = Vec::new();
        for (name, _) in zero.named(spec).into_iter().filter(|(n, _)| !is_running_stat(n)) {
            let (Some(m), Some(v), Some(t)) = (
                self.get(&format!("adam.{name}.m")),
                self.get(&format!("adam.{name}.v")),
                self.get(&format!("adam.{name}.t")),
            ) else {
                return Ok(None);
            };
            out.push(AdamState {
                m: m.clone(),
                v: v.clone(),
                t: t.data()[0] as u64,
            });
        }
        Ok(Some(out))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.digest);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            b.push(DTYPE_F32);
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                field: "magic",
                detail: "not an LSCN checkpoint".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                field: "version",
                detail: format!("unsupported format version {version}"),
            });
        }
        let digest: [u8; 32] = r.take(32, "spec_digest")?.try_into().expect("32 bytes");
        let count = r.u32("tensor_count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32("name_length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| Error::Format {
                    field: "name",
                    detail: e.to_string(),
                })?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format {
                    field: "dtype",
                    detail: format!("`{name}` has unknown dtype tag {dtype}"),
                });
            }
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.filter(|&n| n > 0 && rank > 0).ok_or_else(|| Error::Format {
                field: "dims",
                detail: format!("`{name}` has invalid dims {dims:?}"),
            })?;
            let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                field: "data",
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { digest, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            field,
            detail: format!("file truncated at byte {}", self.bytes.len()),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; with `spec`, the stored digest must match it.
pub fn load_checkpoint(path: &Path, spec: Option<&ArchitectureSpec>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(spec) = spec {
        ckpt.check_spec(spec)?;
    }
    Ok(ckpt)
}
