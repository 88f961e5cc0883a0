//! Samples, splits, normalization and image-folder ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Class of a face. The class index doubles as the softmax output index, so
/// the "real" probability is column 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Attack,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Attack => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Attack => "attack",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "val")]
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// One face image with raw pixel values in `[0, 255]`, laid out `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: Label,
    pub video_id: String,
    pub frame_index: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Indices of the samples in `split`, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn count(&self, split: Split, label: Label) -> usize {
        self.samples.iter().filter(|s| s.split == split && s.label == label).count()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.samples.iter().any(|s| s.split == split)
    }

    /// Fails if any video has frames in more than one split.
    pub fn check_video_splits(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.samples {
            if let Some(prev) = seen.insert(&s.video_id, s.split) {
                if prev != s.split {
                    return Err(Error::Data(format!(
                        "video `{}` appears in both {} and {}",
                        s.video_id,
                        prev.as_str(),
                        s.split.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Moves a seeded `fraction` of the training videos (whole videos, never
    /// single frames) into the validation split.
    pub fn hold_out_validation(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!("hold-out fraction {fraction} outside (0, 1)")));
        }
        let videos: BTreeSet<&str> = self
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.video_id.as_str())
            .collect();
        let mut videos: Vec<String> = videos.into_iter().map(str::to_owned).collect();
        let take = ((videos.len() as f64 * fraction).round() as usize).max(1);
        if take >= videos.len() {
            return Err(Error::Data(format!(
                "cannot hold out {take} of {} training videos",
                videos.len()
            )));
        }
        Rng::new(seed).shuffle(&mut videos);
        let held: BTreeSet<&String> = videos[..take].iter().collect();
        for s in &mut self.samples {
            if s.split == Split::Train && held.contains(&s.video_id) {
                s.split = Split::Validation;
            }
        }
        Ok(())
    }
}

/// Per-channel training-set means and the fixed divisor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub divisor: f32,
}

pub const NORMALIZATION_DIVISOR: f32 = 128.0;

impl NormalizationStats {
    /// Means over every pixel of every training-split sample; other splits
    /// are ignored.
    pub fn from_training(dataset: &Dataset) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in dataset.samples.iter().filter(|s| s.split == Split::Train) {
            let c = s.image.shape()[0];
            let plane = s.image.len() / c;
            if sums.is_empty() {
                sums = vec![0.0; c];
            } else if sums.len() != c {
                return Err(Error::Data(format!("sample `{}` has {c} channels", s.video_id)));
            }
            for (ch, sum) in sums.iter_mut().enumerate() {
                *sum += s.image.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Data("training split is empty".into()));
        }
        Ok(Self {
            mean: sums.into_iter().map(|s| (s / count as f64) as f32).collect(),
            divisor: NORMALIZATION_DIVISOR,
        })
    }
}

/// `(x[c] − mean[c]) / divisor` for a `C×H×W` image.
pub fn normalize(image: &Tensor, stats: &NormalizationStats) -> Result<Tensor> {
    let mut out = image.clone();
    normalize_in_place(&mut out, stats)?;
    Ok(out)
}

pub fn normalize_in_place(image: &mut Tensor, stats: &NormalizationStats) -> Result<()> {
    let c = image.shape()[0];
    if image.rank() != 3 || c != stats.mean.len() {
        return Err(Error::Shape(format!(
            "image {:?} does not match {} normalization channels",
            image.shape(),
            stats.mean.len()
        )));
    }
    let plane = image.len() / c;
    for (ch, &m) in stats.mean.iter().enumerate() {
        for v in &mut image.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = (*v - m) / stats.divisor;
        }
    }
    Ok(())
}

/// Maps directory globs to labels, splits and video ids.
///
/// `video_id` may contain `{dir}`, replaced by the name of the directory
/// holding each file. Frames of one video are numbered in path order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Glob relative to the dataset root.
    pub glob: String,
    pub label: Label,
    pub split: Split,
    pub video_id: String,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Files that matched the manifest but could not be decoded.
    pub failures: Vec<(PathBuf, String)>,
}

/// Decodes every file the manifest selects, converting to `channels` planes
/// and resizing bilinearly to `size×size` where needed.
///
/// Undecodable files are collected in the report and skipped. A split named
/// in the manifest that ends up without samples, or a missing training
/// split, is fatal.
pub fn load_folder(root: &Path, manifest: &Manifest, channels: usize, size: usize) -> Result<LoadReport> {
    if !matches!(channels, 1 | 3) {
        return Err(Error::Config(format!("cannot load {channels}-channel images")));
    }
    let mut failures = Vec::new();
    let mut by_video: BTreeMap<(Split, String), Vec<(PathBuf, Label)>> = BTreeMap::new();
    let mut named_splits = BTreeSet::new();
    for entry in &manifest.entries {
        named_splits.insert(entry.split);
        let pattern = root.join(&entry.glob);
        let pattern = pattern.to_str().ok_or_else(|| Error::Config("non-UTF-8 dataset path".into()))?;
        let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("glob `{}`: {e}", entry.glob)))?;
        for path in paths {
            let path = match path {
                Ok(p) if p.is_file() => p,
                Ok(_) => continue,
                Err(e) => {
                    failures.push((e.path().to_path_buf(), e.to_string()));
                    continue;
                }
            };
            let dir = path
                .parent()
                .and_then(Path::file_name)
                .and_then(|d| d.to_str())
                .unwrap_or_default();
            let video = entry.video_id.replace("{dir}", dir);
            by_video.entry((entry.split, video)).or_default().push((path, entry.label));
        }
    }
    let mut samples = Vec::new();
    for ((split, video_id), mut files) in by_video {
        files.sort();
        files.dedup_by(|a, b| a.0 == b.0);
        for (frame_index, (path, label)) in files.into_iter().enumerate() {
            match read_image(&path, channels, size) {
                Ok(image) => samples.push(Sample {
                    image,
                    label,
                    video_id: video_id.clone(),
                    frame_index,
                    split,
                }),
                Err(e) => failures.push((path, e.to_string())),
            }
        }
    }
    let dataset = Dataset::new(samples);
    named_splits.insert(Split::Train);
    for split in named_splits {
        if !dataset.has_split(split) {
            return Err(Error::Data(format!("split `{}` has no readable images", split.as_str())));
        }
    }
    dataset.check_video_splits()?;
    Ok(LoadReport { dataset, failures })
}

/// Reads one image as a `channels×size×size` tensor of raw pixel values.
pub fn read_image(path: &Path, channels: usize, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let img = if img.width() as usize != size || img.height() as usize != size {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    } else {
        img
    };
    let plane = size * size;
    let mut data = vec![0f32; channels * plane];
    if channels == 1 {
        for (d, p) in data.iter_mut().zip(img.to_luma8().pixels()) {
            *d = p.0[0] as f32;
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = p.0[ch] as f32;
            }
        }
    }
    Tensor::from_vec(&[channels, size, size], data)
}

/// Writes a `C×H×W` image (C = 1 or 3) as 8-bit PNG, rounding and clamping.
pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Shape(format!("expected C×H×W, got {:?}", image.shape())));
    };
    let plane = h * w;
    let px = |ch: usize, i: usize| image.data()[ch * plane + i].round().clamp(0.0, 255.0) as u8;
    let (buf, color) = match c {
        1 => ((0..plane).map(|i| px(0, i)).collect::<Vec<u8>>(), image::ColorType::L8),
        3 => (
            (0..plane).flat_map(|i| [px(0, i), px(1, i), px(2, i)]).collect(),
            image::ColorType::Rgb8,
        ),
        _ => return Err(Error::Shape(format!("cannot write {c}-channel PNG"))),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, color).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes `dataset` as `root/<split>/<label>/<video>/<frame>.png` plus a
/// `manifest.json` that loads it back.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<Manifest> {
    let mut entries = BTreeSet::new();
    for s in &dataset.samples {
        let path = root
            .join(s.split.as_str())
            .join(s.label.as_str())
            .join(&s.video_id)
            .join(format!("{:05}.png", s.frame_index));
        write_png(&s.image, &path)?;
        entries.insert((s.split, s.label));
    }
    let manifest = Manifest {
        entries: entries
            .into_iter()
            .map(|(split, label)| ManifestEntry {
                glob: format!("{}/{}/*/*.png", split.as_str(), label.as_str()),
                label,
                split,
                video_id: "{dir}".into(),
            })
            .collect(),
    };
    manifest.write(&root.join("manifest.json"))?;
    Ok(manifest)
}
