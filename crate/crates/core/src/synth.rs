//! Deterministic synthetic faces and their replayed/printed counterparts.
//!
//! Every identity yields one real and one attack video with the same frame
//! jitter and sensor noise, so a real frame and its attack counterpart differ
//! only by the attack cues. Faces share a fixed layout (forehead, eyes, nose,
//! cheeks, mouth on the 3×3 grid) with a distinct texture per grid region.
//! Attack cues are confined to configurable grid regions.

use serde::{Deserialize, Serialize};

use crate::compose::{GRID, PATCHES};
use crate::data::{Dataset, Label, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed as derive, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CueProfile {
    /// Grid regions (0-based, row-major) overlaid with a high-frequency moiré pattern.
    pub moire: Vec<usize>,
    /// Grid regions whose contrast is reduced around the region mean.
    pub contrast: Vec<usize>,
    /// Grid regions whose illumination falloff is flattened.
    pub shadow_removal: Vec<usize>,
    /// Global multiplier on every cue.
    pub strength: f64,
}

impl Default for CueProfile {
    fn default() -> Self {
        Self {
            moire: vec![1, 4, 7],
            contrast: vec![3, 4, 5],
            shadow_removal: vec![0, 2, 6, 8],
            strength: 1.0,
        }
    }
}

impl CueProfile {
    /// Cues only in the central region.
    pub fn center_only() -> Self {
        Self {
            moire: vec![4],
            contrast: vec![4],
            shadow_removal: vec![],
            strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let regions = self.moire.iter().chain(&self.contrast).chain(&self.shadow_removal);
        if regions.into_iter().any(|&r| r >= PATCHES) || !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Config(format!("invalid cue profile {self:?}")));
        }
        Ok(())
    }

    fn mask(regions: &[usize]) -> [bool; PATCHES] {
        let mut m = [false; PATCHES];
        for &r in regions {
            m[r] = true;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Videos per split; each must be even (one real and one attack per identity).
    pub train_videos: usize,
    pub validation_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    /// 3 for RGB, 1 for grayscale.
    pub channels: usize,
    pub cues: CueProfile,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_videos: 100,
            validation_videos: 20,
            test_videos: 20,
            frames_per_video: 20,
            image_size: 96,
            channels: 3,
            cues: CueProfile::default(),
            seed: 0,
        }
    }
}

struct Identity {
    skin: [f64; 3],
    background: [f64; 3],
    face_scale: (f64, f64),
    light: (f64, f64),
    textures: [(f64, f64, f64, f64); PATCHES],
    moire: (f64, f64, f64),
    cue_gain: f64,
}

impl Identity {
    fn draw(rng: &mut Rng) -> Self {
        let skin = [
            185.0 + rng.normal(0.0, 15.0),
            145.0 + rng.normal(0.0, 12.0),
            120.0 + rng.normal(0.0, 12.0),
        ];
        let bg = 90.0 + rng.normal(0.0, 25.0);
        let mut textures = [(0.0, 0.0, 0.0, 0.0); PATCHES];
        for (k, t) in textures.iter_mut().enumerate() {
            // amplitude, cycles per image, orientation, phase
            *t = (
                5.0 + 1.5 * (k % 3) as f64 + rng.uniform(),
                6.0 + 1.8 * k as f64,
                0.35 * k as f64 + rng.normal(0.0, 0.1),
                std::f64::consts::TAU * rng.uniform(),
            );
        }
        Self {
            skin,
            background: [bg, bg + rng.normal(0.0, 8.0), bg + 15.0 + rng.normal(0.0, 8.0)],
            face_scale: (0.40 + 0.03 * rng.uniform(), 0.48 + 0.03 * rng.uniform()),
            light: (0.5 + rng.normal(0.0, 0.05), 0.45 + rng.normal(0.0, 0.05)),
            textures,
            moire: (
                0.22 + 0.1 * rng.uniform(),
                0.27 + 0.1 * rng.uniform(),
                std::f64::consts::TAU * rng.uniform(),
            ),
            cue_gain: 0.75 + 0.5 * rng.uniform(),
        }
    }
}

fn ellipse(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> f64 {
    let d = ((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2);
    // smooth edge over the outer 20% of the radius
    ((1.2 - d.sqrt()) / 0.2).clamp(0.0, 1.0)
}

fn region(size: usize, r: usize, c: usize) -> usize {
    let p = (size / GRID).max(1);
    (r / p).min(GRID - 1) * GRID + (c / p).min(GRID - 1)
}

/// One RGB frame, before noise and quantization.
fn render(id: &Identity, size: usize, jitter: (f64, f64), flicker: f64, cues: Option<&CueProfile>) -> Vec<f64> {
    let plane = size * size;
    let s = size as f64;
    let mut out = vec![0.0; 3 * plane];
    let no = [false; PATCHES];
    let (shadow_off, moire) = match cues {
        Some(c) => (CueProfile::mask(&c.shadow_removal), CueProfile::mask(&c.moire)),
        None => (no, no),
    };
    let strength = cues.map_or(0.0, |c| c.strength * id.cue_gain);
    for r in 0..size {
        for c in 0..size {
            let k = region(size, r, c);
            let u = (c as f64 + 0.5 + jitter.0) / s;
            let v = (r as f64 + 0.5 + jitter.1) / s;
            let face = ellipse(u, v, 0.5, 0.5, id.face_scale.0, id.face_scale.1);
            let (amp, freq, theta, phase) = id.textures[k];
            let tex = amp * (std::f64::consts::TAU * freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
            let eyes = ellipse(u, v, 0.33, 0.42, 0.08, 0.035).max(ellipse(u, v, 0.67, 0.42, 0.08, 0.035));
            let brows = ellipse(u, v, 0.33, 0.34, 0.1, 0.015).max(ellipse(u, v, 0.67, 0.34, 0.1, 0.015));
            let nose = ellipse(u, v, 0.5, 0.56, 0.035, 0.1);
            let mouth = ellipse(u, v, 0.5, 0.78, 0.13, 0.04);
            let d2 = (u - id.light.0).powi(2) + (v - id.light.1).powi(2);
            let mut falloff = 0.7 * d2;
            if shadow_off[k] {
                falloff *= 1.0 - 0.8 * strength.min(1.0);
            }
            let shade = (1.0 - falloff).max(0.3);
            let moire_term = if moire[k] {
                let (fx, fy, ph) = id.moire;
                7.0 * strength * (std::f64::consts::TAU * (fx * c as f64 + fy * r as f64) + ph).sin()
            } else {
                0.0
            };
            for ch in 0..3 {
                let feature = [55.0, 45.0, 40.0][ch];
                let lips = [150.0, 70.0, 75.0][ch];
                let mut skin = id.skin[ch] + tex * [1.0, 0.9, 0.8][ch];
                skin = skin * (1.0 - eyes) + feature * eyes;
                skin = skin * (1.0 - 0.7 * brows) + feature * 0.7 * brows;
                skin += 18.0 * nose;
                skin = skin * (1.0 - mouth) + lips * mouth;
                let bg = id.background[ch] + 0.3 * tex;
                let px = (face * skin + (1.0 - face) * bg) * shade + flicker + moire_term;
                out[ch * plane + r * size + c] = px;
            }
        }
    }
    if let Some(c) = cues {
        reduce_contrast(&mut out, size, &CueProfile::mask(&c.contrast), (0.45 * strength).min(0.9));
    }
    out
}

fn reduce_contrast(img: &mut [f64], size: usize, regions: &[bool; PATCHES], amount: f64) {
    let plane = size * size;
    for ch in 0..3 {
        let mut sums = [0.0; PATCHES];
        let mut counts = [0usize; PATCHES];
        for i in 0..plane {
            let k = region(size, i / size, i % size);
            sums[k] += img[ch * plane + i];
            counts[k] += 1;
        }
        for i in 0..plane {
            let k = region(size, i / size, i % size);
            if regions[k] {
                let m = sums[k] / counts[k] as f64;
                let p = &mut img[ch * plane + i];
                *p = m + (*p - m) * (1.0 - amount);
            }
        }
    }
}

fn finish(mut img: Vec<f64>, noise: &[f64], size: usize, channels: usize) -> Result<Tensor> {
    for (p, n) in img.iter_mut().zip(noise) {
        *p = (*p + n).round().clamp(0.0, 255.0);
    }
    let plane = size * size;
    let data: Vec<f32> = if channels == 1 {
        (0..plane)
            .map(|i| (0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i]).round() as f32)
            .collect()
    } else {
        img.into_iter().map(|v| v as f32).collect()
    };
    Tensor::from_vec(&[channels, size, size], data)
}

/// `n_videos` videos (half real, half attack, paired by identity) of
/// `frames_per_video` frames each at `size×size`, all in the training split.
///
/// Video ids are `id<NNN>-real` / `id<NNN>-attack`.
pub fn synth_generate(
    n_videos: usize,
    frames_per_video: usize,
    cues: &CueProfile,
    seed: u64,
    size: usize,
    channels: usize,
) -> Result<Vec<Sample>> {
    if n_videos < 2 || n_videos % 2 != 0 {
        return Err(Error::Config(format!(
            "synthetic video count must be even and >= 2, got {n_videos}"
        )));
    }
    if frames_per_video == 0 {
        return Err(Error::Config("frames per video must be >= 1".into()));
    }
    if size < GRID || !matches!(channels, 1 | 3) {
        return Err(Error::Config(format!("cannot synthesize {channels}×{size}×{size} images")));
    }
    cues.validate()?;
    let mut samples = Vec::with_capacity(n_videos * frames_per_video);
    for i in 0..n_videos / 2 {
        let id = Identity::draw(&mut Rng::new(derive(seed, 1, i as u64)));
        let mut real = Vec::with_capacity(frames_per_video);
        let mut attack = Vec::with_capacity(frames_per_video);
        for f in 0..frames_per_video {
            let mut rng = Rng::new(derive(seed, 2 + i as u64, f as u64));
            let jitter = (rng.normal(0.0, 0.6), rng.normal(0.0, 0.6));
            let flicker = rng.normal(0.0, 3.0);
            let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.normal(0.0, 2.0)).collect();
            let frame = |label: Label, image: Tensor| Sample {
                image,
                label,
                video_id: format!("id{i:03}-{}", label.as_str()),
                frame_index: f,
                split: Split::Train,
            };
            real.push(frame(
                Label::Real,
                finish(render(&id, size, jitter, flicker, None), &noise, size, channels)?,
            ));
            attack.push(frame(
                Label::Attack,
                finish(render(&id, size, jitter, flicker, Some(cues)), &noise, size, channels)?,
            ));
        }
        samples.extend(real);
        samples.extend(attack);
    }
    Ok(samples)
}

/// Train, validation and test splits, each generated from its own derived
/// seed; video ids are prefixed with the split name.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (tag, (split, n)) in [
        (Split::Train, cfg.train_videos),
        (Split::Validation, cfg.validation_videos),
        (Split::Test, cfg.test_videos),
    ]
    .into_iter()
    .enumerate()
    {
        if n == 0 && split != Split::Train {
            continue;
        }
        let seed = derive(cfg.seed, 100 + tag as u64, 0);
        for mut s in synth_generate(n, cfg.frames_per_video, &cfg.cues, seed, cfg.image_size, cfg.channels)? {
            s.split = split;
            s.video_id = format!("{}-{}", split.as_str(), s.video_id);
            samples.push(s);
        }
    }
    Ok(Dataset::new(samples))
}
