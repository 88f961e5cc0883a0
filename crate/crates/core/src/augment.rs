//! Brightness, blur and noise augmentation of raw `[0, 255]` images.
//!
//! Output order: the original, then for each brightness version (unchanged,
//! `+shift`, `−shift`) its blurred copies followed by its noised copies. With
//! `include_shifted` the bare `+shift` and `−shift` images are appended.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub channel_shift: f32,
    pub blur_sigmas: Vec<f64>,
    /// Standard deviations on the `[0, 1]` intensity scale.
    pub noise_sigmas: Vec<f64>,
    pub include_shifted: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            channel_shift: 50.0,
            blur_sigmas: vec![0.1, 0.5, 1.0],
            noise_sigmas: vec![0.0005, 0.00075, 0.001],
            include_shifted: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Original,
    Blur { shift: f32, sigma: f64 },
    Noise { shift: f32, sigma: f64 },
    Shifted { shift: f32 },
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad_sigma = self.blur_sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.noise_sigmas.iter().any(|&s| !(s >= 0.0 && s.is_finite()));
        if bad_sigma || !self.channel_shift.is_finite() {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<Variant> {
        let shifts = [0.0, self.channel_shift, -self.channel_shift];
        let mut out = vec![Variant::Original];
        for shift in shifts {
            out.extend(self.blur_sigmas.iter().map(|&sigma| Variant::Blur { shift, sigma }));
            out.extend(self.noise_sigmas.iter().map(|&sigma| Variant::Noise { shift, sigma }));
        }
        if self.include_shifted {
            out.extend(shifts[1..].iter().map(|&shift| Variant::Shifted { shift }));
        }
        out
    }

    /// Images produced per input: 19 with the default settings.
    pub fn count(&self) -> usize {
        1 + 3 * (self.blur_sigmas.len() + self.noise_sigmas.len()) + if self.include_shifted { 2 } else { 0 }
    }
}

/// Adds `shift` to every channel, clamped to `[0, 255]`.
pub fn brightness(image: &Tensor, shift: f32) -> Tensor {
    image.map(|v| (v + shift).clamp(0.0, 255.0))
}

/// 2×2 Gaussian filter sampled at offsets `{0, 1}` and normalized to sum 1;
/// the window extends right and down with edge replication.
pub fn blur_2x2(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Shape(format!("expected C×H×W, got {:?}", image.shape())));
    };
    let g = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * g + g * g;
    let (w00, w01, w11) = (1.0 / norm, g / norm, g * g / norm);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            let r1 = (r + 1).min(h - 1);
            for col in 0..w {
                let c1 = (col + 1).min(w - 1);
                let at = |rr: usize, cc: usize| plane[rr * w + cc] as f64;
                let v = w00 * at(r, col) + w01 * (at(r, c1) + at(r1, col)) + w11 * at(r1, c1);
                out.push(v as f32);
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}

/// Adds `Normal(0, 255·sigma)` noise per pixel, clamped to `[0, 255]`.
pub fn add_noise(image: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    let std = 255.0 * sigma;
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + rng.normal(0.0, std)).clamp(0.0, 255.0) as f32;
    }
    out
}

pub fn apply(image: &Tensor, variant: Variant, rng: &mut Rng) -> Result<Tensor> {
    Ok(match variant {
        Variant::Original => image.clone(),
        Variant::Blur { shift, sigma } => blur_2x2(&brightness(image, shift), sigma)?,
        Variant::Noise { shift, sigma } => add_noise(&brightness(image, shift), sigma, rng),
        Variant::Shifted { shift } => brightness(image, shift),
    })
}

/// Every augmented version of `sample`, metadata preserved.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Vec<Sample>> {
    cfg.validate()?;
    cfg.variants()
        .into_iter()
        .map(|v| {
            Ok(Sample {
                image: apply(&sample.image, v, rng)?,
                ..sample.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Split};

    fn sample(image: Tensor) -> Sample {
        Sample {
            image,
            label: Label::Attack,
            video_id: "v".into(),
            frame_index: 3,
            split: Split::Train,
        }
    }

    #[test]
    fn nineteen_outputs_in_range() {
        let cfg = AugmentConfig::default();
        assert_eq!(cfg.count(), 19);
        let mut rng = Rng::new(4);
        let img = Tensor::from_vec(&[3, 6, 6], (0..108).map(|v| (v * 37 % 256) as f32).collect()).unwrap();
        let out = augment(&sample(img), &cfg, &mut rng).unwrap();
        assert_eq!(out.len(), 19);
        for s in &out {
            assert!(s.image.data().iter().all(|v| (0.0..=255.0).contains(v)));
            assert_eq!((s.label, s.frame_index), (Label::Attack, 3));
        }
        let wide = AugmentConfig {
            include_shifted: true,
            ..cfg
        };
        assert_eq!(wide.variants().len(), 21);
        assert_eq!(wide.count(), 21);
    }

    #[test]
    fn brightness_clamps() {
        let img = Tensor::from_vec(&[1, 1, 3], vec![230.0, 20.0, 100.0]).unwrap();
        assert_eq!(brightness(&img, 50.0).data(), [255.0, 70.0, 150.0]);
        assert_eq!(brightness(&img, -50.0).data(), [180.0, 0.0, 50.0]);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        for sigma in [0.1, 0.5, 1.0] {
            for v in [0.0, 77.0, 255.0] {
                let img = Tensor::full(&[3, 5, 7], v).unwrap();
                assert_eq!(blur_2x2(&img, sigma).unwrap(), img);
            }
        }
    }

    #[test]
    fn blur_levels_differ() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![0.0, 100.0, 100.0, 200.0]).unwrap();
        let a = blur_2x2(&img, 0.1).unwrap().data()[0];
        let b = blur_2x2(&img, 0.5).unwrap().data()[0];
        let c = blur_2x2(&img, 1.0).unwrap().data()[0];
        assert!(a < 1e-3 && a < b && b < c && c < 100.0, "{a} {b} {c}");
        // sigma → ∞ would average the 2×2 window: 100
        let g = (-0.5f64).exp();
        let expected = 100.0 * (2.0 * g + 2.0 * g * g) / (1.0 + 2.0 * g + g * g);
        assert!((c as f64 - expected).abs() < 1e-4);
    }

    #[test]
    fn noise_has_requested_scale() {
        let img = Tensor::full(&[1, 100, 100], 128.0).unwrap();
        let out = add_noise(&img, 0.001, &mut Rng::new(8));
        let var = out.data().iter().map(|&v| ((v - 128.0) as f64).powi(2)).sum::<f64>() / 1e4;
        assert!((var.sqrt() - 0.255).abs() < 0.01, "{}", var.sqrt());
        let zero = add_noise(&img, 0.0, &mut Rng::new(8));
        assert_eq!(zero, img);
    }
}
