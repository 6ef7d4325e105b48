//! Dataset-shift transforms for images: rotation, rolling translation and
//! parametric corruptions with five severity levels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Image, ImageDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShiftError {
    #[error("unknown corruption {0:?}")]
    UnknownCorruption(String),
    #[error("invalid shift: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ShiftError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(self, CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = ShiftError;
    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ShiftError::UnknownCorruption(s.to_string()))
    }
}

/// Per-kind parameters for severities 1 through 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionTable {
    /// Noise standard deviation.
    pub gaussian_noise: [f64; 5],
    /// Fraction of pixels replaced by 0 or 1.
    pub impulse_noise: [f64; 5],
    /// Blur kernel standard deviation in pixels.
    pub gaussian_blur: [f64; 5],
    /// Additive brightness offset.
    pub brightness: [f64; 5],
    /// Multiplicative contrast factor around the image mean.
    pub contrast: [f64; 5],
    /// Block edge length in pixels.
    pub pixelate: [f64; 5],
}

impl Default for CorruptionTable {
    fn default() -> Self {
        Self {
            gaussian_noise: [0.04, 0.08, 0.12, 0.18, 0.26],
            impulse_noise: [0.01, 0.03, 0.06, 0.10, 0.17],
            gaussian_blur: [0.5, 0.8, 1.2, 1.8, 2.5],
            brightness: [0.1, 0.2, 0.3, 0.4, 0.5],
            contrast: [0.75, 0.6, 0.45, 0.3, 0.2],
            pixelate: [2.0, 3.0, 4.0, 5.0, 7.0],
        }
    }
}

impl CorruptionTable {
    pub fn parameter(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(ShiftError::Invalid(format!("severity {severity} not in 1..=5")));
        }
        let row = match kind {
            CorruptionKind::GaussianNoise => &self.gaussian_noise,
            CorruptionKind::ImpulseNoise => &self.impulse_noise,
            CorruptionKind::GaussianBlur => &self.gaussian_blur,
            CorruptionKind::Brightness => &self.brightness,
            CorruptionKind::Contrast => &self.contrast,
            CorruptionKind::Pixelate => &self.pixelate,
        };
        Ok(row[severity as usize - 1])
    }
}

/// One point of a shift schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftSpec {
    Identity,
    Rotation { degrees: u32 },
    Roll { pixels: usize },
    Corruption { kind: CorruptionKind, severity: u8 },
}

impl ShiftSpec {
    pub fn validate(&self, width: usize) -> Result<()> {
        match *self {
            ShiftSpec::Identity => Ok(()),
            ShiftSpec::Rotation { degrees } if degrees % 15 == 0 && (15..=180).contains(&degrees) => Ok(()),
            ShiftSpec::Rotation { degrees } => Err(ShiftError::Invalid(format!(
                "rotation of {degrees} degrees is not one of 15, 30, ..., 180"
            ))),
            ShiftSpec::Roll { pixels } if pixels <= width => Ok(()),
            ShiftSpec::Roll { pixels } => Err(ShiftError::Invalid(format!(
                "roll of {pixels} pixels exceeds width {width}"
            ))),
            ShiftSpec::Corruption { severity, .. } if (1..=5).contains(&severity) => Ok(()),
            ShiftSpec::Corruption { severity, .. } => {
                Err(ShiftError::Invalid(format!("severity {severity} not in 1..=5")))
            }
        }
    }

    /// `(shift, severity)` descriptor used in reports.
    pub fn descriptor(&self) -> (String, String) {
        match *self {
            ShiftSpec::Identity => ("clean".into(), "0".into()),
            ShiftSpec::Rotation { degrees } => ("rotation".into(), degrees.to_string()),
            ShiftSpec::Roll { pixels } => ("roll".into(), pixels.to_string()),
            ShiftSpec::Corruption { kind, severity } => (kind.to_string(), severity.to_string()),
        }
    }

    pub fn apply(&self, image: &Image, table: &CorruptionTable, seed: u64) -> Result<Image> {
        match *self {
            ShiftSpec::Identity => Ok(image.clone()),
            ShiftSpec::Rotation { degrees } => Ok(rotate(image, degrees as f64)),
            ShiftSpec::Roll { pixels } => Ok(roll(image, pixels)),
            ShiftSpec::Corruption { kind, severity } => corrupt(image, kind, severity, table, seed),
        }
    }
}

/// 15°, 30°, …, 180°.
pub fn rotation_schedule() -> Vec<ShiftSpec> {
    (1..=12).map(|k| ShiftSpec::Rotation { degrees: 15 * k }).collect()
}

/// Non-zero rolls `step, 2·step, …` up to and including `width`.
pub fn roll_schedule(width: usize, step: usize) -> Vec<ShiftSpec> {
    if step == 0 {
        return Vec::new();
    }
    (1..=width / step).map(|k| ShiftSpec::Roll { pixels: k * step }).collect()
}

pub fn corruption_schedule(kind: CorruptionKind) -> Vec<ShiftSpec> {
    (1..=5).map(|severity| ShiftSpec::Corruption { kind, severity }).collect()
}

/// Distance of a roll from the unshifted image: `min(s, width − s)` for `s` taken mod `width`.
pub fn shift_distance(pixels: usize, width: usize) -> usize {
    let s = pixels % width;
    s.min(width - s)
}

/// Rotates counter-clockwise about the image centre with inverse-mapped
/// bilinear interpolation; samples falling outside the source read as 0.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    let deg = degrees.rem_euclid(360.0);
    // Exact trig at right angles so that 90°/180° rotations are pure permutations.
    let (sin, cos) = match deg {
        d if d == 0.0 => (0.0, 1.0),
        d if d == 90.0 => (1.0, 0.0),
        d if d == 180.0 => (0.0, -1.0),
        d if d == 270.0 => (-1.0, 0.0),
        d => d.to_radians().sin_cos(),
    };
    let (h, w) = (image.height, image.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Image::zeros(image.channels, h, w);
    for r in 0..h {
        for c in 0..w {
            let xo = c as f64 - cx;
            let yo = cy - r as f64;
            let xs = xo * cos + yo * sin;
            let ys = -xo * sin + yo * cos;
            let src_c = xs + cx;
            let src_r = cy - ys;
            let c0 = src_c.floor();
            let r0 = src_r.floor();
            let fc = src_c - c0;
            let fr = src_r - r0;
            let taps = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1.0, (1.0 - fr) * fc),
                (r0 + 1.0, c0, fr * (1.0 - fc)),
                (r0 + 1.0, c0 + 1.0, fr * fc),
            ];
            for ch in 0..image.channels {
                let mut v = 0.0f64;
                for &(tr, tc, wgt) in &taps {
                    if wgt == 0.0 || tr < 0.0 || tc < 0.0 || tr >= h as f64 || tc >= w as f64 {
                        continue;
                    }
                    v += wgt * image.at(ch, tr as usize, tc as usize) as f64;
                }
                *out.at_mut(ch, r, c) = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Circular horizontal shift: column `c` moves to `(c + pixels) mod width`.
pub fn roll(image: &Image, pixels: usize) -> Image {
    let w = image.width;
    let s = pixels % w;
    let mut out = image.clone();
    if s == 0 {
        return out;
    }
    for ch in 0..image.channels {
        for r in 0..image.height {
            let base = (ch * image.height + r) * w;
            let src = &image.pixels[base..base + w];
            let dst = &mut out.pixels[base..base + w];
            dst[s..].copy_from_slice(&src[..w - s]);
            dst[..s].copy_from_slice(&src[w - s..]);
        }
    }
    out
}

/// Applies one corruption at the given severity. Noise kinds draw from a
/// ChaCha stream seeded with `seed`; the others ignore it.
pub fn corrupt(
    image: &Image,
    kind: CorruptionKind,
    severity: u8,
    table: &CorruptionTable,
    seed: u64,
) -> Result<Image> {
    let param = table.parameter(kind, severity)?;
    let mut out = image.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, param)
                .map_err(|e| ShiftError::Invalid(format!("noise sigma {param}: {e}")))?;
            for p in &mut out.pixels {
                *p += normal.sample(&mut rng) as f32;
            }
        }
        CorruptionKind::ImpulseNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in &mut out.pixels {
                if rng.random::<f64>() < param {
                    *p = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => out = gaussian_blur(image, param),
        CorruptionKind::Brightness => out.pixels.iter_mut().for_each(|p| *p += param as f32),
        CorruptionKind::Contrast => {
            let plane = image.height * image.width;
            for ch in 0..image.channels {
                let px = &mut out.pixels[ch * plane..(ch + 1) * plane];
                let m = px.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                for v in px {
                    *v = ((*v as f64 - m) * param + m) as f32;
                }
            }
        }
        CorruptionKind::Pixelate => out = pixelate(image, param.round().max(1.0) as usize),
    }
    out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(out)
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (image.height as isize, image.width as isize);
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let mut tmp = image.clone();
    let mut out = image.clone();
    for ch in 0..image.channels {
        for r in 0..h {
            for c in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * image.at(ch, r as usize, clamp(c + k as isize - radius, w)) as f64)
                    .sum();
                *tmp.at_mut(ch, r as usize, c as usize) = v as f32;
            }
        }
        for r in 0..h {
            for c in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * tmp.at(ch, clamp(r + k as isize - radius, h), c as usize) as f64)
                    .sum();
                *out.at_mut(ch, r as usize, c as usize) = v as f32;
            }
        }
    }
    out
}

fn pixelate(image: &Image, block: usize) -> Image {
    let mut out = image.clone();
    for ch in 0..image.channels {
        for br in (0..image.height).step_by(block) {
            for bc in (0..image.width).step_by(block) {
                let rows = br..(br + block).min(image.height);
                let cols = bc..(bc + block).min(image.width);
                let count = rows.len() * cols.len();
                let mut sum = 0.0f64;
                for r in rows.clone() {
                    for c in cols.clone() {
                        sum += image.at(ch, r, c) as f64;
                    }
                }
                let avg = (sum / count as f64) as f32;
                for r in rows.clone() {
                    for c in cols.clone() {
                        *out.at_mut(ch, r, c) = avg;
                    }
                }
            }
        }
    }
    out
}

/// One shifted copy of `dataset` per schedule point, in schedule order.
/// Noise corruptions seed image `i` with `seed + i`.
pub fn shift_sweep(
    dataset: &ImageDataset,
    schedule: &[ShiftSpec],
    table: &CorruptionTable,
    seed: u64,
) -> Result<Vec<(ShiftSpec, ImageDataset)>> {
    let width = dataset.shape().map_or(0, |s| s.2);
    schedule
        .iter()
        .map(|spec| {
            spec.validate(width)?;
            let images = dataset
                .images
                .iter()
                .enumerate()
                .map(|(i, im)| spec.apply(im, table, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok((
                *spec,
                ImageDataset {
                    images,
                    labels: dataset.labels.clone(),
                    num_classes: dataset.num_classes,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::std_dev;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(1, h, w, (0..h * w).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn rotate_zero_is_identity() {
        let im = random_image(1, 28, 28);
        assert_eq!(rotate(&im, 0.0), im);
    }

    #[test]
    fn rotate_180_twice_restores() {
        let im = random_image(2, 28, 28);
        let back = rotate(&rotate(&im, 180.0), 180.0);
        for (a, b) in im.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 2e-2);
        }
    }

    #[test]
    fn rotate_90_moves_point_mass() {
        let mut im = Image::zeros(1, 28, 28);
        *im.at_mut(0, 5, 20) = 1.0;
        let out = rotate(&im, 90.0);
        // Centre (13.5, 13.5): offset (x, y) = (6.5, 8.5) maps to (−8.5, 6.5),
        // i.e. row 13.5 − 6.5 = 7 and column 13.5 − 8.5 = 5.
        assert_eq!(out.at(0, 7, 5), 1.0);
        let total: f32 = out.pixels.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rotate_45_fills_corners_with_zero() {
        let im = Image::new(1, 8, 8, vec![1.0; 64]);
        let out = rotate(&im, 45.0);
        assert_eq!(out.at(0, 0, 0), 0.0);
        assert_eq!(out.at(0, 4, 4), 1.0);
    }

    #[test]
    fn roll_examples() {
        let im = random_image(3, 28, 28);
        assert_eq!(roll(&im, 0), im);
        assert_eq!(roll(&im, 28), im);
        assert_eq!(roll(&roll(&im, 14), 14), im);
        let rolled = roll(&im, 1);
        // Right-most column becomes the left-most.
        assert_eq!(rolled.at(0, 3, 0), im.at(0, 3, 27));
        assert_eq!(rolled.at(0, 3, 5), im.at(0, 3, 4));
    }

    #[test]
    fn brightness_clamps_to_one() {
        let im = Image::new(1, 4, 4, vec![0.5; 16]);
        let out = corrupt(&im, CorruptionKind::Brightness, 5, &CorruptionTable::default(), 0).unwrap();
        assert!(out.pixels.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn gaussian_noise_matches_table_sigma() {
        let table = CorruptionTable::default();
        let im = Image::new(1, 32, 32, vec![0.5; 1024]);
        for sev in 1..=5u8 {
            let out = corrupt(&im, CorruptionKind::GaussianNoise, sev, &table, 9).unwrap();
            let px: Vec<f64> = out.pixels.iter().map(|&p| p as f64).collect();
            let want = table.gaussian_noise[sev as usize - 1];
            let got = std_dev(&px);
            assert!((got - want).abs() <= 0.1 * want, "severity {sev}: {got} vs {want}");
        }
    }

    #[test]
    fn pixelate_has_block_structure() {
        let im = random_image(4, 28, 28);
        let out = corrupt(&im, CorruptionKind::Pixelate, 5, &CorruptionTable::default(), 0).unwrap();
        for r in 0..28 {
            for c in 0..28 {
                assert_eq!(out.at(0, r, c), out.at(0, r / 7 * 7, c / 7 * 7));
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let im = Image::new(1, 10, 10, vec![0.3; 100]);
        let out = corrupt(&im, CorruptionKind::GaussianBlur, 5, &CorruptionTable::default(), 0).unwrap();
        assert!(out.pixels.iter().all(|&p| (p - 0.3).abs() < 1e-6));
    }

    #[test]
    fn severity_is_monotone_in_effect() {
        let table = CorruptionTable::default();
        let im = random_image(5, 28, 28);
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for sev in 1..=5 {
                let out = corrupt(&im, kind, sev, &table, 0).unwrap();
                let dist: f64 = im
                    .pixels
                    .iter()
                    .zip(&out.pixels)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                assert!(dist >= prev, "{kind} severity {sev}");
                prev = dist;
            }
        }
    }

    #[test]
    fn unknown_kind_and_bad_severity() {
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(ShiftError::UnknownCorruption(_))));
        assert_eq!("impulse_noise".parse::<CorruptionKind>().unwrap(), CorruptionKind::ImpulseNoise);
        let im = Image::zeros(1, 2, 2);
        assert!(corrupt(&im, CorruptionKind::Contrast, 6, &CorruptionTable::default(), 0).is_err());
    }

    #[test]
    fn schedules() {
        assert_eq!(rotation_schedule().len(), 12);
        assert_eq!(rotation_schedule()[11], ShiftSpec::Rotation { degrees: 180 });
        assert_eq!(roll_schedule(28, 2).len(), 14);
        assert_eq!(roll_schedule(32, 4).len(), 8);
        assert_eq!(shift_distance(14, 28), 14);
        assert_eq!(shift_distance(28, 28), 0);
        assert_eq!(shift_distance(4, 28), shift_distance(24, 28));
        assert!(ShiftSpec::Rotation { degrees: 20 }.validate(28).is_err());
        assert!(ShiftSpec::Roll { pixels: 30 }.validate(28).is_err());
    }

    #[test]
    fn sweep_shapes_and_order() {
        let ds = ImageDataset::new(vec![random_image(6, 28, 28), random_image(7, 28, 28)], vec![0, 1], 2)
            .unwrap();
        let table = CorruptionTable::default();
        let sweep = shift_sweep(&ds, &rotation_schedule(), &table, 0).unwrap();
        assert_eq!(sweep.len(), 12);
        assert_eq!(sweep[0].0, ShiftSpec::Rotation { degrees: 15 });
        assert!(shift_sweep(&ds, &[], &table, 0).unwrap().is_empty());
        let noisy = corruption_schedule(CorruptionKind::GaussianNoise);
        let a = shift_sweep(&ds, &noisy, &table, 42).unwrap();
        let b = shift_sweep(&ds, &noisy, &table, 42).unwrap();
        assert_eq!(a, b);
        // Per-image seeds: the two images get different noise.
        let d0: Vec<f32> = a[0].1.images[0].pixels.iter().zip(&ds.images[0].pixels).map(|(x, y)| x - y).collect();
        let d1: Vec<f32> = a[0].1.images[1].pixels.iter().zip(&ds.images[1].pixels).map(|(x, y)| x - y).collect();
        assert_ne!(d0, d1);
    }

    proptest! {
        #[test]
        fn roll_composes(a in 0usize..=28, b in 0usize..=28, seed in any::<u64>()) {
            let im = random_image(seed, 4, 28);
            prop_assert_eq!(roll(&roll(&im, a), b), roll(&im, (a + b) % 28));
        }

        #[test]
        fn transforms_preserve_shape_and_range(seed in any::<u64>(), deg in 0.0f64..360.0, sev in 1u8..=5, k in 0usize..6) {
            let im = random_image(seed, 12, 12);
            let table = CorruptionTable::default();
            for out in [rotate(&im, deg), roll(&im, 5), corrupt(&im, CorruptionKind::ALL[k], sev, &table, seed).unwrap()] {
                prop_assert!(out.same_shape(&im));
                prop_assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
