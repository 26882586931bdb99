//! Severity-indexed image corruptions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    GaussianBlur,
    Contrast,
    Brightness,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::GaussianNoise,
        Corruption::ShotNoise,
        Corruption::GaussianBlur,
        Corruption::Contrast,
        Corruption::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian-noise",
            Corruption::ShotNoise => "shot-noise",
            Corruption::GaussianBlur => "gaussian-blur",
            Corruption::Contrast => "contrast",
            Corruption::Brightness => "brightness",
        }
    }
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

const NOISE_SIGMA: [f64; 5] = [8.0, 13.0, 18.0, 26.0, 38.0];
/// Photon counts at full scale; fewer photons means more noise.
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const BLUR_SIGMA: [f64; 5] = [0.4, 0.6, 0.8, 1.1, 1.5];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
const BRIGHTNESS_SHIFT: [i32; 5] = [13, 26, 38, 51, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: Corruption,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: Corruption, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

fn map_channels(img: &ImageU8, mut f: impl FnMut(usize, f64) -> f64) -> ImageU8 {
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i, v as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageU8::new(img.height(), img.width(), data).expect("same geometry")
}

/// Adds `delta` to every channel, clamping to 8 bits.
pub fn shift_brightness(img: &ImageU8, delta: i32) -> ImageU8 {
    map_channels(img, |_, v| v + delta as f64)
}

/// Scales deviations from each channel's mean by `factor`.
pub fn adjust_contrast(img: &ImageU8, factor: f64) -> ImageU8 {
    let n = (img.height() * img.width()) as f64;
    let mut mean = [0.0; 3];
    for (i, &v) in img.data().iter().enumerate() {
        mean[i % 3] += v as f64 / n;
    }
    map_channels(img, |i, v| (v - mean[i % 3]) * factor + mean[i % 3])
}

fn gaussian_blur(img: &ImageU8, sigma: f64) -> ImageU8 {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height() as isize, img.width() as isize);
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let at = |buf: &[f64], y: isize, x: isize, c: usize| {
        let y = y.clamp(0, h - 1);
        let x = x.clamp(0, w - 1);
        buf[((y * w + x) * 3) as usize + c]
    };
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[((y * w + x) * 3) as usize + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * at(&src, y, x + k as isize - radius, c))
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[((y * w + x) * 3) as usize + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * at(&tmp, y + k as isize - radius, x, c))
                    .sum();
            }
        }
    }
    map_channels(img, |i, _| out[i])
}

/// Applies `spec` to `img`; noise draws are determined by `seed`.
pub fn corrupt(img: &ImageU8, spec: CorruptionSpec, seed: u64) -> ImageU8 {
    let level = spec.level();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.kind {
        Corruption::GaussianNoise => {
            let noise = Normal::new(0.0, NOISE_SIGMA[level]).expect("positive sigma");
            map_channels(img, |_, v| v + noise.sample(&mut rng))
        }
        Corruption::ShotNoise => {
            let photons = SHOT_PHOTONS[level];
            map_channels(img, |_, v| {
                let rate = v / 255.0 * photons;
                let count = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                count / photons * 255.0
            })
        }
        Corruption::GaussianBlur => gaussian_blur(img, BLUR_SIGMA[level]),
        Corruption::Contrast => adjust_contrast(img, CONTRAST_FACTOR[level]),
        Corruption::Brightness => shift_brightness(img, BRIGHTNESS_SHIFT[level]),
    }
}

#[cfg(test)]
/// Brightness offset used at a severity, for inverting in tests.
pub(crate) fn brightness_shift(severity: u8) -> i32 {
    BRIGHTNESS_SHIFT[severity as usize - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageU8 {
        ImageU8::from_fn(16, 16, |y, x| [(60 + y * 5) as u8, (80 + x * 4) as u8, 100]).unwrap()
    }

    fn l2(a: &ImageU8, b: &ImageU8) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn severity_range_is_checked() {
        assert!(CorruptionSpec::new(Corruption::Contrast, 0).is_err());
        assert!(CorruptionSpec::new(Corruption::Contrast, 6).is_err());
        assert!(CorruptionSpec::new(Corruption::Contrast, 5).is_ok());
    }

    #[test]
    fn gaussian_noise_distortion_grows_with_severity() {
        let img = sample();
        let mean_l2 = |s: u8| -> f64 {
            let spec = CorruptionSpec::new(Corruption::GaussianNoise, s).unwrap();
            (0..40).map(|seed| l2(&corrupt(&img, spec, seed), &img)).sum::<f64>() / 40.0
        };
        let d: Vec<f64> = (1..=5).map(mean_l2).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]), "{d:?}");
    }

    #[test]
    fn brightness_is_invertible_away_from_clamping() {
        let img = sample();
        for s in 1..=5 {
            let spec = CorruptionSpec::new(Corruption::Brightness, s).unwrap();
            let back = shift_brightness(&corrupt(&img, spec, 0), -brightness_shift(s));
            let max = img.data().iter().map(|&v| v as i32).max().unwrap();
            if max + brightness_shift(s) <= 255 {
                assert_eq!(back, img);
            }
        }
    }

    #[test]
    fn unit_contrast_is_identity() {
        let img = sample();
        assert_eq!(adjust_contrast(&img, 1.0), img);
    }

    #[test]
    fn corruptions_are_deterministic_and_sized() {
        let img = sample();
        for kind in Corruption::ALL {
            let spec = CorruptionSpec::new(kind, 3).unwrap();
            let a = corrupt(&img, spec, 11);
            assert_eq!(a, corrupt(&img, spec, 11));
            assert_eq!((a.height(), a.width()), (16, 16));
        }
        assert_eq!("shot-noise".parse::<Corruption>().unwrap(), Corruption::ShotNoise);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = ImageU8::filled(9, 7, [40, 90, 200]).unwrap();
        let spec = CorruptionSpec::new(Corruption::GaussianBlur, 5).unwrap();
        assert_eq!(corrupt(&img, spec, 0), img);
    }
}
