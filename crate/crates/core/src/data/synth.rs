//! Shape-vs-texture classification data.
//!
//! The class is carried by a low-frequency shape (disk, square, triangle).
//! In-distribution splits overlay a faint 2-pixel-period texture tied to the
//! class, a spurious shortcut a network can latch onto. The shift split
//! permutes the class↔texture assignment so the shortcut points the wrong way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, LabeledImage};
use crate::error::{Error, Result};
use crate::image::ImageU8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub classes: usize,
    pub size: usize,
    /// Texture amplitude as a fraction of full scale (0.03 ≈ ±8 levels).
    pub texture_strength: f64,
    /// Standard deviation of per-pixel Gaussian noise, in 8-bit levels.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// `n` training images with `n/10` validation and `n/3` per test split.
    pub fn with_train_size(n: usize, texture_strength: f64, seed: u64) -> Self {
        Self {
            n_train: n,
            n_val: n / 10,
            n_test: n / 3,
            classes: 3,
            size: 32,
            texture_strength,
            noise: 6.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.classes) {
            return Err(Error::Config(format!(
                "shape/texture data supports 2 or 3 classes, got {}",
                self.classes
            )));
        }
        if self.n_train < self.classes {
            return Err(Error::Config(format!(
                "need at least one training image per class ({} < {})",
                self.n_train, self.classes
            )));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Config(format!("size {} is not a positive multiple of 8", self.size)));
        }
        if !(0.0..=1.0).contains(&self.texture_strength) || self.noise < 0.0 {
            return Err(Error::Config("texture_strength must be in [0,1] and noise >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    VerticalStripes,
    HorizontalStripes,
    Checkerboard,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::VerticalStripes, Texture::HorizontalStripes, Texture::Checkerboard];
}

/// Sign of the texture at a pixel: ±1.
pub fn texture_delta(texture: Texture, y: usize, x: usize) -> f64 {
    let parity = match texture {
        Texture::VerticalStripes => x,
        Texture::HorizontalStripes => y,
        Texture::Checkerboard => x + y,
    };
    if parity % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test_id: Vec<LabeledImage>,
    pub test_shift: Vec<LabeledImage>,
    /// Texture index used for each class in the shift split.
    pub shift_textures: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Split {
    Train = 0,
    Val = 1,
    TestId = 2,
    TestShift = 3,
}

/// A random permutation of `0..k` with no fixed point.
fn derangement(k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn inside(label: usize, y: f64, x: f64, cy: f64, cx: f64, r: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match label {
        0 => dx * dx + dy * dy <= r * r,
        // Same area as the disk.
        1 => {
            let half = r * std::f64::consts::PI.sqrt() / 2.0;
            dx.abs() <= half && dy.abs() <= half
        }
        _ => {
            // Upward triangle with apex at cy − r and base at cy + r/2.
            let top = cy - r;
            let base = cy + 0.5 * r;
            if y < top || y > base {
                return false;
            }
            let half_width = (y - top) / (base - top) * r * 3f64.sqrt() / 2.0 * 1.25;
            dx.abs() <= half_width
        }
    }
}

fn render(label: usize, texture: usize, cfg: &SynthConfig, seed: u64) -> ImageU8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.size as f64;
    let r = rng.random_range(0.22..0.36) * s;
    let cy = rng.random_range(r..s - r);
    let cx = rng.random_range(r..s - r);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(20.0..110.0));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(140.0..235.0));
    let amplitude = cfg.texture_strength * 255.0;
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let tex = Texture::ALL[texture];
    ImageU8::from_fn(cfg.size, cfg.size, |y, x| {
        let base = if inside(label, y as f64 + 0.5, x as f64 + 0.5, cy, cx, r) { fg } else { bg };
        let t = amplitude * texture_delta(tex, y, x);
        std::array::from_fn(|c| {
            let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base[c] + t + n).round().clamp(0.0, 255.0) as u8
        })
    })
    .expect("size validated")
}

fn split(cfg: &SynthConfig, which: Split, count: usize, textures: &[usize]) -> Vec<LabeledImage> {
    (0..count)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[which as u64, i as u64]);
            let label = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(0..cfg.classes);
            LabeledImage {
                image: render(label, textures[label], cfg, seed),
                label,
            }
        })
        .collect()
}

pub fn gen_shape_texture(cfg: &SynthConfig) -> Result<SynthSplits> {
    cfg.validate()?;
    let id_textures: Vec<usize> = (0..cfg.classes).collect();
    let shift_textures = derangement(cfg.classes, derive_seed(cfg.seed, &[99]));
    Ok(SynthSplits {
        train: split(cfg, Split::Train, cfg.n_train, &id_textures),
        val: split(cfg, Split::Val, cfg.n_val, &id_textures),
        test_id: split(cfg, Split::TestId, cfg.n_test, &id_textures),
        test_shift: split(cfg, Split::TestShift, cfg.n_test, &shift_textures),
        shift_textures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{band_energy, spectral_energy};

    fn small(strength: f64) -> SynthConfig {
        SynthConfig {
            n_train: 30,
            n_val: 6,
            n_test: 12,
            classes: 3,
            size: 32,
            texture_strength: strength,
            noise: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_shape_texture(&small(0.03)).unwrap();
        let b = gen_shape_texture(&small(0.03)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_shift, b.test_shift);
        assert_eq!((a.train.len(), a.val.len(), a.test_id.len(), a.test_shift.len()), (30, 6, 12, 12));
    }

    #[test]
    fn shift_textures_form_a_derangement() {
        for seed in 0..20 {
            let p = derangement(3, seed);
            assert!(p.iter().enumerate().all(|(i, &t)| i != t));
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, [0, 1, 2]);
        }
        assert_eq!(derangement(2, 3), [1, 0]);
    }

    #[test]
    fn no_texture_means_no_shift() {
        let cfg = small(0.0);
        let splits = gen_shape_texture(&cfg).unwrap();
        // Without texture, rendering ignores the texture assignment entirely.
        for i in 0..5 {
            let seed = derive_seed(cfg.seed, &[Split::TestShift as u64, i]);
            let item = &splits.test_shift[i as usize];
            let other = render(item.label, (item.label + 1) % 3, &cfg, seed);
            assert_eq!(other, item.image);
        }
    }

    #[test]
    fn texture_adds_high_band_energy() {
        let tex = gen_shape_texture(&small(0.03)).unwrap();
        let plain = gen_shape_texture(&small(0.0)).unwrap();
        for (a, b) in tex.train.iter().zip(&plain.train).take(6) {
            let ea = band_energy(&spectral_energy(&a.image), 7);
            let eb = band_energy(&spectral_energy(&b.image), 7);
            assert!(ea > eb + 20.0, "textured {ea} vs plain {eb}");
        }
    }

    #[test]
    fn invalid_configs_error() {
        let mut c = small(0.03);
        c.size = 30;
        assert!(gen_shape_texture(&c).is_err());
        let mut c = small(0.03);
        c.classes = 5;
        assert!(gen_shape_texture(&c).is_err());
        let mut c = small(0.03);
        c.n_train = 2;
        assert!(gen_shape_texture(&c).is_err());
    }
}
