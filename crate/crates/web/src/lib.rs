//! Three interactive views over `fgr-core`, exported to JavaScript:
//!
//! * low-pass filtering of a test pattern and its luma spectrum,
//! * 2-D gradient rectification geometry,
//! * a reliability diagram under temperature scaling.
//!
//! The logic lives in plain Rust functions (tested natively); the
//! `#[wasm_bindgen]` wrappers only convert errors.

use fgr_core::filter::{band_energy, filter_image, spectral_energy};
use fgr_core::image::ImageU8;
use fgr_core::metrics::{apply_temperature, fit_temperature, reliability, PredictionLog};
use fgr_core::rectify::{cosine, rectify, GradientVector};
use fgr_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

pub const BINS: usize = 15;
pub const CLASSES: usize = 3;

/// Test patterns for the filter view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Low-contrast checkerboard of 2-pixel squares on mid-gray.
    Checkerboard,
    Stripes,
    /// Filled disc with a faint stripe texture, like the synthetic dataset.
    TexturedDisc,
}

impl Pattern {
    pub fn from_index(i: u32) -> Option<Self> {
        [Pattern::Checkerboard, Pattern::Stripes, Pattern::TexturedDisc].get(i as usize).copied()
    }
}

/// RGB test image of side `size`.
pub fn render(pattern: Pattern, size: usize) -> fgr_core::Result<ImageU8> {
    let c = size as f64 / 2.0;
    ImageU8::from_fn(size, size, |y, x| match pattern {
        Pattern::Checkerboard => {
            let v = if (y / 2 + x / 2) % 2 == 0 { 144 } else { 112 };
            [v, v, v]
        }
        Pattern::Stripes => {
            let v = if x % 2 == 0 { 200 } else { 60 };
            [v, v / 2, 255 - v]
        }
        Pattern::TexturedDisc => {
            let r = ((y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2)).sqrt();
            let t: i32 = if x % 2 == 0 { 12 } else { -12 };
            let base: [i32; 3] = if r < c * 0.6 { [200, 90, 60] } else { [70, 110, 160] };
            base.map(|b| (b + t).clamp(0, 255) as u8)
        }
    })
}

/// RGBA bytes for a canvas `ImageData`.
pub fn to_rgba(img: &ImageU8) -> Vec<u8> {
    img.data().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Filter view: original and filtered RGBA, then the two 8×8 luma spectra
/// (row-major, 64 values each), then high-band energy (u+v ≥ 8) before/after.
pub struct FilterView {
    pub original: Vec<u8>,
    pub filtered: Vec<u8>,
    pub spectrum_before: Vec<f64>,
    pub spectrum_after: Vec<f64>,
    pub high_before: f64,
    pub high_after: f64,
}

pub fn filter_view(pattern: Pattern, size: usize, lambda: u32) -> fgr_core::Result<FilterView> {
    let img = render(pattern, size)?;
    let out = filter_image(&img, lambda)?;
    let (before, after) = (spectral_energy(&img), spectral_energy(&out));
    Ok(FilterView {
        original: to_rgba(&img),
        filtered: to_rgba(&out),
        spectrum_before: before.iter().flatten().copied().collect(),
        spectrum_after: after.iter().flatten().copied().collect(),
        high_before: band_energy(&before, 8),
        high_after: band_energy(&after, 8),
    })
}

/// `[final_x, final_y, conflicted (0/1), cosine(main, calib)]`.
pub fn rectify_2d(main: [f64; 2], calib: [f64; 2]) -> fgr_core::Result<[f64; 4]> {
    let (m, c) = (GradientVector::from_flat(main.to_vec()), GradientVector::from_flat(calib.to_vec()));
    let r = rectify(&m, &c)?;
    Ok([r.gradient.flat[0], r.gradient.flat[1], f64::from(u8::from(r.conflicted)), cosine(&m, &c)])
}

/// Synthetic classifier outputs: the true class gets a margin of `signal`,
/// everything is scaled by `sharpness` (large = overconfident).
pub fn synthetic_logits(n: usize, sharpness: f64, signal: f64, seed: u64) -> fgr_core::Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n * CLASSES);
    let labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
    for &y in &labels {
        for k in 0..CLASSES {
            let margin = if k == y { signal } else { 0.0 };
            data.push(sharpness * (margin + noise.sample(&mut rng)));
        }
    }
    Ok((Tensor::new(vec![n, CLASSES], data)?, labels))
}

/// Reliability view: `[ece, accuracy, best_T]` then `(confidence, accuracy,
/// count)` for each of the 15 bins.
pub fn reliability_view(n: usize, sharpness: f64, temperature: f64, seed: u64) -> fgr_core::Result<Vec<f64>> {
    let (logits, labels) = synthetic_logits(n, sharpness, 1.0, seed)?;
    let best = fit_temperature(&PredictionLog::from_logits(logits.clone(), labels.clone())?, BINS)?;
    let log = apply_temperature(&logits, &labels, temperature)?;
    let diagram = reliability(&log, BINS)?;
    let acc = log.predictions().iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
    let mut out = vec![diagram.ece(), acc, best];
    for b in &diagram.bins {
        out.extend([b.confidence, b.accuracy, b.count as f64]);
    }
    Ok(out)
}

fn js(e: fgr_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct FilterResult(FilterView);

#[wasm_bindgen]
impl FilterResult {
    pub fn original(&self) -> Vec<u8> {
        self.0.original.clone()
    }
    pub fn filtered(&self) -> Vec<u8> {
        self.0.filtered.clone()
    }
    pub fn spectrum_before(&self) -> Vec<f64> {
        self.0.spectrum_before.clone()
    }
    pub fn spectrum_after(&self) -> Vec<f64> {
        self.0.spectrum_after.clone()
    }
    pub fn high_before(&self) -> f64 {
        self.0.high_before
    }
    pub fn high_after(&self) -> f64 {
        self.0.high_after
    }
}

#[wasm_bindgen(js_name = filterDemo)]
pub fn filter_demo(pattern: u32, size: usize, lambda: u32) -> Result<FilterResult, JsError> {
    let pattern = Pattern::from_index(pattern).ok_or_else(|| JsError::new("unknown pattern"))?;
    filter_view(pattern, size, lambda).map(FilterResult).map_err(js)
}

#[wasm_bindgen(js_name = rectifyDemo)]
pub fn rectify_demo(mx: f64, my: f64, cx: f64, cy: f64) -> Result<Vec<f64>, JsError> {
    rectify_2d([mx, my], [cx, cy]).map(|r| r.to_vec()).map_err(js)
}

#[wasm_bindgen(js_name = reliabilityDemo)]
pub fn reliability_demo(n: usize, sharpness: f64, temperature: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    reliability_view(n, sharpness, temperature, seed).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strong_filter_removes_checkerboard_energy() {
        let v = filter_view(Pattern::Checkerboard, 32, 15).unwrap();
        assert_eq!(v.original.len(), 32 * 32 * 4);
        assert!(v.high_after < 0.1 * v.high_before);
        assert_eq!(v.spectrum_before.len(), 64);
    }

    #[test]
    fn rectify_projects_only_on_conflict() {
        let r = rectify_2d([1.0, 0.0], [-1.0, 1.0]).unwrap();
        assert_eq!(r[2], 1.0);
        // Result is orthogonal to the calibration direction.
        assert!((r[0] * -1.0 + r[1]).abs() < 1e-12);
        let r = rectify_2d([1.0, 1.0], [1.0, 0.0]).unwrap();
        assert_eq!(&r[..3], &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn reliability_layout_and_temperature_effect() {
        let v = reliability_view(600, 4.0, 1.0, 7).unwrap();
        assert_eq!(v.len(), 3 + 3 * BINS);
        let counts: f64 = v[3..].chunks(3).map(|b| b[2]).sum();
        assert_eq!(counts, 600.0);
        // Overconfident logits: the fitted temperature cools them and lowers ECE.
        let best = v[2];
        assert!(best > 1.0);
        let tuned = reliability_view(600, 4.0, best, 7).unwrap();
        assert!(tuned[0] < v[0]);
        assert_eq!(tuned[1], v[1]);
    }

    #[test]
    fn bad_inputs_error() {
        assert!(Pattern::from_index(9).is_none());
        assert!(filter_view(Pattern::Stripes, 16, 0).is_err());
        assert!(reliability_view(10, 1.0, 0.0, 1).is_err());
    }
}
