//! JPEG-style DCT low-pass filtering.
//!
//! An image is converted to full-range YCbCr, level-shifted by −128, tiled
//! into 8×8 blocks (edge-replicated up to a multiple of 8), transformed with
//! an orthonormal DCT-II, quantized and dequantized with a quality-scaled
//! table, inverted and converted back to RGB. Lower quality λ means coarser
//! quantization and therefore stronger suppression of high frequencies.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;

/// An 8×8 block indexed `[row][col]`; in the frequency domain `[u][v]`.
pub type Block8 = [[f64; 8]; 8];

/// ITU-T T.81 Annex K luminance table.
const LUMA_BASE: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// ITU-T T.81 Annex K chrominance table.
const CHROMA_BASE: [[u16; 8]; 8] = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlaneKind {
    Luma,
    Chroma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantMatrix {
    pub values: [[u16; 8]; 8],
    pub kind: PlaneKind,
}

/// Quality-scaled quantization table (libjpeg rule).
pub fn quant_matrix(lambda: u32, kind: PlaneKind) -> Result<QuantMatrix> {
    if !(1..=100).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [1, 100]")));
    }
    let scale = if lambda < 50 { 5000 / lambda } else { 200 - 2 * lambda };
    let base = match kind {
        PlaneKind::Luma => &LUMA_BASE,
        PlaneKind::Chroma => &CHROMA_BASE,
    };
    let mut values = [[0u16; 8]; 8];
    for (out, row) in values.iter_mut().zip(base) {
        for (q, &b) in out.iter_mut().zip(row) {
            *q = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
        }
    }
    Ok(QuantMatrix { values, kind })
}

/// `basis[u][x] = α(u)·cos((2x+1)uπ/16)` with orthonormal α.
fn basis() -> &'static Block8 {
    static BASIS: OnceLock<Block8> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        c
    })
}

/// Orthonormal 2-D DCT-II.
pub fn dct8(block: &Block8) -> Block8 {
    let c = basis();
    // rows: tmp = C · block
    let mut tmp = [[0.0; 8]; 8];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u][x] = (0..8).map(|y| c[u][y] * block[y][x]).sum();
        }
    }
    // cols: out = tmp · Cᵀ
    let mut out = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// Inverse of [`dct8`].
pub fn idct8(coeffs: &Block8) -> Block8 {
    let c = basis();
    let mut tmp = [[0.0; 8]; 8];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y][v] = (0..8).map(|u| c[u][y] * coeffs[u][v]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = (0..8).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}

/// One image channel as floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Full-range JFIF conversion, each plane clamped to `[0, 255]`.
pub fn rgb_to_ycbcr(img: &ImageU8) -> [Plane; 3] {
    let n = img.height() * img.width();
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
        planes[0][i] = y.clamp(0.0, 255.0);
        planes[1][i] = cb.clamp(0.0, 255.0);
        planes[2][i] = cr.clamp(0.0, 255.0);
    }
    planes.map(|data| Plane {
        height: img.height(),
        width: img.width(),
        data,
    })
}

/// Inverse conversion with rounding and clamping to 8 bits.
pub fn ycbcr_to_rgb(planes: &[Plane; 3]) -> Result<ImageU8> {
    let (h, w) = (planes[0].height, planes[0].width);
    if planes.iter().any(|p| p.height != h || p.width != w || p.data.len() != h * w) {
        return Err(Error::Shape("YCbCr planes differ in size".into()));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    let to_u8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    for i in 0..h * w {
        let (y, cb, cr) = (planes[0].data[i], planes[1].data[i] - 128.0, planes[2].data[i] - 128.0);
        data.push(to_u8(y + 1.402 * cr));
        data.push(to_u8(y - 0.344136 * cb - 0.714136 * cr));
        data.push(to_u8(y + 1.772 * cb));
    }
    ImageU8::new(h, w, data)
}

/// Level-shifted 8×8 blocks of a plane, edge-replicated to a multiple of 8.
fn blocks(plane: &Plane) -> (usize, usize, Vec<Block8>) {
    let by = plane.height.div_ceil(8);
    let bx = plane.width.div_ceil(8);
    let mut out = Vec::with_capacity(by * bx);
    for j in 0..by {
        for i in 0..bx {
            let mut b = [[0.0; 8]; 8];
            for (r, row) in b.iter_mut().enumerate() {
                let y = (j * 8 + r).min(plane.height - 1);
                for (c, v) in row.iter_mut().enumerate() {
                    let x = (i * 8 + c).min(plane.width - 1);
                    *v = plane.at(y, x) - 128.0;
                }
            }
            out.push(b);
        }
    }
    (by, bx, out)
}

fn quantize_plane(plane: &Plane, q: &QuantMatrix) -> Plane {
    let (_, bx, blocks) = blocks(plane);
    let mut data = vec![0.0; plane.height * plane.width];
    for (idx, block) in blocks.iter().enumerate() {
        let mut f = dct8(block);
        for (frow, qrow) in f.iter_mut().zip(&q.values) {
            for (coef, &qv) in frow.iter_mut().zip(qrow) {
                let qv = qv as f64;
                *coef = (*coef / qv).round() * qv;
            }
        }
        let rec = idct8(&f);
        let (j, i) = (idx / bx, idx % bx);
        for (r, row) in rec.iter().enumerate() {
            let y = j * 8 + r;
            if y >= plane.height {
                break;
            }
            for (c, &v) in row.iter().enumerate() {
                let x = i * 8 + c;
                if x >= plane.width {
                    break;
                }
                data[y * plane.width + x] = v + 128.0;
            }
        }
    }
    Plane {
        height: plane.height,
        width: plane.width,
        data,
    }
}

/// Low-pass filters `img` at quality `lambda` ∈ [1, 100].
pub fn filter_image(img: &ImageU8, lambda: u32) -> Result<ImageU8> {
    let luma = quant_matrix(lambda, PlaneKind::Luma)?;
    let chroma = quant_matrix(lambda, PlaneKind::Chroma)?;
    let [y, cb, cr] = rgb_to_ycbcr(img);
    let planes = [
        quantize_plane(&y, &luma),
        quantize_plane(&cb, &chroma),
        quantize_plane(&cr, &chroma),
    ];
    ycbcr_to_rgb(&planes)
}

/// Mean squared luma DCT coefficient per frequency, normalized per pixel.
///
/// Entry `[u][v]` is `Σ_blocks F_b(u,v)² / (blocks · 64)`, so the matrix sums
/// to the mean square of the level-shifted (edge-padded) luma plane.
pub fn spectral_energy(img: &ImageU8) -> Block8 {
    let [y, _, _] = rgb_to_ycbcr(img);
    let (_, _, blocks) = blocks(&y);
    let norm = (blocks.len() * 64) as f64;
    let mut energy = [[0.0; 8]; 8];
    for block in &blocks {
        let f = dct8(block);
        for (erow, frow) in energy.iter_mut().zip(&f) {
            for (e, c) in erow.iter_mut().zip(frow) {
                *e += c * c / norm;
            }
        }
    }
    energy
}

/// Energy in frequencies with `u + v ≥ min_index_sum`.
pub fn band_energy(energy: &Block8, min_index_sum: usize) -> f64 {
    let mut total = 0.0;
    for (u, row) in energy.iter().enumerate() {
        for (v, e) in row.iter().enumerate() {
            if u + v >= min_index_sum {
                total += e;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_black_map_to_neutral_chroma() {
        for v in [0u8, 77, 255] {
            let [y, cb, cr] = rgb_to_ycbcr(&ImageU8::filled(1, 1, [v, v, v]).unwrap());
            assert!((y.data[0] - v as f64).abs() < 1e-9);
            assert!((cb.data[0] - 128.0).abs() < 1e-9);
            assert!((cr.data[0] - 128.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pure_red_conversion() {
        let [y, cb, cr] = rgb_to_ycbcr(&ImageU8::filled(1, 1, [255, 0, 0]).unwrap());
        assert!((y.data[0] - 76.245).abs() < 1e-9);
        assert!((cb.data[0] - 84.97232).abs() < 1e-9);
        assert_eq!(cr.data[0], 255.0);
    }

    #[test]
    fn color_round_trip_within_two_levels() {
        let img = ImageU8::from_fn(16, 16, |y, x| [(y * 16) as u8, (x * 16) as u8, ((x * y) % 256) as u8]).unwrap();
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img)).unwrap();
        assert!(img.max_abs_diff(&back) <= 2);
    }

    #[test]
    fn dct_of_constant_is_dc_only() {
        let f = dct8(&[[3.5; 8]; 8]);
        assert!((f[0][0] - 28.0).abs() < 1e-12);
        let rest: f64 = f.iter().flatten().skip(1).map(|v| v.abs()).sum();
        assert!(rest < 1e-12);
        assert_eq!(dct8(&[[0.0; 8]; 8]), [[0.0; 8]; 8]);
        let mut dc = [[0.0; 8]; 8];
        dc[0][0] = 8.0 * -2.25;
        for v in idct8(&dc).iter().flatten() {
            assert!((v + 2.25).abs() < 1e-12);
        }
    }

    #[test]
    fn quant_matrix_examples() {
        let q50 = quant_matrix(50, PlaneKind::Luma).unwrap();
        assert_eq!(q50.values, LUMA_BASE);
        assert_eq!(quant_matrix(50, PlaneKind::Chroma).unwrap().values, CHROMA_BASE);
        let q100 = quant_matrix(100, PlaneKind::Chroma).unwrap();
        assert!(q100.values.iter().flatten().all(|&v| v == 1));
        assert!(quant_matrix(0, PlaneKind::Luma).is_err());
        assert!(quant_matrix(101, PlaneKind::Luma).is_err());
        for kind in [PlaneKind::Luma, PlaneKind::Chroma] {
            for l in 1..100 {
                let a = quant_matrix(l, kind).unwrap();
                let b = quant_matrix(l + 1, kind).unwrap();
                for (ra, rb) in a.values.iter().zip(&b.values) {
                    for (x, y) in ra.iter().zip(rb) {
                        assert!(x >= y, "lambda {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn filter_preserves_dimensions_including_odd_sizes() {
        let img = ImageU8::from_fn(13, 21, |y, x| [(y * 19) as u8, (x * 11) as u8, 90]).unwrap();
        let out = filter_image(&img, 25).unwrap();
        assert_eq!((out.height(), out.width()), (13, 21));
        assert_eq!(out, filter_image(&img, 25).unwrap());
    }

    #[test]
    fn constant_image_survives_filtering() {
        for rgb in [[10, 200, 30], [128, 128, 128], [255, 255, 0]] {
            let img = ImageU8::filled(16, 24, rgb).unwrap();
            for lambda in [1, 15, 50, 100] {
                let out = filter_image(&img, lambda).unwrap();
                // Only DC survives; its rounding error is bounded by Q[0][0]/2
                // spread over the 8x8 block, plus color rounding.
                let dc_bound = |kind| quant_matrix(lambda, kind).unwrap().values[0][0] as f64 / 16.0;
                let bound = 2.0 * dc_bound(PlaneKind::Luma).max(dc_bound(PlaneKind::Chroma)) + 2.0;
                assert!(img.max_abs_diff(&out) as f64 <= bound, "{rgb:?} λ={lambda}");
                if lambda >= 50 {
                    assert!(img.max_abs_diff(&out) <= 2, "{rgb:?} λ={lambda}");
                }
            }
        }
    }

    #[test]
    fn energy_of_constant_image_is_dc() {
        let e = spectral_energy(&ImageU8::filled(16, 16, [200, 200, 200]).unwrap());
        assert!((e[0][0] - 72.0 * 72.0).abs() < 1e-9);
        assert!(band_energy(&e, 1) < 1e-18);
    }
}
