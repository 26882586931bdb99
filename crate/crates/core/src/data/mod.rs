//! Datasets: synthetic shape/texture images, corruptions, CIFAR-format
//! records, and the per-epoch filtered/original partition used in training.

mod cifar;
mod corrupt;
mod hybrid;
mod synth;

pub use cifar::{load_cifar10, read_records, write_records, CIFAR_SIDE};
pub use corrupt::{adjust_contrast, corrupt, shift_brightness, Corruption, CorruptionSpec};
pub use hybrid::{build_hybrid, split_train_val, HybridDataset};
pub use synth::{gen_shape_texture, texture_delta, SynthConfig, SynthSplits, Texture};

use crate::error::{Error, Result};
use crate::image::ImageU8;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub image: ImageU8,
    pub label: usize,
}

/// Per-channel normalization statistics applied when images become tensors.
pub const CHANNEL_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CHANNEL_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];

/// Stacks images into a normalized `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImageU8]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape(format!(
                "mixed image sizes in batch: {}x{} vs {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        for c in 0..3 {
            data.extend(
                img.data()
                    .iter()
                    .skip(c)
                    .step_by(3)
                    .map(|&v| (v as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c]),
            );
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Mixes a run seed with stream identifiers into an independent seed.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut state = seed;
    for &s in stream {
        state = splitmix(state ^ splitmix(s.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_is_planar() {
        let img = ImageU8::from_fn(1, 2, |_, x| if x == 0 { [255, 0, 0] } else { [0, 255, 0] }).unwrap();
        let t = images_to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        let r0 = (1.0 - CHANNEL_MEAN[0]) / CHANNEL_STD[0];
        assert!((t.data()[0] - r0).abs() < 1e-12);
        let g1 = (1.0 - CHANNEL_MEAN[1]) / CHANNEL_STD[1];
        assert!((t.data()[3] - g1).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
