//! Per-epoch split of the training set into a low-pass filtered part and an
//! untouched part, plus the seeded train/validation split.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, LabeledImage};
use crate::error::{Error, Result};
use crate::filter::filter_image;

/// One epoch's partition of the base set.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridDataset {
    pub len: usize,
    /// Sorted indices whose images are filtered this epoch.
    pub filt_indices: Vec<usize>,
    /// Sorted complement of `filt_indices`.
    pub orig_indices: Vec<usize>,
    pub lambda_per_image: BTreeMap<usize, u32>,
    pub epoch_seed: u64,
}

impl HybridDataset {
    pub fn is_filtered(&self, index: usize) -> bool {
        self.lambda_per_image.contains_key(&index)
    }

    /// The image at `index` as seen in this epoch's mixed set.
    pub fn materialize(&self, base: &[LabeledImage], index: usize) -> Result<LabeledImage> {
        let item = &base[index];
        match self.lambda_per_image.get(&index) {
            Some(&lambda) => Ok(LabeledImage {
                image: filter_image(&item.image, lambda)?,
                label: item.label,
            }),
            None => Ok(item.clone()),
        }
    }
}

/// Selects `round(ρ·N)` images to filter, each with a λ drawn uniformly from
/// `lambda_set`, using a seed derived from `(run_seed, epoch)`.
pub fn build_hybrid(base_len: usize, rho: f64, lambda_set: &[u32], epoch: usize, run_seed: u64) -> Result<HybridDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    if lambda_set.is_empty() {
        return Err(Error::InvalidArgument("lambda set is empty".into()));
    }
    if let Some(&bad) = lambda_set.iter().find(|&&l| !(1..=100).contains(&l)) {
        return Err(Error::InvalidArgument(format!("lambda {bad} outside [1, 100]")));
    }
    let epoch_seed = derive_seed(run_seed, &[0x4879_6272_6964, epoch as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let count = ((rho * base_len as f64).round() as usize).min(base_len);
    let mut filt_indices = sample(&mut rng, base_len, count).into_vec();
    filt_indices.sort_unstable();
    let lambda_per_image = filt_indices
        .iter()
        .map(|&i| (i, lambda_set[rng.random_range(0..lambda_set.len())]))
        .collect();
    let mut is_filt = vec![false; base_len];
    for &i in &filt_indices {
        is_filt[i] = true;
    }
    let orig_indices = (0..base_len).filter(|&i| !is_filt[i]).collect();
    Ok(HybridDataset {
        len: base_len,
        filt_indices,
        orig_indices,
        lambda_per_image,
        epoch_seed,
    })
}

/// Seeded shuffle split; the second part holds `round(frac·N)` items.
pub fn split_train_val<T: Clone>(data: &[T], frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction {frac} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (frac * data.len() as f64).round() as usize;
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| data[i].clone()).collect(),
        val_idx.iter().map(|&i| data[i].clone()).collect(),
    ))
}
