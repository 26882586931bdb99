//! On-disk dataset layout: one record file per split plus `manifest.json`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{gen_shape_texture, read_records, split_train_val, write_records, LabeledImage, SynthConfig};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 4] = ["train", "val", "test_id", "test_shift"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test_id: usize,
    pub test_shift: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub counts: SplitCounts,
    pub classes: usize,
    pub side: usize,
    pub seed: u64,
    /// Generator settings, echoed verbatim.
    pub config: serde_json::Value,
}

/// Train/validation/test splits sharing one image size and class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test_id: Vec<LabeledImage>,
    /// Empty when the source has no dedicated shift split.
    pub test_shift: Vec<LabeledImage>,
    pub classes: usize,
    pub side: usize,
}

impl Dataset {
    pub fn synthetic(cfg: &SynthConfig) -> Result<Self> {
        let s = gen_shape_texture(cfg)?;
        Ok(Self {
            train: s.train,
            val: s.val,
            test_id: s.test_id,
            test_shift: s.test_shift,
            classes: cfg.classes,
            side: cfg.size,
        })
    }

    /// CIFAR-10 batches: `train` is split 90/10 into train and validation
    /// with seed 1; `test` becomes the in-distribution test split.
    pub fn cifar(train: Vec<LabeledImage>, test: Vec<LabeledImage>) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::Empty("CIFAR training batches"));
        }
        let (train, val) = split_train_val(&train, 0.1, 1)?;
        Ok(Self {
            train,
            val,
            test_id: test,
            test_shift: Vec::new(),
            classes: 10,
            side: crate::data::CIFAR_SIDE,
        })
    }

    pub fn split(&self, name: &str) -> Option<&[LabeledImage]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test_id" => Some(&self.test_id),
            "test_shift" => Some(&self.test_shift),
            _ => None,
        }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            val: self.val.len(),
            test_id: self.test_id.len(),
            test_shift: self.test_shift.len(),
        }
    }

    pub fn save(&self, dir: &Path, source: &str, seed: u64, config: serde_json::Value) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        for name in SPLITS {
            let file = File::create(dir.join(format!("{name}.bin")))?;
            write_records(self.split(name).expect("known split"), BufWriter::new(file))?;
        }
        let manifest = Manifest {
            source: source.to_string(),
            counts: self.counts(),
            classes: self.classes,
            side: self.side,
            seed,
            config,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let read = |name: &str| -> Result<Vec<LabeledImage>> {
            read_records(&std::fs::read(dir.join(format!("{name}.bin")))?, manifest.side, manifest.classes)
        };
        let data = Self {
            train: read("train")?,
            val: read("val")?,
            test_id: read("test_id")?,
            test_shift: read("test_shift")?,
            classes: manifest.classes,
            side: manifest.side,
        };
        if data.counts() != manifest.counts {
            return Err(Error::Format(format!(
                "split sizes {:?} disagree with manifest {:?}",
                data.counts(),
                manifest.counts
            )));
        }
        Ok(data)
    }
}
