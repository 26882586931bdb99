//! Evaluation over clean and corrupted test splits, before and after
//! temperature scaling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::train::encode_images;
use crate::data::{corrupt, derive_seed, Corruption, CorruptionSpec, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, apply_temperature, cece, ece, fit_temperature, reliability, PredictionLog, ReliabilityDiagram};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;

const PREDICT_CHUNK: usize = 64;
const STREAM_CORRUPT: u64 = 11;

/// One line of `metrics.csv`. Clean rows have corruption `none`, severity 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub split: String,
    pub corruption: String,
    pub severity: u8,
    pub accuracy: f64,
    pub ece: f64,
    pub cece: f64,
    pub ece_ts: f64,
    pub cece_ts: f64,
    #[serde(rename = "T_star")]
    pub t_star: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub t_star: f64,
    /// Clean-split reliability diagrams, keyed by split name.
    pub reliability: Vec<(String, ReliabilityDiagram)>,
}

/// Logits for `items`, computed in chunks without a persistent tape.
pub fn predict_logits(model: &Model, params: &ModelParams, items: &[LabeledImage]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Empty("images to predict"));
    }
    let mut data = Vec::with_capacity(items.len() * model.classes);
    for chunk in items.chunks(PREDICT_CHUNK) {
        data.extend(model.logits(params, encode_images(model, chunk)?)?.into_data());
    }
    Tensor::new(vec![items.len(), model.classes], data)
}

fn labels(items: &[LabeledImage]) -> Vec<usize> {
    items.iter().map(|x| x.label).collect()
}

fn row(split: &str, corruption: &str, severity: u8, logits: Tensor, y: Vec<usize>, t_star: f64, bins: usize) -> Result<MetricsRow> {
    let scaled = apply_temperature(&logits, &y, t_star)?;
    let log = PredictionLog::from_logits(logits, y)?;
    Ok(MetricsRow {
        split: split.to_string(),
        corruption: corruption.to_string(),
        severity,
        accuracy: accuracy(&log)?,
        ece: ece(&log, bins)?,
        cece: cece(&log, bins)?,
        ece_ts: ece(&scaled, bins)?,
        cece_ts: cece(&scaled, bins)?,
        t_star,
    })
}

/// Fits the post-hoc temperature once, on clean validation data.
pub fn fit_run_temperature(model: &Model, params: &ModelParams, val: &[LabeledImage], bins: usize) -> Result<f64> {
    let log = PredictionLog::from_logits(predict_logits(model, params, val)?, labels(val))?;
    fit_temperature(&log, bins)
}

/// The clean row for `items` followed by one row per (corruption, severity),
/// all scored with the same `t_star`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &Model,
    params: &ModelParams,
    split: &str,
    items: &[LabeledImage],
    grid: &[Corruption],
    t_star: f64,
    bins: usize,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let clean = predict_logits(model, params, items)?;
    corrupted_rows(model, params, split, items, clean, grid, t_star, bins, seed)
}

#[allow(clippy::too_many_arguments)]
fn corrupted_rows(
    model: &Model,
    params: &ModelParams,
    split: &str,
    items: &[LabeledImage],
    clean: Tensor,
    grid: &[Corruption],
    t_star: f64,
    bins: usize,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let y = labels(items);
    let mut rows = vec![row(split, "none", 0, clean, y.clone(), t_star, bins)?];
    for &kind in grid {
        for severity in 1..=5u8 {
            let spec = CorruptionSpec::new(kind, severity)?;
            let shifted: Vec<LabeledImage> = items
                .iter()
                .enumerate()
                .map(|(i, item)| LabeledImage {
                    image: corrupt(
                        &item.image,
                        spec,
                        derive_seed(seed, &[STREAM_CORRUPT, kind as u64, severity as u64, i as u64]),
                    ),
                    label: item.label,
                })
                .collect();
            let logits = predict_logits(model, params, &shifted)?;
            rows.push(row(split, kind.name(), severity, logits, y.clone(), t_star, bins)?);
        }
    }
    Ok(rows)
}

/// Scores `test_id` over the corruption grid and, when present, `test_shift`
/// clean; the temperature is fit exactly once on `val`.
pub fn evaluate(
    model: &Model,
    params: &ModelParams,
    data: &Dataset,
    grid: &[Corruption],
    bins: usize,
    seed: u64,
) -> Result<EvalReport> {
    let t_star = fit_run_temperature(model, params, &data.val, bins)?;
    let mut rows = Vec::new();
    let mut reliability_diagrams = Vec::new();
    let mut splits = vec![("test_id", &data.test_id, grid)];
    if !data.test_shift.is_empty() {
        splits.push(("test_shift", &data.test_shift, &[]));
    }
    for (name, items, grid) in splits {
        let clean = predict_logits(model, params, items)?;
        let log = PredictionLog::from_logits(clean.clone(), labels(items))?;
        reliability_diagrams.push((name.to_string(), reliability(&log, bins)?));
        rows.extend(corrupted_rows(model, params, name, items, clean, grid, t_star, bins, seed)?);
    }
    Ok(EvalReport {
        rows,
        t_star,
        reliability: reliability_diagrams,
    })
}

/// In-distribution and shifted headline numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc_id: f64,
    pub ece_id: f64,
    pub acc_shift: f64,
    pub ece_shift: f64,
    pub ece_id_ts: f64,
    pub ece_shift_ts: f64,
}

impl EvalReport {
    /// Shift numbers come from the `test_shift` split when it exists,
    /// otherwise from the mean over all corrupted `test_id` rows.
    pub fn summary(&self) -> Result<Summary> {
        let id = self
            .rows
            .iter()
            .find(|r| r.split == "test_id" && r.severity == 0)
            .ok_or(Error::Empty("clean test_id row"))?;
        let shifted: Vec<&MetricsRow> = match self.rows.iter().find(|r| r.split == "test_shift") {
            Some(r) => vec![r],
            None => self.rows.iter().filter(|r| r.severity > 0).collect(),
        };
        if shifted.is_empty() {
            return Err(Error::Empty("shifted evaluation rows"));
        }
        let mean = |f: fn(&MetricsRow) -> f64| shifted.iter().map(|r| f(r)).sum::<f64>() / shifted.len() as f64;
        Ok(Summary {
            acc_id: id.accuracy,
            ece_id: id.ece,
            acc_shift: mean(|r| r.accuracy),
            ece_shift: mean(|r| r.ece),
            ece_id_ts: id.ece_ts,
            ece_shift_ts: mean(|r| r.ece_ts),
        })
    }

    /// Writes `metrics.csv` and one `reliability_<split>.csv` per clean split.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("metrics.csv"), &self.rows)?;
        for (split, diagram) in &self.reliability {
            let file = std::fs::File::create(dir.join(format!("reliability_{split}.csv")))?;
            diagram.write_csv(std::io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

/// Serializes `rows` as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
