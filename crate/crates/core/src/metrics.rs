//! Binned calibration metrics and temperature scaling.
//!
//! Bin `m` (1-based) of `M` holds confidences in `((m−1)/M, m/M]`; a
//! confidence of exactly 0 falls in the first bin.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_rows, Tensor};

pub const DEFAULT_BINS: usize = 15;

/// Temperatures searched by [`fit_temperature`]: 0.10, 0.11, …, 5.00.
pub fn temperature_grid() -> impl Iterator<Item = f64> {
    (10..=500).map(|c| c as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    pub probs: Tensor,
    pub labels: Vec<usize>,
    pub logits: Option<Tensor>,
}

impl PredictionLog {
    pub fn from_probs(probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let log = Self {
            probs,
            labels,
            logits: None,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn from_logits(logits: Tensor, labels: Vec<usize>) -> Result<Self> {
        let probs = softmax_rows(&logits);
        let log = Self {
            probs,
            labels,
            logits: Some(logits),
        };
        log.validate()?;
        Ok(log)
    }

    fn validate(&self) -> Result<()> {
        if self.probs.ndim() != 2 {
            return Err(Error::Shape(format!("probs must be [N,K], got {:?}", self.probs.shape())));
        }
        let k = self.probs.cols();
        if self.labels.len() != self.probs.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} predictions",
                self.labels.len(),
                self.probs.rows()
            )));
        }
        if let Some(&label) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        for i in 0..self.probs.rows() {
            let s: f64 = self.probs.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }

    /// Top-class probability and whether the top class is correct.
    pub fn confidences(&self) -> (Vec<f64>, Vec<bool>) {
        (0..self.len())
            .map(|i| {
                let row = self.probs.row(i);
                let a = argmax(row);
                (row[a], a == self.labels[i])
            })
            .unzip()
    }
}

/// 0-based index of the bin containing `conf`.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let edge = |m: usize| m as f64 / bins as f64;
    let mut m = ((conf * bins as f64).ceil() as usize).clamp(1, bins);
    while m > 1 && conf <= edge(m - 1) {
        m -= 1;
    }
    while m < bins && conf > edge(m) {
        m += 1;
    }
    m - 1
}

/// Per-bin sample counts and sums.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub counts: Vec<usize>,
    pub conf_sums: Vec<f64>,
    pub correct_sums: Vec<f64>,
}

impl BinStats {
    pub fn collect(confidences: &[f64], correct: &[bool], bins: usize) -> Self {
        let mut stats = Self {
            counts: vec![0; bins],
            conf_sums: vec![0.0; bins],
            correct_sums: vec![0.0; bins],
        };
        for (&c, &ok) in confidences.iter().zip(correct) {
            let m = bin_index(c, bins);
            stats.counts[m] += 1;
            stats.conf_sums[m] += c;
            if ok {
                stats.correct_sums[m] += 1.0;
            }
        }
        stats
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `Σ_m |B_m|/N · |acc(B_m) − conf(B_m)|`.
    pub fn calibration_error(&self) -> f64 {
        let n = self.total() as f64;
        let mut err = 0.0;
        for m in 0..self.counts.len() {
            if self.counts[m] == 0 {
                continue;
            }
            let count = self.counts[m] as f64;
            let gap = self.correct_sums[m] / count - self.conf_sums[m] / count;
            err += count / n * gap.abs();
        }
        err
    }
}

fn check_bins(log: &PredictionLog, bins: usize) -> Result<()> {
    if log.is_empty() {
        return Err(Error::Empty("prediction log"));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be at least 1".into()));
    }
    Ok(())
}

/// Expected calibration error of the top-class confidence.
pub fn ece(log: &PredictionLog, bins: usize) -> Result<f64> {
    check_bins(log, bins)?;
    let (conf, correct) = log.confidences();
    Ok(BinStats::collect(&conf, &correct, bins).calibration_error())
}

/// Class-wise ECE: every sample is binned once per class by `p_k`, with
/// correctness `y == k`, and the per-class errors are averaged.
pub fn cece(log: &PredictionLog, bins: usize) -> Result<f64> {
    check_bins(log, bins)?;
    let k = log.classes();
    let mut total = 0.0;
    for class in 0..k {
        let conf: Vec<f64> = (0..log.len()).map(|i| log.probs.row(i)[class]).collect();
        let hit: Vec<bool> = log.labels.iter().map(|&y| y == class).collect();
        total += BinStats::collect(&conf, &hit, bins).calibration_error();
    }
    Ok(total / k as f64)
}

pub fn accuracy(log: &PredictionLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::Empty("prediction log"));
    }
    let (_, correct) = log.confidences();
    Ok(correct.iter().filter(|&&c| c).count() as f64 / log.len() as f64)
}

/// Rescales logits by `1/temperature`.
pub fn apply_temperature(logits: &Tensor, labels: &[usize], temperature: f64) -> Result<PredictionLog> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let scaled = logits.map(|z| z / temperature);
    let mut log = PredictionLog::from_logits(scaled, labels.to_vec())?;
    log.logits = Some(logits.clone());
    Ok(log)
}

/// Grid temperature minimizing ECE on `val`; ties go to the smallest T.
pub fn fit_temperature(val: &PredictionLog, bins: usize) -> Result<f64> {
    let logits = val
        .logits
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("temperature fitting needs logits".into()))?;
    check_bins(val, bins)?;
    let mut best = (f64::INFINITY, f64::NAN);
    for t in temperature_grid() {
        let e = ece(&apply_temperature(logits, &val.labels, t)?, bins)?;
        if e < best.0 {
            best = (e, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub center: f64,
    pub accuracy: f64,
    pub confidence: f64,
    pub count: usize,
}

/// Per-bin accuracy and confidence; empty bins report zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityDiagram {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityDiagram {
    pub fn from_stats(stats: &BinStats) -> Self {
        let m = stats.counts.len();
        let bins = (0..m)
            .map(|i| {
                let count = stats.counts[i];
                let (accuracy, confidence) = if count == 0 {
                    (0.0, 0.0)
                } else {
                    (stats.correct_sums[i] / count as f64, stats.conf_sums[i] / count as f64)
                };
                ReliabilityBin {
                    center: (2 * i + 1) as f64 / (2 * m) as f64,
                    accuracy,
                    confidence,
                    count,
                }
            })
            .collect();
        Self { bins }
    }

    /// ECE recomputed from the diagram.
    pub fn ece(&self) -> f64 {
        let n: usize = self.bins.iter().map(|b| b.count).sum();
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
            .sum()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "bin_center,accuracy,confidence,count")?;
        for b in &self.bins {
            writeln!(out, "{},{},{},{}", b.center, b.accuracy, b.confidence, b.count)?;
        }
        Ok(())
    }
}

pub fn reliability(log: &PredictionLog, bins: usize) -> Result<ReliabilityDiagram> {
    check_bins(log, bins)?;
    let (conf, correct) = log.confidences();
    Ok(ReliabilityDiagram::from_stats(&BinStats::collect(&conf, &correct, bins)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(confs: &[f64], correct: &[bool]) -> PredictionLog {
        let rows: Vec<Vec<f64>> = confs.iter().map(|&c| vec![c, 1.0 - c]).collect();
        let labels = correct.iter().map(|&ok| if ok { 0 } else { 1 }).collect();
        PredictionLog::from_probs(Tensor::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0 / 15.0, 15), 0);
        assert_eq!(bin_index(1.0 / 15.0 + 1e-12, 15), 1);
        assert_eq!(bin_index(0.6, 15), 8);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.5, 1), 0);
    }

    #[test]
    fn ece_examples() {
        let perfect = two_class(&[1.0, 1.0], &[true, true]);
        assert_eq!(ece(&perfect, 15).unwrap(), 0.0);
        let log = two_class(&[0.9, 0.9, 0.6, 0.6], &[true, false, true, false]);
        assert!((ece(&log, 15).unwrap() - 0.25).abs() < 1e-12);
        let empty = PredictionLog::from_probs(Tensor::zeros(&[0, 2]), vec![]).unwrap();
        assert!(matches!(ece(&empty, 15), Err(Error::Empty(_))));
    }

    #[test]
    fn cece_examples() {
        let log = PredictionLog::from_probs(Tensor::from_rows(&[vec![0.7, 0.3]]).unwrap(), vec![0]).unwrap();
        assert!((cece(&log, 15).unwrap() - 0.3).abs() < 1e-12);
        let onehot =
            PredictionLog::from_probs(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0, 1])
                .unwrap();
        assert_eq!(cece(&onehot, 15).unwrap(), 0.0);
    }

    #[test]
    fn temperature_examples() {
        let logits = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let plain = PredictionLog::from_logits(logits.clone(), vec![0]).unwrap();
        assert_eq!(apply_temperature(&logits, &[0], 1.0).unwrap().probs, plain.probs);
        let t2 = apply_temperature(&logits, &[0], 2.0).unwrap();
        assert!((t2.probs.row(0)[0] - 0.731059).abs() < 1e-6);
        assert!((t2.probs.row(0)[1] - 0.268941).abs() < 1e-6);
        assert!(apply_temperature(&logits, &[0], 0.0).is_err());
        assert!(apply_temperature(&logits, &[0], -1.0).is_err());
        assert!(fit_temperature(&two_class(&[0.9], &[true]), 15).is_err());
    }

    #[test]
    fn grid_spans_tenth_to_five() {
        let grid: Vec<f64> = temperature_grid().collect();
        assert_eq!(grid.len(), 491);
        assert_eq!(grid[0], 0.10);
        assert_eq!(grid[1], 0.11);
        assert_eq!(*grid.last().unwrap(), 5.0);
    }

    #[test]
    fn reliability_of_confident_correct_log() {
        let log = two_class(&[1.0, 1.0, 1.0], &[true, true, true]);
        let d = reliability(&log, 15).unwrap();
        assert_eq!(d.bins.len(), 15);
        let last = d.bins.last().unwrap();
        assert_eq!((last.count, last.accuracy, last.confidence), (3, 1.0, 1.0));
        assert!(d.bins[..14].iter().all(|b| b.count == 0));
        assert!(d.bins.windows(2).all(|w| w[0].center < w[1].center));
        let mut csv = Vec::new();
        d.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("bin_center,accuracy,confidence,count\n"));
        assert_eq!(text.lines().count(), 16);
    }
}
