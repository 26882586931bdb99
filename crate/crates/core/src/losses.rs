//! Training objectives over softmax probabilities.
//!
//! Every loss returns its value together with the gradient with respect to
//! the probability matrix, so it can sit on the tape as a single node.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Soft bins with total membership below this are skipped.
const EMPTY_BIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossConfig {
    Ce,
    LabelSmoothing { alpha: f64 },
    Focal { gamma: f64 },
    DualFocal { gamma: f64 },
    SoftEce { bins: usize, temperature: f64 },
}

impl LossConfig {
    pub fn soft_ece_default() -> Self {
        LossConfig::SoftEce {
            bins: 15,
            temperature: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossConfig::Ce => Ok(()),
            LossConfig::LabelSmoothing { alpha } if (0.0..1.0).contains(&alpha) => Ok(()),
            LossConfig::LabelSmoothing { alpha } => Err(Error::Config(format!("alpha {alpha} outside [0,1)"))),
            LossConfig::Focal { gamma } | LossConfig::DualFocal { gamma } if gamma >= 0.0 => Ok(()),
            LossConfig::Focal { gamma } | LossConfig::DualFocal { gamma } => {
                Err(Error::Config(format!("gamma {gamma} must be non-negative")))
            }
            LossConfig::SoftEce { bins, temperature } if bins >= 1 && temperature > 0.0 => Ok(()),
            LossConfig::SoftEce { bins, temperature } => Err(Error::Config(format!(
                "soft-ece needs bins >= 1 and temperature > 0, got {bins}, {temperature}"
            ))),
        }
    }

    /// Loss value and `∂loss/∂probs`.
    pub fn value_and_grad(&self, probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.validate()?;
        match *self {
            LossConfig::Ce => cross_entropy(probs, labels),
            LossConfig::LabelSmoothing { alpha } => label_smoothing_ce(probs, labels, alpha),
            LossConfig::Focal { gamma } => focal(probs, labels, gamma),
            LossConfig::DualFocal { gamma } => dual_focal(probs, labels, gamma),
            LossConfig::SoftEce { bins, temperature } => soft_ece(probs, labels, bins, temperature),
        }
    }

    pub fn value(&self, probs: &Tensor, labels: &[usize]) -> Result<f64> {
        self.value_and_grad(probs, labels).map(|(v, _)| v)
    }

    /// Records this loss on `tape` as a function of the probability node.
    pub fn record(&self, tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
        let (value, grad) = self.value_and_grad(tape.value(probs), labels)?;
        tape.objective(probs, value, grad)
    }
}

fn check(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.ndim() != 2 {
        return Err(Error::Shape(format!("probabilities must be [B,K], got {:?}", probs.shape())));
    }
    let (b, k) = (probs.rows(), probs.cols());
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok((b, k))
}

fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `d/dp ln(max(p, floor))`.
fn dln_floor(p: f64) -> f64 {
    if p > PROB_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

/// `γ·base^(γ-1)`, taking the limit 0 when `γ = 0`.
fn dpow(base: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * base.powf(gamma - 1.0)
    }
}

/// Mean of the per-sample terms `factor_i · (−ln p_true)`.
///
/// `modulate` returns the modulating factor and writes the gradient of the
/// modulating factor into the row. Every true-class loss routes through
/// here, which keeps γ = 0 variants bitwise equal to plain cross-entropy.
fn modulated_nll(
    probs: &Tensor,
    labels: &[usize],
    modulate: impl Fn(&[f64], usize, &mut [f64]) -> f64,
) -> Result<(f64, Tensor)> {
    let (b, k) = check(probs, labels)?;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    let mut dmod = vec![0.0; k];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        dmod.fill(0.0);
        let factor = modulate(row, y, &mut dmod);
        let nll = -ln_floor(row[y]);
        total += factor * nll;
        let gi = &mut g[i * k..(i + 1) * k];
        for (gk, dk) in gi.iter_mut().zip(&dmod) {
            *gk = dk * nll / b as f64;
        }
        gi[y] -= factor * dln_floor(row[y]) / b as f64;
    }
    Ok((total / b as f64, grad))
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    modulated_nll(probs, labels, |_, _, _| 1.0)
}

/// Cross-entropy against `(1−α)·onehot + α/K`.
pub fn label_smoothing_ce(probs: &Tensor, labels: &[usize], alpha: f64) -> Result<(f64, Tensor)> {
    if alpha == 0.0 {
        return cross_entropy(probs, labels);
    }
    let (b, k) = check(probs, labels)?;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        for (c, &p) in row.iter().enumerate() {
            let q = if c == y { 1.0 - alpha + alpha / k as f64 } else { alpha / k as f64 };
            total -= q * ln_floor(p);
            g[i * k + c] = -q * dln_floor(p) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Mean of `−(1 − p_true)^γ · ln p_true`.
pub fn focal(probs: &Tensor, labels: &[usize], gamma: f64) -> Result<(f64, Tensor)> {
    modulated_nll(probs, labels, |row, y, dmod| {
        let base = (1.0 - row[y]).max(0.0);
        dmod[y] = -dpow(base, gamma);
        base.powf(gamma)
    })
}

/// Index of the largest probability among the wrong classes.
pub fn top_wrong_class(row: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &p) in row.iter().enumerate() {
        if c != label && (best == usize::MAX || p > row[best]) {
            best = c;
        }
    }
    best
}

/// Mean of `−(1 − p_true + p_j)^γ · ln p_true`, `j` the top wrong class.
pub fn dual_focal(probs: &Tensor, labels: &[usize], gamma: f64) -> Result<(f64, Tensor)> {
    if probs.ndim() == 2 && probs.cols() < 2 {
        return Err(Error::InvalidArgument("dual focal loss needs K >= 2".into()));
    }
    modulated_nll(probs, labels, |row, y, dmod| {
        let j = top_wrong_class(row, y);
        let base = 1.0 - row[y] + row[j];
        let d = dpow(base, gamma);
        dmod[y] = -d;
        dmod[j] = d;
        base.powf(gamma)
    })
}

/// Centers `(2m − 1) / 2M` of `bins` equal-width bins on `[0, 1]`.
pub fn bin_centers(bins: usize) -> Vec<f64> {
    (1..=bins).map(|m| (2 * m - 1) as f64 / (2 * bins) as f64).collect()
}

/// Soft-binned calibration error with membership `softmax_m(−(p̂ − ξ_m)² / t)`.
///
/// Returns `(Σ_m |S_m|/N · (acc_m − conf_m)²)^½`. Correctness indicators are
/// constants; gradient flows through the confidences only.
pub fn soft_ece(probs: &Tensor, labels: &[usize], bins: usize, temperature: f64) -> Result<(f64, Tensor)> {
    let (n, k) = check(probs, labels)?;
    if bins == 0 || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "soft-ece needs bins >= 1 and t > 0, got {bins}, {temperature}"
        )));
    }
    let centers = bin_centers(bins);
    let mut conf = Vec::with_capacity(n);
    let mut top = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    let mut member = vec![0.0; n * bins];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let a = argmax(row);
        let c = row[a];
        top.push(a);
        conf.push(c);
        correct.push(if a == y { 1.0 } else { 0.0 });
        let w = &mut member[i * bins..(i + 1) * bins];
        for (wm, xi) in w.iter_mut().zip(&centers) {
            *wm = -(c - xi) * (c - xi) / temperature;
        }
        let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for wm in w.iter_mut() {
            *wm = (*wm - mx).exp();
            s += *wm;
        }
        for wm in w.iter_mut() {
            *wm /= s;
        }
    }

    let mut mass = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut confs = vec![0.0; bins];
    for i in 0..n {
        for m in 0..bins {
            let w = member[i * bins + m];
            mass[m] += w;
            hits[m] += w * correct[i];
            confs[m] += w * conf[i];
        }
    }

    let nf = n as f64;
    let mut energy = 0.0;
    // ∂E/∂mass, ∂E/∂hits, ∂E/∂confs per bin.
    let mut d_mass = vec![0.0; bins];
    let mut d_hits = vec![0.0; bins];
    let mut d_confs = vec![0.0; bins];
    for m in 0..bins {
        if mass[m] < EMPTY_BIN {
            continue;
        }
        let gap = hits[m] - confs[m];
        energy += gap * gap / (nf * mass[m]);
        d_mass[m] = -gap * gap / (nf * mass[m] * mass[m]);
        d_hits[m] = 2.0 * gap / (nf * mass[m]);
        d_confs[m] = -d_hits[m];
    }
    let value = energy.sqrt();

    let mut grad = Tensor::zeros(probs.shape());
    if value > 0.0 {
        let outer = 0.5 / value;
        let g = grad.data_mut();
        for i in 0..n {
            let w = &member[i * bins..(i + 1) * bins];
            let gw: Vec<f64> = (0..bins)
                .map(|m| d_mass[m] + correct[i] * d_hits[m] + conf[i] * d_confs[m])
                .collect();
            let mean_gw: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
            let mut d_conf = 0.0;
            for m in 0..bins {
                d_conf += w[m] * d_confs[m];
                let d_logit = w[m] * (gw[m] - mean_gw);
                d_conf += d_logit * (-2.0 * (conf[i] - centers[m]) / temperature);
            }
            g[i * k + top[i]] = outer * d_conf;
        }
    }
    Ok((value, grad))
}
