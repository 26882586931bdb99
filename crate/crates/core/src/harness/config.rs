use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::Arch;

/// Whether FGR fine-tunes a pretrained head or trains the whole network from
/// scratch with filtering and rectification switched on part-way through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mode {
    TwoStage,
    /// `filter_start_epoch` defaults to 60% of `epochs`.
    Scratch {
        #[serde(default)]
        filter_start_epoch: Option<usize>,
    },
}

/// Cross-entropy pretraining schedule used before two-stage fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Defaults to 45% and 75% of `epochs`.
    pub lr_milestones: Option<Vec<usize>>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 0.003,
            weight_decay: 5e-4,
            lr_milestones: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: Arch,
    pub loss_main: LossConfig,
    pub loss_calib: LossConfig,
    pub rho: f64,
    pub lambda_set: Vec<u32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Defaults to 45% and 75% of `epochs`.
    pub lr_milestones: Option<Vec<usize>>,
    pub mode: Mode,
    pub stage1: Stage1Config,
    pub seed: u64,
    pub eval_bins: usize,
    /// Ablation switch: low-pass filter a ρ share of each epoch.
    pub filtering: bool,
    /// Ablation switch: project g_main off g_calib on conflict.
    pub rectify: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: Arch::Tinyconv,
            loss_main: LossConfig::DualFocal { gamma: 5.0 },
            loss_calib: LossConfig::soft_ece_default(),
            rho: 0.05,
            lambda_set: vec![15, 18, 25],
            epochs: 100,
            batch_size: 64,
            lr: 0.0005,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: None,
            mode: Mode::TwoStage,
            stage1: Stage1Config::default(),
            seed: 1,
            eval_bins: 15,
            filtering: true,
            rectify: true,
        }
    }
}

/// Milestones at 45% and 75% of the run unless given explicitly.
pub fn milestones(explicit: Option<&[usize]>, epochs: usize) -> Vec<usize> {
    match explicit {
        Some(m) => m.to_vec(),
        None => vec![
            (0.45 * epochs as f64).round() as usize,
            (0.75 * epochs as f64).round() as usize,
        ],
    }
}

/// Learning rate after ×0.1 decay at every milestone already reached.
pub fn lr_at(base: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base * 0.1f64.powi(passed as i32)
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_main.validate()?;
        self.loss_calib.validate()?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1)", self.rho)));
        }
        if self.lambda_set.is_empty() || self.lambda_set.iter().any(|l| !(1..=100).contains(l)) {
            return Err(Error::Config("lambda_set must be a nonempty subset of 1..=100".into()));
        }
        if self.batch_size == 0 || self.stage1.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.stage1.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.stage1.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1) and weight decay non-negative".into()));
        }
        if self.eval_bins == 0 {
            return Err(Error::Config("eval_bins must be at least 1".into()));
        }
        if let Mode::Scratch { .. } = self.mode {
            if self.filter_start_epoch() >= self.epochs {
                return Err(Error::Config(format!(
                    "filter_start_epoch {} must be before epochs {}",
                    self.filter_start_epoch(),
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// FGR needs both a filtered share and a remaining original share.
    pub fn validate_fgr(&self) -> Result<()> {
        self.validate()?;
        if self.filtering && !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("FGR needs 0 < rho < 1, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn filter_start_epoch(&self) -> usize {
        match self.mode {
            Mode::TwoStage => 0,
            Mode::Scratch { filter_start_epoch } => {
                filter_start_epoch.unwrap_or((0.6 * self.epochs as f64).round() as usize)
            }
        }
    }

    pub fn milestones(&self) -> Vec<usize> {
        milestones(self.lr_milestones.as_deref(), self.epochs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn partial_json_overrides() {
        let cfg = TrainConfig::from_json(
            r#"{"model":"mlp","loss_main":{"kind":"focal","gamma":3.0},"mode":{"kind":"scratch"},"epochs":10}"#,
        )
        .unwrap();
        assert_eq!(cfg.model, Arch::Mlp);
        assert_eq!(cfg.loss_main, LossConfig::Focal { gamma: 3.0 });
        assert_eq!(cfg.filter_start_epoch(), 6);
        assert!(TrainConfig::from_json(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn invalid_configs_error() {
        assert!(TrainConfig::from_json(r#"{"rho":1.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size":0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"mode":{"kind":"scratch","filter_start_epoch":30},"epochs":30}"#).is_err());
        let cfg = TrainConfig { rho: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_fgr().is_err());
    }

    #[test]
    fn milestone_schedule() {
        let m = milestones(None, 20);
        assert_eq!(m, [9, 15]);
        assert_eq!(lr_at(1.0, &m, 8), 1.0);
        assert!((lr_at(1.0, &m, 9) - 0.1).abs() < 1e-15);
        assert!((lr_at(1.0, &m, 19) - 0.01).abs() < 1e-15);
    }
}
