//! Ablations and one-parameter sweeps.

use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::dataset::Dataset;
use super::evaluate::{evaluate, Summary};
use super::train::{finetune_fgr_encoded, train_scratch, train_stage1, Encoded, RunResult, Trained};
use crate::data::Corruption;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub filtering: bool,
    pub rectify: bool,
    pub acc_id: f64,
    pub ece_id: f64,
    pub acc_shift: f64,
    pub ece_shift: f64,
    pub ece_id_ts: f64,
    pub ece_shift_ts: f64,
    /// Fraction of conflicted steps; empty for the baseline.
    pub conflict_fraction: Option<f64>,
}

impl AblationRow {
    fn new(variant: &str, filtering: bool, rectify: bool, s: Summary, run: Option<&RunResult>) -> Self {
        Self {
            variant: variant.to_string(),
            filtering,
            rectify,
            acc_id: s.acc_id,
            ece_id: s.ece_id,
            acc_shift: s.acc_shift,
            ece_shift: s.ece_shift,
            ece_id_ts: s.ece_id_ts,
            ece_shift_ts: s.ece_shift_ts,
            conflict_fraction: run.and_then(|r| r.conflict.map(|c| c.fraction)),
        }
    }
}

/// Shares one stage-1 model between FGR variants in two-stage mode.
struct Shared {
    base: Trained,
    encoded: Encoded,
}

impl Shared {
    fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        let base = train_stage1(cfg, data)?;
        let encoded = Encoded::features(&base.model, &base.params, &data.train)?;
        Ok(Self { base, encoded })
    }

    fn run(&self, cfg: &TrainConfig, data: &Dataset) -> Result<RunResult> {
        match cfg.mode {
            Mode::TwoStage => finetune_fgr_encoded(cfg, &self.base.model, &self.base.params, data, &self.encoded),
            Mode::Scratch { .. } => train_scratch(cfg, data),
        }
    }
}

fn summarize(run: &RunResult, cfg: &TrainConfig, data: &Dataset, grid: &[Corruption]) -> Result<Summary> {
    evaluate(&run.model, &run.params, data, grid, cfg.eval_bins, cfg.seed)?.summary()
}

/// The cross-entropy baseline and the three FGR variants
/// {filter-only, rectify-only, both}, with shared seeds.
pub fn run_ablation(cfg: &TrainConfig, data: &Dataset, grid: &[Corruption]) -> Result<Vec<AblationRow>> {
    cfg.validate_fgr()?;
    let shared = Shared::new(cfg, data)?;
    let base = &shared.base;
    let baseline = evaluate(&base.model, &base.params, data, grid, cfg.eval_bins, cfg.seed)?.summary()?;
    let mut rows = vec![AblationRow::new("baseline", false, false, baseline, None)];
    for (variant, filtering, rectify) in [("filter-only", true, false), ("rectify-only", false, true), ("both", true, true)] {
        let variant_cfg = TrainConfig {
            filtering,
            rectify,
            ..cfg.clone()
        };
        let run = shared.run(&variant_cfg, data)?;
        let s = summarize(&run, &variant_cfg, data, grid)?;
        rows.push(AblationRow::new(variant, filtering, rectify, s, Some(&run)));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    Rho,
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "rho" => Ok(SweepParam::Rho),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::InvalidArgument(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Rho => "rho",
            SweepParam::Lambda => "lambda",
        }
    }

    /// `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut out = cfg.clone();
        match self {
            SweepParam::Gamma => {
                out.loss_main = match cfg.loss_main {
                    LossConfig::Focal { .. } => LossConfig::Focal { gamma: value },
                    _ => LossConfig::DualFocal { gamma: value },
                }
            }
            SweepParam::Rho => out.rho = value,
            SweepParam::Lambda => {
                if value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("lambda {value} is not an integer")));
                }
                out.lambda_set = vec![value as u32];
            }
        }
        out.validate_fgr()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub acc_id: f64,
    pub ece_id: f64,
    pub acc_shift: f64,
    pub ece_shift: f64,
    pub ece_id_ts: f64,
    pub ece_shift_ts: f64,
    pub conflict_fraction: Option<f64>,
}

/// One full FGR run per value, all sharing the seed (and, in two-stage
/// mode, the stage-1 model).
pub fn sweep(cfg: &TrainConfig, data: &Dataset, param: SweepParam, values: &[f64], grid: &[Corruption]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let configs: Vec<TrainConfig> = values.iter().map(|&v| param.apply(cfg, v)).collect::<Result<_>>()?;
    let shared = Shared::new(cfg, data)?;
    configs
        .iter()
        .zip(values)
        .map(|(c, &value)| {
            let run = shared.run(c, data)?;
            let s = summarize(&run, c, data, grid)?;
            Ok(SweepRow {
                param: param.name().to_string(),
                value,
                acc_id: s.acc_id,
                ece_id: s.ece_id,
                acc_shift: s.acc_shift,
                ece_shift: s.ece_shift,
                ece_id_ts: s.ece_id_ts,
                ece_shift_ts: s.ece_shift_ts,
                conflict_fraction: run.conflict.map(|c| c.fraction),
            })
        })
        .collect()
}
