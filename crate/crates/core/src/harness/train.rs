//! Stage-1 cross-entropy training and FGR fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, milestones, Mode, TrainConfig};
use super::dataset::Dataset;
use crate::autodiff::Tape;
use crate::data::{build_hybrid, derive_seed, images_to_tensor, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Group, Model, ModelParams, Trainable};
use crate::optim::{Grads, OptimizerKind, OptimizerState};
use crate::rectify::{conflict_stats, cosine, dot, flatten, rectify, unflatten, ConflictStats, StepRecord};
use crate::tensor::Tensor;

// Seed streams, so that every random choice has its own generator.
const STREAM_INIT: u64 = 1;
const STREAM_STAGE1: u64 = 2;
const STREAM_MIX: u64 = 3;
const STREAM_ORIG: u64 = 4;
const STREAM_FGR_FILTER: u64 = 5;

const ENCODE_CHUNK: usize = 64;

/// Relative tolerance of the live non-degradation check.
pub const NON_DEGRADATION_TOL: f64 = 1e-9;

/// One stage-1 (or warm-up) epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// One FGR optimizer step, as written to `training_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub conflicted: bool,
    pub cosine: f64,
    pub loss_main: f64,
    pub loss_calib: f64,
    /// `g_final·g_calib / (‖g_main‖·‖g_calib‖)`; 0 when either norm vanishes.
    pub alignment: f64,
    /// The update would raise the calibration loss to first order.
    pub violation: bool,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub params: ModelParams,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub params: ModelParams,
    /// Cross-entropy epochs preceding FGR (scratch-mode warm-up).
    pub warmup: Vec<EpochSummary>,
    pub log: Vec<StepLog>,
    pub conflict: Option<ConflictStats>,
    pub violations: usize,
}

pub fn model_for(cfg: &TrainConfig, data: &Dataset) -> Result<Model> {
    Model::new(cfg.model, 3, data.side, data.side, data.classes)
}

fn labels(items: &[LabeledImage]) -> Vec<usize> {
    items.iter().map(|x| x.label).collect()
}

/// Normalized image tensor for `items`, shaped as `model`'s input.
pub fn encode_images(model: &Model, items: &[LabeledImage]) -> Result<Tensor> {
    let refs: Vec<_> = items.iter().map(|x| &x.image).collect();
    images_to_tensor(&refs)?.reshape(&model.batch_shape(items.len()))
}

/// Backbone features for `items`, computed in chunks.
pub fn encode_features(model: &Model, params: &ModelParams, items: &[LabeledImage]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Empty("images to encode"));
    }
    let mut data = Vec::with_capacity(items.len() * model.feature_dim());
    for chunk in items.chunks(ENCODE_CHUNK) {
        data.extend(model.features(params, encode_images(model, chunk)?)?.into_data());
    }
    Tensor::new(vec![items.len(), model.feature_dim()], data)
}

/// Network inputs for training: raw images, or frozen-backbone features.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub features: bool,
}

impl Encoded {
    pub fn images(model: &Model, items: &[LabeledImage]) -> Result<Self> {
        Ok(Self {
            inputs: encode_images(model, items)?,
            labels: labels(items),
            features: false,
        })
    }

    pub fn features(model: &Model, params: &ModelParams, items: &[LabeledImage]) -> Result<Self> {
        Ok(Self {
            inputs: encode_features(model, params, items)?,
            labels: labels(items),
            features: true,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn encode(&self, model: &Model, params: &ModelParams, items: &[LabeledImage]) -> Result<Tensor> {
        if self.features {
            encode_features(model, params, items)
        } else {
            encode_images(model, items)
        }
    }
}

/// Loss value and per-parameter gradients on one batch.
pub fn batch_grads(
    model: &Model,
    params: &ModelParams,
    inputs: Tensor,
    labels: &[usize],
    loss: &LossConfig,
    trainable: Trainable,
    features: bool,
) -> Result<(f64, Grads, Tensor)> {
    let mut tape = Tape::new();
    let (logits, recorded) = if features {
        let mut recorded = BTreeMap::new();
        let x = tape.constant(inputs);
        let logits = model.head(&mut tape, params, x, trainable, &mut recorded)?;
        (logits, recorded)
    } else {
        let f = model.forward(&mut tape, params, inputs, trainable)?;
        (f.logits, f.params)
    };
    let probs = tape.softmax(logits)?;
    let objective = loss.record(&mut tape, probs, labels)?;
    let value = tape.value(objective).item()?;
    let mut grads = tape.backward(objective)?;
    let mut out = Grads::new();
    for (name, var) in recorded {
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(params.tensor(&name).map(|t| t.shape()).unwrap_or(&[0])));
        out.insert(name, g);
    }
    Ok((value, out, tape.value(logits).clone()))
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

fn check_finite(value: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            message: format!("{what} is {value}; last good parameters are from epoch {epoch} start"),
        })
    }
}

/// Plain mini-batch SGD on a single loss.
#[allow(clippy::too_many_arguments)]
fn train_plain(
    model: &Model,
    params: &mut ModelParams,
    data: &Encoded,
    loss: &LossConfig,
    epochs: std::ops::Range<usize>,
    schedule: (f64, &[usize]),
    opt: &mut OptimizerState,
    batch_size: usize,
    trainable: Trainable,
    seed: u64,
) -> Result<Vec<EpochSummary>> {
    let mut log = Vec::new();
    for epoch in epochs {
        opt.lr = lr_at(schedule.0, schedule.1, epoch);
        let order = shuffled(data.len(), derive_seed(seed, &[STREAM_STAGE1, epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (value, grads, logits) =
                batch_grads(model, params, data.inputs.select_rows(idx), &y, loss, trainable, data.features)?;
            check_finite(value, epoch, step, "training loss")?;
            opt.step(params, &grads, trainable)?;
            loss_sum += value * idx.len() as f64;
            correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        log.push(EpochSummary {
            epoch,
            lr: opt.lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(log)
}

/// Full-network cross-entropy training with SGD momentum and milestone decay.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    let model = model_for(cfg, data)?;
    let mut params = model.init(derive_seed(cfg.seed, &[STREAM_INIT]));
    let s1 = &cfg.stage1;
    if s1.epochs == 0 {
        return Ok(Trained {
            model,
            params,
            epochs: Vec::new(),
        });
    }
    let encoded = Encoded::images(&model, &data.train)?;
    let ms = milestones(s1.lr_milestones.as_deref(), s1.epochs);
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum), s1.lr, s1.weight_decay);
    let epochs = train_plain(
        &model,
        &mut params,
        &encoded,
        &LossConfig::Ce,
        0..s1.epochs,
        (s1.lr, &ms),
        &mut opt,
        s1.batch_size,
        Trainable::All,
        cfg.seed,
    )?;
    Ok(Trained { model, params, epochs })
}

/// Shuffled indices that reshuffle each time they run out.
struct Cycling {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycling {
    fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn backbone_snapshot(params: &ModelParams) -> Vec<(String, Tensor)> {
    params
        .iter()
        .filter(|(_, p)| p.group == Group::Backbone)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect()
}

/// Two-stage FGR: freezes the backbone of `params` and fine-tunes the head.
pub fn finetune_fgr(cfg: &TrainConfig, model: &Model, params: &ModelParams, data: &Dataset) -> Result<RunResult> {
    let encoded = Encoded::features(model, params, &data.train)?;
    finetune_fgr_encoded(cfg, model, params, data, &encoded)
}

/// [`finetune_fgr`] with the training set's features already computed.
pub fn finetune_fgr_encoded(
    cfg: &TrainConfig,
    model: &Model,
    params: &ModelParams,
    data: &Dataset,
    encoded: &Encoded,
) -> Result<RunResult> {
    cfg.validate_fgr()?;
    model.check_params(params)?;
    let before = backbone_snapshot(params);
    let mut params = params.clone();
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum), cfg.lr, cfg.weight_decay);
    let log = fgr_epochs(cfg, model, &mut params, data, encoded, 0..cfg.epochs, &mut opt, Trainable::HeadOnly)?;
    if backbone_snapshot(&params) != before {
        return Err(Error::InvalidArgument("backbone changed during head-only fine-tuning".into()));
    }
    finish(model, params, Vec::new(), log)
}

/// Scratch mode: trains every parameter with `loss_main` on original data,
/// then switches filtering and rectification on at `filter_start_epoch`.
pub fn train_scratch(cfg: &TrainConfig, data: &Dataset) -> Result<RunResult> {
    cfg.validate_fgr()?;
    let Mode::Scratch { .. } = cfg.mode else {
        return Err(Error::Config("train_scratch needs scratch mode".into()));
    };
    let model = model_for(cfg, data)?;
    let mut params = model.init(derive_seed(cfg.seed, &[STREAM_INIT]));
    let encoded = Encoded::images(&model, &data.train)?;
    let start = cfg.filter_start_epoch();
    let ms = cfg.milestones();
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum), cfg.lr, cfg.weight_decay);
    let warmup = train_plain(
        &model,
        &mut params,
        &encoded,
        &cfg.loss_main,
        0..start,
        (cfg.lr, &ms),
        &mut opt,
        cfg.batch_size,
        Trainable::All,
        cfg.seed,
    )?;
    let log = fgr_epochs(cfg, &model, &mut params, data, &encoded, start..cfg.epochs, &mut opt, Trainable::All)?;
    finish(&model, params, warmup, log)
}

fn finish(model: &Model, params: ModelParams, warmup: Vec<EpochSummary>, log: Vec<StepLog>) -> Result<RunResult> {
    let history: Vec<StepRecord> = log
        .iter()
        .map(|s| StepRecord {
            conflicted: s.conflicted,
            cosine: s.cosine,
        })
        .collect();
    let conflict = if history.is_empty() {
        None
    } else {
        Some(conflict_stats(&history)?)
    };
    let violations = log.iter().filter(|s| s.violation).count();
    Ok(RunResult {
        model: *model,
        params,
        warmup,
        log,
        conflict,
        violations,
    })
}

/// FGR training over `epochs`: filter, compute both gradients, rectify, step.
#[allow(clippy::too_many_arguments)]
fn fgr_epochs(
    cfg: &TrainConfig,
    model: &Model,
    params: &mut ModelParams,
    data: &Dataset,
    encoded: &Encoded,
    epochs: std::ops::Range<usize>,
    opt: &mut OptimizerState,
    trainable: Trainable,
) -> Result<Vec<StepLog>> {
    let n = encoded.len();
    let ms = cfg.milestones();
    let names = params.trainable_names(trainable);
    let mut log = Vec::new();
    let mut orig_iter: Option<Cycling> = None;
    for epoch in epochs {
        opt.lr = lr_at(cfg.lr, &ms, epoch);
        // Rebuild the hybrid partition; without filtering, D_mix = D_orig = all.
        let (mix, orig_pool) = if cfg.filtering {
            let hybrid = build_hybrid(n, cfg.rho, &cfg.lambda_set, epoch, derive_seed(cfg.seed, &[STREAM_FGR_FILTER]))?;
            let filtered: Vec<LabeledImage> = hybrid
                .filt_indices
                .iter()
                .map(|&i| hybrid.materialize(&data.train, i))
                .collect::<Result<_>>()?;
            let mut mix = encoded.inputs.clone();
            if !filtered.is_empty() {
                let enc = encoded.encode(model, params, &filtered)?;
                let stride: usize = mix.shape()[1..].iter().product();
                for (j, &i) in hybrid.filt_indices.iter().enumerate() {
                    mix.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(&enc.data()[j * stride..(j + 1) * stride]);
                }
            }
            (mix, hybrid.orig_indices)
        } else {
            (encoded.inputs.clone(), (0..n).collect())
        };
        // The iterator over D_orig keeps cycling across epochs while its pool is
        // unchanged; a new partition restarts it on the new pool.
        let restart = orig_iter.as_ref().is_none_or(|it| it.pool != orig_pool);
        if restart {
            orig_iter = Some(Cycling::new(
                orig_pool,
                derive_seed(cfg.seed, &[STREAM_ORIG, epoch as u64]),
            ));
        }
        let orig_iter = orig_iter.as_mut().expect("initialized above");
        if orig_iter.pool.is_empty() {
            return Err(Error::Config("D_orig is empty; g_calib cannot be computed".into()));
        }

        let order = shuffled(n, derive_seed(cfg.seed, &[STREAM_MIX, epoch as u64]));
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let y: Vec<usize> = idx.iter().map(|&i| encoded.labels[i]).collect();
            let (loss_main, g_main, _) =
                batch_grads(model, params, mix.select_rows(idx), &y, &cfg.loss_main, trainable, encoded.features)?;
            check_finite(loss_main, epoch, step, "main loss")?;
            let cidx = orig_iter.next_batch(cfg.batch_size);
            let cy: Vec<usize> = cidx.iter().map(|&i| encoded.labels[i]).collect();
            let (loss_calib, g_calib, _) = batch_grads(
                model,
                params,
                encoded.inputs.select_rows(&cidx),
                &cy,
                &cfg.loss_calib,
                trainable,
                encoded.features,
            )?;
            check_finite(loss_calib, epoch, step, "calibration loss")?;

            let g_main = flatten(&g_main, &names)?;
            let g_calib = flatten(&g_calib, &names)?;
            let (g_final, conflicted) = if cfg.rectify {
                let r = rectify(&g_main, &g_calib)?;
                (r.gradient, r.conflicted)
            } else {
                let conflicted = dot(&g_main.flat, &g_calib.flat) < 0.0;
                (g_main.clone(), conflicted)
            };
            let scale = g_main.norm() * g_calib.norm();
            let after = dot(&g_final.flat, &g_calib.flat);
            let alignment = if scale > 0.0 { after / scale } else { 0.0 };
            let violation = cfg.rectify && after < -NON_DEGRADATION_TOL * scale;
            log.push(StepLog {
                epoch,
                step,
                conflicted,
                cosine: cosine(&g_main, &g_calib),
                loss_main,
                loss_calib,
                alignment,
                violation,
            });
            opt.step(params, &unflatten(&g_final)?, trainable)?;
        }
    }
    Ok(log)
}

/// Stage 1 followed by FGR, or a scratch-mode run, depending on `cfg.mode`.
pub fn run_fgr(cfg: &TrainConfig, data: &Dataset) -> Result<RunResult> {
    match cfg.mode {
        Mode::TwoStage => {
            let base = train_stage1(cfg, data)?;
            finetune_fgr(cfg, &base.model, &base.params, data)
        }
        Mode::Scratch { .. } => train_scratch(cfg, data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::harness::config::Stage1Config;
    use crate::model::Arch;

    fn tiny_data() -> Dataset {
        Dataset::synthetic(&SynthConfig {
            n_train: 48,
            n_val: 12,
            n_test: 12,
            classes: 3,
            size: 8,
            texture_strength: 0.05,
            noise: 3.0,
            seed: 4,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: Arch::Mlp,
            epochs: 2,
            batch_size: 16,
            rho: 0.25,
            stage1: Stage1Config {
                epochs: 2,
                batch_size: 16,
                ..Stage1Config::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.stage1.epochs = 0;
        let t = train_stage1(&cfg, &data).unwrap();
        assert_eq!(t.params, t.model.init(derive_seed(cfg.seed, &[STREAM_INIT])));
    }

    #[test]
    fn stage1_is_deterministic() {
        let data = tiny_data();
        let a = train_stage1(&tiny_cfg(), &data).unwrap();
        let b = train_stage1(&tiny_cfg(), &data).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epochs.len(), 2);
    }

    #[test]
    fn fgr_logs_every_step_and_freezes_backbone() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let base = train_stage1(&cfg, &data).unwrap();
        let run = finetune_fgr(&cfg, &base.model, &base.params, &data).unwrap();
        assert_eq!(run.log.len(), 2 * 3);
        assert_eq!(run.violations, 0);
        let stats = run.conflict.unwrap();
        let recount = run.log.iter().filter(|s| s.conflicted).count() as f64 / run.log.len() as f64;
        assert_eq!(stats.fraction, recount);
        assert_eq!(backbone_snapshot(&run.params), backbone_snapshot(&base.params));
        assert_ne!(run.params, base.params);
    }

    #[test]
    fn fgr_rejects_degenerate_rho() {
        let data = tiny_data();
        let cfg = TrainConfig { rho: 0.0, ..tiny_cfg() };
        let base = train_stage1(&tiny_cfg(), &data).unwrap();
        assert!(matches!(
            finetune_fgr(&cfg, &base.model, &base.params, &data),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scratch_mode_warms_up_then_rectifies() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            mode: Mode::Scratch {
                filter_start_epoch: Some(1),
            },
            ..tiny_cfg()
        };
        let run = run_fgr(&cfg, &data).unwrap();
        assert_eq!(run.warmup.len(), 1);
        assert_eq!(run.log.len(), 2 * 3);
        assert!(run.log.iter().all(|s| s.epoch >= 1));
        assert_eq!(run.violations, 0);
    }

    #[test]
    fn cycling_iterator_covers_pool_before_repeating() {
        let mut it = Cycling::new(vec![3, 5, 7, 9], 1);
        let mut first: Vec<usize> = it.next_batch(4);
        first.sort();
        assert_eq!(first, [3, 5, 7, 9]);
        assert_eq!(it.next_batch(6).len(), 6);
    }
}
