//! The two fixed architectures and their named parameter sets.
//!
//! `head` is always the final dense layer; everything else is backbone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// D → 64 → 64 → K with ReLU.
    Mlp,
    /// conv3×3×16 → ReLU → pool → conv3×3×32 → ReLU → pool → dense K.
    Tinyconv,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "tinyconv" => Ok(Arch::Tinyconv),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: Group,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    params: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Names whose group is in `trainable`.
    pub fn trainable_names(&self, trainable: Trainable) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| trainable.includes(p.group))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
}

impl Trainable {
    pub fn includes(self, group: Group) -> bool {
        matches!((self, group), (Trainable::All, _) | (Trainable::HeadOnly, Group::Head))
    }
}

/// Network description: architecture plus input geometry and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Arch,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

const HIDDEN: usize = 64;
const CONV1: usize = 16;
const CONV2: usize = 32;

/// Output of a taped forward pass.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Tape handle of every parameter that was recorded as trainable.
    pub params: BTreeMap<String, Var>,
}

impl Model {
    pub fn new(arch: Arch, channels: usize, height: usize, width: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        if arch == Arch::Tinyconv && (height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0) {
            return Err(Error::InvalidArgument(format!(
                "tinyconv needs height and width divisible by 4, got {height}x{width}"
            )));
        }
        Ok(Self {
            arch,
            channels,
            height,
            width,
            classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Width of the representation fed to the head.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Arch::Mlp => HIDDEN,
            Arch::Tinyconv => CONV2 * (self.height / 4) * (self.width / 4),
        }
    }

    /// Expected batch shape for `batch` samples.
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        match self.arch {
            Arch::Mlp => vec![batch, self.input_dim()],
            Arch::Tinyconv => vec![batch, self.channels, self.height, self.width],
        }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, Group, usize)> {
        let k = self.classes;
        match self.arch {
            Arch::Mlp => {
                let d = self.input_dim();
                vec![
                    ("fc1.weight", vec![HIDDEN, d], Group::Backbone, d),
                    ("fc1.bias", vec![HIDDEN], Group::Backbone, d),
                    ("fc2.weight", vec![HIDDEN, HIDDEN], Group::Backbone, HIDDEN),
                    ("fc2.bias", vec![HIDDEN], Group::Backbone, HIDDEN),
                    ("head.weight", vec![k, HIDDEN], Group::Head, HIDDEN),
                    ("head.bias", vec![k], Group::Head, HIDDEN),
                ]
            }
            Arch::Tinyconv => {
                let c = self.channels;
                let f = self.feature_dim();
                vec![
                    ("conv1.weight", vec![CONV1, c, 3, 3], Group::Backbone, c * 9),
                    ("conv1.bias", vec![CONV1], Group::Backbone, c * 9),
                    ("conv2.weight", vec![CONV2, CONV1, 3, 3], Group::Backbone, CONV1 * 9),
                    ("conv2.bias", vec![CONV2], Group::Backbone, CONV1 * 9),
                    ("head.weight", vec![k, f], Group::Head, f),
                    ("head.bias", vec![k], Group::Head, f),
                ]
            }
        }
    }

    /// He-uniform weights for ReLU layers, 1/√fan_in for the head, zero biases.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (name, shape, group, fan_in) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let bound = match group {
                    Group::Backbone => (6.0 / fan_in as f64).sqrt(),
                    Group::Head => 1.0 / (fan_in as f64).sqrt(),
                };
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params
                .insert(name, Tensor::new(shape, data).expect("shape product"), group)
                .expect("names are unique");
        }
        params
    }

    /// Verifies that `params` holds exactly this model's parameters.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expected = self.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, group, _) in expected {
            let p = params.get(name).ok_or_else(|| Error::Layer {
                layer: name.to_string(),
                message: "missing".into(),
            })?;
            if p.value.shape() != shape.as_slice() || p.group != group {
                return Err(Error::Layer {
                    layer: name.to_string(),
                    message: format!("expected {shape:?} ({group:?}), got {:?} ({:?})", p.value.shape(), p.group),
                });
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let b = batch.shape().first().copied().unwrap_or(0);
        if batch.shape() != self.batch_shape(b).as_slice() {
            return Err(Error::Layer {
                layer: "input".into(),
                message: format!("expected {:?}, got {:?}", self.batch_shape(b), batch.shape()),
            });
        }
        Ok(())
    }

    fn record(
        tape: &mut Tape,
        params: &ModelParams,
        name: &str,
        trainable: Trainable,
        recorded: &mut BTreeMap<String, Var>,
    ) -> Result<Var> {
        let p = params.get(name).ok_or_else(|| Error::Layer {
            layer: name.into(),
            message: "missing parameter".into(),
        })?;
        if trainable.includes(p.group) {
            let v = tape.param(p.value.clone());
            recorded.insert(name.to_string(), v);
            Ok(v)
        } else {
            Ok(tape.constant(p.value.clone()))
        }
    }

    /// Records the backbone on `tape` and returns the `[B, feature_dim]` representation.
    pub fn backbone(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        batch: Tensor,
        trainable: Trainable,
        recorded: &mut BTreeMap<String, Var>,
    ) -> Result<Var> {
        self.check_batch(&batch)?;
        let mut p = |tape: &mut Tape, name: &str| Self::record(tape, params, name, trainable, recorded);
        let x = tape.constant(batch);
        match self.arch {
            Arch::Mlp => {
                let (w1, b1) = (p(tape, "fc1.weight")?, p(tape, "fc1.bias")?);
                let h = tape.dense("fc1", x, w1, b1)?;
                let h = tape.relu(h);
                let (w2, b2) = (p(tape, "fc2.weight")?, p(tape, "fc2.bias")?);
                let h = tape.dense("fc2", h, w2, b2)?;
                Ok(tape.relu(h))
            }
            Arch::Tinyconv => {
                let (w1, b1) = (p(tape, "conv1.weight")?, p(tape, "conv1.bias")?);
                let h = tape.conv3x3("conv1", x, w1, b1)?;
                let h = tape.relu(h);
                let h = tape.maxpool2("pool1", h)?;
                let (w2, b2) = (p(tape, "conv2.weight")?, p(tape, "conv2.bias")?);
                let h = tape.conv3x3("conv2", h, w2, b2)?;
                let h = tape.relu(h);
                let h = tape.maxpool2("pool2", h)?;
                tape.flatten(h)
            }
        }
    }

    /// Records the head on top of `features`.
    pub fn head(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        features: Var,
        trainable: Trainable,
        recorded: &mut BTreeMap<String, Var>,
    ) -> Result<Var> {
        let w = Self::record(tape, params, "head.weight", trainable, recorded)?;
        let b = Self::record(tape, params, "head.bias", trainable, recorded)?;
        tape.dense("head", features, w, b)
    }

    /// Full forward pass recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, batch: Tensor, trainable: Trainable) -> Result<Forward> {
        let mut recorded = BTreeMap::new();
        let features = self.backbone(tape, params, batch, trainable, &mut recorded)?;
        let logits = self.head(tape, params, features, trainable, &mut recorded)?;
        Ok(Forward {
            logits,
            params: recorded,
        })
    }

    /// Logits without keeping a tape around.
    pub fn logits(&self, params: &ModelParams, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, batch, Trainable::HeadOnly)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Backbone representation without keeping a tape around.
    pub fn features(&self, params: &ModelParams, batch: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut recorded = BTreeMap::new();
        let f = self.backbone(&mut tape, params, batch, Trainable::HeadOnly, &mut recorded)?;
        Ok(tape.value(f).clone())
    }

    /// Head logits for precomputed features.
    pub fn head_logits(&self, params: &ModelParams, features: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut recorded = BTreeMap::new();
        let f = tape.constant(features);
        let out = self.head(&mut tape, params, f, Trainable::HeadOnly, &mut recorded)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_sorted_and_grouped() {
        let m = Model::new(Arch::Tinyconv, 3, 8, 8, 3).unwrap();
        let p = m.init(1);
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(
            names,
            ["conv1.bias", "conv1.weight", "conv2.bias", "conv2.weight", "head.bias", "head.weight"]
        );
        assert_eq!(p.trainable_names(Trainable::HeadOnly), ["head.bias", "head.weight"]);
        m.check_params(&p).unwrap();
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let m = Model::new(Arch::Mlp, 1, 1, 4, 3).unwrap();
        let mut p = m.init(0);
        for (_, param) in p.iter_mut() {
            param.value.data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let logits = m.logits(&p, x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let probs = crate::tensor::softmax_rows(&logits);
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap());
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.param(eye);
        let b = tape.param(Tensor::zeros(&[3]));
        let y = tape.dense("head", x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn wrong_batch_shape_names_input() {
        let m = Model::new(Arch::Tinyconv, 3, 8, 8, 3).unwrap();
        let p = m.init(0);
        let err = m.logits(&p, Tensor::zeros(&[2, 3, 8, 4])).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }

    #[test]
    fn rejects_single_class() {
        assert!(Model::new(Arch::Mlp, 1, 1, 4, 1).is_err());
    }
}
