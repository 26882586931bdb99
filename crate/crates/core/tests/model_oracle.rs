//! Network forward passes against loop-level reference implementations, and
//! parameter gradients against central differences.

use std::collections::BTreeMap;

use fgr_core::autodiff::Tape;
use fgr_core::losses::LossConfig;
use fgr_core::model::{Arch, Model, ModelParams, Trainable};
use fgr_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn input(model: &Model, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.batch_shape(batch);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn p<'a>(params: &'a ModelParams, name: &str) -> &'a [f64] {
    params.tensor(name).unwrap().data()
}

/// `out[o] = b[o] + Σ_i w[o,i] x[i]`.
fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter().enumerate().map(|(o, bo)| bo + (0..d).map(|i| w[o * d + i] * x[i]).sum::<f64>()).collect()
}

/// Zero-padded 3×3 convolution of one `[C,H,W]` image.
fn conv(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let o_ch = bias.len();
    let mut out = vec![0.0; o_ch * h * w];
    for o in 0..o_ch {
        for y in 0..h {
            for xx in 0..w {
                let mut s = bias[o];
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += weight[((o * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ci in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x[(ci * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

fn reference_logits(model: &Model, params: &ModelParams, batch: &Tensor) -> Vec<f64> {
    let n = batch.shape()[0];
    let per = batch.len() / n;
    let mut out = Vec::new();
    for i in 0..n {
        let x = &batch.data()[i * per..(i + 1) * per];
        let features = match model.arch {
            Arch::Mlp => {
                let h = relu(dense(x, p(params, "fc1.weight"), p(params, "fc1.bias")));
                relu(dense(&h, p(params, "fc2.weight"), p(params, "fc2.bias")))
            }
            Arch::Tinyconv => {
                let (c, h, w) = (model.channels, model.height, model.width);
                let a = pool(&relu(conv(x, c, h, w, p(params, "conv1.weight"), p(params, "conv1.bias"))), 16, h, w);
                let (h, w) = (h / 2, w / 2);
                pool(&relu(conv(&a, 16, h, w, p(params, "conv2.weight"), p(params, "conv2.bias"))), 32, h, w)
            }
        };
        out.extend(dense(&features, p(params, "head.weight"), p(params, "head.bias")));
    }
    out
}

#[test]
fn forward_matches_reference_loops() {
    for (arch, side, classes) in [(Arch::Tinyconv, 8, 3), (Arch::Tinyconv, 16, 5), (Arch::Mlp, 8, 4)] {
        let model = Model::new(arch, 3, side, side, classes).unwrap();
        let mut params = model.init(11);
        // Nonzero biases so they are exercised too.
        let names: Vec<String> = params.names().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for name in names.iter().filter(|n| n.ends_with(".bias")) {
            let t = &mut params.get_mut(name).unwrap().value;
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        let batch = input(&model, 3, 9);
        let got = model.logits(&params, batch.clone()).unwrap();
        let want = reference_logits(&model, &params, &batch);
        assert_eq!(got.shape(), &[3, classes]);
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{arch:?}: max diff {diff:e}");
    }
}

fn batch_loss(model: &Model, params: &ModelParams, batch: &Tensor, labels: &[usize]) -> f64 {
    let logits = model.logits(params, batch.clone()).unwrap();
    let probs = fgr_core::tensor::softmax_rows(&logits);
    LossConfig::Ce.value(&probs, labels).unwrap()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for arch in [Arch::Tinyconv, Arch::Mlp] {
        let model = Model::new(arch, 3, 8, 8, 3).unwrap();
        let params = model.init(2);
        let batch = input(&model, 4, 5);
        let labels = [0, 2, 1, 2];

        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &params, batch.clone(), Trainable::All).unwrap();
        let probs = tape.softmax(fwd.logits).unwrap();
        let loss = LossConfig::Ce.record(&mut tape, probs, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: BTreeMap<String, Tensor> =
            fwd.params.iter().map(|(name, &v)| (name.clone(), grads.get(v).unwrap().clone())).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-6;
        for (name, g) in &analytic {
            for _ in 0..6 {
                let i = rng.random_range(0..g.len());
                let shifted = |delta: f64| {
                    let mut q = params.clone();
                    q.get_mut(name).unwrap().value.data_mut()[i] += delta;
                    batch_loss(&model, &q, &batch, &labels)
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                let a = g.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{arch:?} {name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
}
