//! Gradient rectification between the main objective and the calibration
//! objective.
//!
//! When the two whole-model gradients disagree (negative inner product) the
//! main gradient is projected onto the hyperplane orthogonal to the
//! calibration gradient, so to first order the update cannot increase the
//! calibration loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::optim::Grads;
use crate::tensor::Tensor;

/// Squared calibration-gradient norm below which no projection happens.
pub const DEGENERATE_NORM_SQ: f64 = 1e-24;

/// Flattened gradient over a fixed, name-sorted parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub flat: Vec<f64>,
    layout: Vec<(String, Vec<usize>)>,
}

impl GradientVector {
    pub fn from_flat(flat: Vec<f64>) -> Self {
        let layout = vec![(String::new(), vec![flat.len()])];
        Self { flat, layout }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.flat, &self.flat).sqrt()
    }

    /// Parameter names in layout order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.iter().map(|(n, _)| n.as_str())
    }
}

/// Concatenates the gradients of `names` (sorted) into one vector.
pub fn flatten(grads: &Grads, names: &[String]) -> Result<GradientVector> {
    let mut sorted: Vec<&String> = names.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut flat = Vec::new();
    let mut layout = Vec::with_capacity(sorted.len());
    for name in sorted {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for trainable parameter `{name}`")))?;
        flat.extend_from_slice(g.data());
        layout.push((name.clone(), g.shape().to_vec()));
    }
    Ok(GradientVector { flat, layout })
}

/// Splits a flat vector back into per-parameter tensors.
pub fn unflatten(vector: &GradientVector) -> Result<Grads> {
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for (name, shape) in &vector.layout {
        let n: usize = shape.iter().product();
        let chunk = vector
            .flat
            .get(offset..offset + n)
            .ok_or_else(|| Error::Shape("flat gradient shorter than its layout".into()))?;
        out.insert(name.clone(), Tensor::new(shape.clone(), chunk.to_vec())?);
        offset += n;
    }
    if offset != vector.flat.len() {
        return Err(Error::Shape("flat gradient longer than its layout".into()));
    }
    Ok(out)
}

/// Sequential left-to-right inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rectified {
    pub gradient: GradientVector,
    pub conflicted: bool,
    /// `g_main · g_calib` before rectification.
    pub dot: f64,
}

/// Projects `main` off `calib` when their inner product is negative.
pub fn rectify(main: &GradientVector, calib: &GradientVector) -> Result<Rectified> {
    if main.len() != calib.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            main.len(),
            calib.len()
        )));
    }
    let d = dot(&main.flat, &calib.flat);
    let calib_sq = dot(&calib.flat, &calib.flat);
    if d >= 0.0 || calib_sq < DEGENERATE_NORM_SQ {
        return Ok(Rectified {
            gradient: main.clone(),
            conflicted: false,
            dot: d,
        });
    }
    let coef = d / calib_sq;
    let flat = main.flat.iter().zip(&calib.flat).map(|(m, c)| m - coef * c).collect();
    Ok(Rectified {
        gradient: GradientVector {
            flat,
            layout: main.layout.clone(),
        },
        conflicted: true,
        dot: d,
    })
}

/// Cosine similarity; 0 when either vector vanishes.
pub fn cosine(a: &GradientVector, b: &GradientVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(&a.flat, &b.flat) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// One recorded rectification step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub conflicted: bool,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictStats {
    pub fraction: f64,
    pub mean_cosine: f64,
    pub steps: usize,
}

pub fn conflict_stats(history: &[StepRecord]) -> Result<ConflictStats> {
    if history.is_empty() {
        return Err(Error::Empty("conflict history"));
    }
    let n = history.len() as f64;
    let conflicted = history.iter().filter(|r| r.conflicted).count() as f64;
    let mean_cosine = history.iter().map(|r| r.cosine).sum::<f64>() / n;
    Ok(ConflictStats {
        fraction: conflicted / n,
        mean_cosine: mean_cosine.clamp(-1.0, 1.0),
        steps: history.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> GradientVector {
        GradientVector::from_flat(x.to_vec())
    }

    #[test]
    fn orthogonal_passes_through() {
        let r = rectify(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        assert_eq!(r.gradient.flat, [1.0, 0.0]);
        assert!(!r.conflicted);
    }

    #[test]
    fn conflict_is_projected() {
        let r = rectify(&v(&[1.0, -1.0]), &v(&[0.0, 1.0])).unwrap();
        assert_eq!(r.gradient.flat, [1.0, 0.0]);
        assert!(r.conflicted);
        assert_eq!(r.dot, -1.0);
    }

    #[test]
    fn full_opposition_collapses() {
        let r = rectify(&v(&[0.5, -2.0, 3.0]), &v(&[-0.5, 2.0, -3.0])).unwrap();
        assert!(r.gradient.flat.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn vanishing_calibration_gradient_is_ignored() {
        let r = rectify(&v(&[1.0, 2.0]), &v(&[-1e-13, 0.0])).unwrap();
        assert!(!r.conflicted);
        assert_eq!(r.gradient.flat, [1.0, 2.0]);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(rectify(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn flatten_orders_by_name() {
        let grads: Grads = BTreeMap::from([
            ("b".to_string(), Tensor::new(vec![3], vec![3.0, 4.0, 5.0]).unwrap()),
            ("a".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()),
        ]);
        let flat = flatten(&grads, &["b".into(), "a".into()]).unwrap();
        assert_eq!(flat.flat, [1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(flat.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(unflatten(&flat).unwrap(), grads);

        let single: Grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2], vec![7.0, 8.0]).unwrap())]);
        assert_eq!(flatten(&single, &["w".into()]).unwrap().flat, [7.0, 8.0]);
        assert!(flatten(&single, &["missing".into()]).is_err());
    }

    #[test]
    fn conflict_stats_examples() {
        let aligned = vec![StepRecord { conflicted: false, cosine: 0.5 }; 4];
        assert_eq!(conflict_stats(&aligned).unwrap().fraction, 0.0);
        let opposed = vec![StepRecord { conflicted: true, cosine: -1.0 }; 3];
        let s = conflict_stats(&opposed).unwrap();
        assert_eq!((s.fraction, s.mean_cosine), (1.0, -1.0));
        let mut mixed = vec![StepRecord { conflicted: true, cosine: -0.2 }; 3];
        mixed.extend(vec![StepRecord { conflicted: false, cosine: 0.4 }; 5]);
        let s = conflict_stats(&mixed).unwrap();
        assert_eq!(s.fraction, 3.0 / 8.0);
        assert!(conflict_stats(&[]).is_err());
    }
}
