//! Channel softmax and the class-weighted cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Real, Tensor};

/// Per-class loss weights (background, liver, lesion).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub const DEFAULT: [f64; 3] = [0.2, 1.2, 2.2];

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("class weights must be finite and > 0, got {weights:?}")));
        }
        Ok(ClassWeights(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First `classes` weights; the 2-class liver model uses (background, liver).
    pub fn for_classes(&self, classes: usize) -> Result<Self> {
        if classes > self.0.len() {
            return Err(Error::Config(format!(
                "{} class weights given for a {classes}-class model",
                self.0.len()
            )));
        }
        Ok(ClassWeights(self.0[..classes].to_vec()))
    }
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights(Self::DEFAULT.to_vec())
    }
}

/// Softmax over the channel axis, per pixel, with max subtraction.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let d = logits.dims();
    let plane = d.plane();
    let mut out = Tensor::zeros(d);
    let mut buf = vec![T::zero(); d.c];
    for n in 0..d.n {
        let base = n * d.item();
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for c in 0..d.c {
                buf[c] = logits.data()[base + c * plane + p];
                max = max.max(buf[c]);
            }
            let mut sum = T::zero();
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for c in 0..d.c {
                out.data_mut()[base + c * plane + p] = buf[c] / sum;
            }
        }
    }
    out
}

/// `-(1/N) sum_i w[y_i] ln P_i[y_i]` and its gradient with respect to the
/// logits that produced `probs`, `w[y_i] (P_i - onehot(y_i)) / N`.
pub fn weighted_ce_loss<T: Real>(probs: &Tensor<T>, labels: &LabelMap, weights: &ClassWeights) -> Result<(f64, Tensor<T>)> {
    let d = probs.dims();
    if (labels.n, labels.h, labels.w) != (d.n, d.h, d.w) {
        return Err(Error::shape(
            "weighted_ce_loss labels",
            format!("({}, {}, {})", d.n, d.h, d.w),
            format!("({}, {}, {})", labels.n, labels.h, labels.w),
        ));
    }
    if weights.len() < d.c {
        return Err(Error::Config(format!("{} class weights for {} classes", weights.len(), d.c)));
    }
    let plane = d.plane();
    let count = d.n * plane;
    let inv_n = 1.0 / count as f64;
    let tiny = T::min_positive_value();
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    for n in 0..d.n {
        for p in 0..plane {
            let idx = n * plane + p;
            let y = labels.data[idx] as usize;
            if y >= d.c {
                return Err(Error::Data(format!("label {y} at voxel index {idx} is outside 0..{}", d.c - 1)));
            }
            let w = weights.as_slice()[y];
            let at = n * d.item() + y * plane + p;
            loss -= w * probs.data()[at].max(tiny).to_f64().unwrap().ln();
            let scale = T::from_f64_lossy(w * inv_n);
            for c in 0..d.c {
                let o = n * d.item() + c * plane + p;
                let delta = if c == y { T::one() } else { T::zero() };
                grad.data_mut()[o] = scale * (probs.data()[o] - delta);
            }
        }
    }
    Ok((loss * inv_n, grad))
}
