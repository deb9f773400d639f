use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{GrinError, Result};
use crate::tensor::Tensor;

/// Per-feature standardisation shared by all nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose spread was zero (or that had no observations); their
    /// std was clamped to 1.
    pub clamped: Vec<bool>,
}

impl Scaler {
    pub fn identity(n_features: usize) -> Self {
        Scaler {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
            clamped: vec![false; n_features],
        }
    }

    /// Mean and population std of the masked entries in steps `range`.
    pub fn fit(values: &Tensor, mask: &Tensor, range: Range<usize>) -> Result<Self> {
        if values.shape().len() != 3 || values.shape() != mask.shape() {
            return Err(GrinError::dim("scaler fit", values.shape(), mask.shape()));
        }
        let d = values.shape()[2];
        let block = values.shape()[1] * d;
        let mut count = vec![0u64; d];
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        let span = range.start * block..range.end * block;
        for (i, (&v, &m)) in values.data()[span.clone()].iter().zip(&mask.data()[span]).enumerate() {
            if m != 1.0 {
                continue;
            }
            let f = i % d;
            count[f] += 1;
            let delta = v - mean[f];
            mean[f] += delta / count[f] as f64;
            m2[f] += delta * (v - mean[f]);
        }
        let mut std = vec![1.0; d];
        let mut clamped = vec![false; d];
        for f in 0..d {
            let s = if count[f] > 0 { (m2[f] / count[f] as f64).sqrt() } else { 0.0 };
            if s > 0.0 && s.is_finite() {
                std[f] = s;
            } else {
                log::warn!("feature {f} has zero spread on the fitting range; std clamped to 1");
                clamped[f] = true;
            }
        }
        Ok(Scaler { mean, std, clamped })
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std` along the last axis.
    pub fn apply(&self, values: &Tensor) -> Tensor {
        self.map_last(values, |v, f| (v - self.mean[f]) / self.std[f])
    }

    /// `x · std + mean` along the last axis.
    pub fn invert(&self, values: &Tensor) -> Tensor {
        self.map_last(values, |v, f| v * self.std[f] + self.mean[f])
    }

    fn map_last(&self, values: &Tensor, op: impl Fn(f64, usize) -> f64) -> Tensor {
        let d = self.n_features();
        assert_eq!(values.shape().last(), Some(&d), "scaler feature count");
        let data = values.data().iter().enumerate().map(|(i, &v)| op(v, i % d)).collect();
        Tensor::new(values.shape(), data).expect("same shape")
    }
}
