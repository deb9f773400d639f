//! Datasets, masks, windows, normalisation and the particle simulator.
//!
//! Values are `[T x N x d]` tensors (steps, nodes, features). Masks are
//! tensors of the same shape holding exactly `0.0` or `1.0`. Entries without
//! ground truth are stored as zeros; the masks are authoritative.

mod csv_io;
mod manifest;
mod masks;
mod particles;
mod scaler;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv_dataset, read_mask_csv, read_values_csv, write_mask_csv, write_values_csv, CsvTable};
pub use manifest::DatasetManifest;
pub use masks::{
    block_missing_mask, expected_block_fraction, point_missing_mask, virtual_sensor_mask, MaskPlan,
};
pub use particles::{simulate_particles, ChargeMode, ParticleDataset, ParticleSimConfig, ParticleSystem};
pub use scaler::Scaler;

use crate::error::{GrinError, Result};
use crate::layers::check_binary;
use crate::tensor::Tensor;

/// Multivariate series over a fixed set of nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    /// `[T x N x d]`, zero wherever `observed_mask` is zero.
    pub values: Tensor,
    /// Entries with ground truth.
    pub observed_mask: Tensor,
    /// Entries held out for evaluation; a subset of `observed_mask`.
    pub eval_mask: Tensor,
    pub node_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    /// Length of independent episodes (e.g. simulations) laid end to end.
    /// Windows and failure blocks never cross an episode boundary.
    pub episode_len: Option<usize>,
}

impl TimeSeriesDataset {
    /// Builds a dataset with an empty evaluation mask. Unobserved values are
    /// zeroed; observed ones must be finite.
    pub fn new(values: Tensor, observed_mask: Tensor) -> Result<Self> {
        let shape = values.shape().to_vec();
        if shape.len() != 3 {
            return Err(GrinError::dim("dataset values", &shape, &[0, 0, 0]));
        }
        if observed_mask.shape() != shape.as_slice() {
            return Err(GrinError::dim("dataset mask", observed_mask.shape(), &shape));
        }
        check_binary(&observed_mask)?;
        let mut values = values;
        for (i, (v, &m)) in values.data_mut().iter_mut().zip(observed_mask.data()).enumerate() {
            if m == 0.0 {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(GrinError::Validation(format!("non-finite observed value at flat index {i}")));
            }
        }
        Ok(TimeSeriesDataset {
            node_ids: (0..shape[1]).map(|i| i.to_string()).collect(),
            feature_names: (0..shape[2]).map(|f| format!("f{f}")).collect(),
            eval_mask: Tensor::zeros(shape),
            values,
            observed_mask,
            timestamps: None,
            episode_len: None,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[2]
    }

    /// Observed and not held out: the entries a model may train on.
    pub fn training_mask(&self) -> Tensor {
        let data = self
            .observed_mask
            .data()
            .iter()
            .zip(self.eval_mask.data())
            .map(|(&o, &e)| if o == 1.0 && e == 0.0 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(self.values.shape(), data).expect("same shape")
    }

    /// Replaces the evaluation mask. It must only cover observed entries.
    pub fn set_eval_mask(&mut self, eval: Tensor) -> Result<()> {
        if eval.shape() != self.values.shape() {
            return Err(GrinError::dim("eval mask", eval.shape(), self.values.shape()));
        }
        check_binary(&eval)?;
        if let Some(i) = eval
            .data()
            .iter()
            .zip(self.observed_mask.data())
            .position(|(&e, &o)| e == 1.0 && o == 0.0)
        {
            return Err(GrinError::Validation(format!(
                "eval mask covers an entry without ground truth (flat index {i})"
            )));
        }
        self.eval_mask = eval;
        Ok(())
    }

    /// Moves the observed entries where `drop` is 1 into the evaluation mask.
    pub fn hold_out(&mut self, drop: &Tensor) -> Result<()> {
        if drop.shape() != self.values.shape() {
            return Err(GrinError::dim("hold_out", drop.shape(), self.values.shape()));
        }
        for ((e, &d), &o) in self
            .eval_mask
            .data_mut()
            .iter_mut()
            .zip(drop.data())
            .zip(self.observed_mask.data())
        {
            if d == 1.0 && o == 1.0 {
                *e = 1.0;
            }
        }
        Ok(())
    }

    pub fn with_episode_len(mut self, len: usize) -> Result<Self> {
        if len == 0 || self.n_steps() % len != 0 {
            return Err(GrinError::Parameter(format!(
                "episode length {len} does not divide {} steps",
                self.n_steps()
            )));
        }
        self.episode_len = Some(len);
        Ok(self)
    }

    /// Contiguous step ranges that windows may not cross.
    pub fn episodes(&self) -> Vec<Range<usize>> {
        let t = self.n_steps();
        match self.episode_len {
            Some(len) => (0..t / len).map(|e| e * len..(e + 1) * len).collect(),
            None => vec![0..t],
        }
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    /// Steps `range` of a `[T x N x d]` tensor.
    pub fn slice_steps(t: &Tensor, range: Range<usize>) -> Tensor {
        let block = t.shape()[1] * t.shape()[2];
        Tensor::new(
            [range.len(), t.shape()[1], t.shape()[2]],
            t.data()[range.start * block..range.end * block].to_vec(),
        )
        .expect("slice within bounds")
    }

    /// Overlapping windows of `len` steps every `stride` steps inside
    /// `range`, never crossing an episode boundary.
    pub fn windows(&self, range: Range<usize>, len: usize, stride: usize) -> Result<Vec<MaskedSequence>> {
        if len == 0 || stride == 0 {
            return Err(GrinError::Parameter("window length and stride must be positive".into()));
        }
        if range.end > self.n_steps() || range.start > range.end {
            return Err(GrinError::Parameter(format!(
                "step range {range:?} outside 0..{}",
                self.n_steps()
            )));
        }
        let longest = self
            .episodes()
            .iter()
            .map(|e| e.end.min(range.end).saturating_sub(e.start.max(range.start)))
            .max()
            .unwrap_or(0);
        if len > longest {
            return Err(GrinError::Parameter(format!(
                "window of {len} steps is longer than the {longest} available"
            )));
        }
        let train = self.training_mask();
        let mut out = Vec::new();
        for ep in self.episodes() {
            let (lo, hi) = (ep.start.max(range.start), ep.end.min(range.end));
            let mut start = lo;
            while start + len <= hi {
                let r = start..start + len;
                out.push(MaskedSequence {
                    start,
                    values: Self::slice_steps(&self.values, r.clone()),
                    mask: Self::slice_steps(&train, r.clone()),
                    eval_mask: Self::slice_steps(&self.eval_mask, r),
                });
                start += stride;
            }
        }
        Ok(out)
    }
}

/// A window of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    /// First step of the window in the dataset.
    pub start: usize,
    pub values: Tensor,
    /// Training-visible entries.
    pub mask: Tensor,
    pub eval_mask: Tensor,
}

impl MaskedSequence {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where evaluation windows come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Train and evaluate on the same sequence; overlapping window
    /// predictions are averaged.
    InSample,
    /// Train and evaluate on disjoint step ranges.
    OutOfSample,
}

/// Train / validation / test step ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Consecutive ranges with the given train and validation fractions;
    /// the remainder is test. Boundaries fall on episode boundaries.
    pub fn by_fraction(
        n_steps: usize,
        episode_len: Option<usize>,
        train: f64,
        val: f64,
    ) -> Result<Splits> {
        if !(train > 0.0 && val >= 0.0 && train + val < 1.0) {
            return Err(GrinError::Parameter(format!(
                "split fractions train={train}, val={val} must be positive and sum below 1"
            )));
        }
        let unit = episode_len.unwrap_or(1);
        let units = n_steps / unit;
        let n_train = (units as f64 * train).round() as usize;
        let n_val = (units as f64 * val).round() as usize;
        if n_train == 0 || n_train + n_val >= units {
            return Err(GrinError::Parameter(format!(
                "{units} units cannot be split {train}/{val}/rest"
            )));
        }
        let (a, b) = (n_train * unit, (n_train + n_val) * unit);
        Ok(Splits {
            train: 0..a,
            val: a..b,
            test: b..units * unit,
        })
    }

    /// The 70/10/20 split.
    pub fn standard(n_steps: usize, episode_len: Option<usize>) -> Result<Splits> {
        Self::by_fraction(n_steps, episode_len, 0.7, 0.1)
    }
}
