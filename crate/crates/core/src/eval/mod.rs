//! Masked error metrics, whole-range imputation and simple baselines.

mod baselines;

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baselines::{baseline_knn, baseline_mean, knn_neighbors, node_means};

use crate::data::{EvalMode, Scaler, TimeSeriesDataset};
use crate::error::{GrinError, Result};
use crate::model::{restore_observed, GrinModel, WindowInput};
use crate::tensor::Tensor;

/// Windows per forward pass during inference.
const INFER_BATCH: usize = 64;

/// Errors restricted to one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: String,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub mre: Option<f64>,
    pub n_evaluated: usize,
}

/// MAE, MSE and MRE (percent) over the evaluated entries.
///
/// `mre` is `None` when every evaluated truth is zero but some error is not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<EvalMode>,
    pub mae: f64,
    pub mse: f64,
    pub mre: Option<f64>,
    pub n_evaluated: usize,
    pub per_node: Vec<NodeMetrics>,
}

fn relative(abs: f64, truth: f64) -> Option<f64> {
    if truth > 0.0 {
        Some(100.0 * abs / truth)
    } else if abs == 0.0 {
        Some(0.0)
    } else {
        None
    }
}

/// Running sums for [`MetricsReport`]; errors from several windows may be
/// pooled before finishing.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    n_nodes: usize,
    n_features: usize,
    abs: f64,
    sq: f64,
    truth: f64,
    count: usize,
    node_abs: Vec<f64>,
    node_sq: Vec<f64>,
    node_truth: Vec<f64>,
    node_count: Vec<usize>,
}

impl MetricsAccumulator {
    pub fn new(n_nodes: usize, n_features: usize) -> Self {
        MetricsAccumulator {
            n_nodes,
            n_features,
            abs: 0.0,
            sq: 0.0,
            truth: 0.0,
            count: 0,
            node_abs: vec![0.0; n_nodes],
            node_sq: vec![0.0; n_nodes],
            node_truth: vec![0.0; n_nodes],
            node_count: vec![0; n_nodes],
        }
    }

    /// Adds the entries of `[T x N x d]` tensors where `mask` is 1.
    pub fn add(&mut self, truth: &Tensor, pred: &Tensor, mask: &Tensor) -> Result<()> {
        let t = truth.shape().first().copied().unwrap_or(0);
        let expected = [t, self.n_nodes, self.n_features];
        for x in [truth, pred, mask] {
            if x.shape() != expected {
                return Err(GrinError::dim("metrics", x.shape(), &expected));
            }
        }
        for (k, ((&x, &y), &m)) in truth.data().iter().zip(pred.data()).zip(mask.data()).enumerate() {
            if m != 1.0 {
                continue;
            }
            let node = (k / self.n_features) % self.n_nodes;
            let e = (y - x).abs();
            self.abs += e;
            self.sq += e * e;
            self.truth += x.abs();
            self.count += 1;
            self.node_abs[node] += e;
            self.node_sq[node] += e * e;
            self.node_truth[node] += x.abs();
            self.node_count[node] += 1;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, node_ids: &[String], mode: Option<EvalMode>) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(GrinError::NothingToEvaluate("the evaluation mask selects no entries".into()));
        }
        let n = self.count as f64;
        let per_node = (0..self.n_nodes)
            .map(|i| {
                let c = self.node_count[i];
                let has = c > 0;
                NodeMetrics {
                    node: node_ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                    mae: has.then(|| self.node_abs[i] / c as f64),
                    mse: has.then(|| self.node_sq[i] / c as f64),
                    mre: if has { relative(self.node_abs[i], self.node_truth[i]) } else { None },
                    n_evaluated: c,
                }
            })
            .collect();
        Ok(MetricsReport {
            mode,
            mae: self.abs / n,
            mse: self.sq / n,
            mre: relative(self.abs, self.truth),
            n_evaluated: self.count,
            per_node,
        })
    }
}

/// Metrics of `pred` against `truth` on the entries where `mask` is 1.
pub fn masked_metrics(truth: &Tensor, pred: &Tensor, mask: &Tensor, node_ids: &[String]) -> Result<MetricsReport> {
    let shape = truth.shape();
    if shape.len() != 3 {
        return Err(GrinError::dim("metrics", shape, &[0, 0, 0]));
    }
    let mut acc = MetricsAccumulator::new(shape[1], shape[2]);
    acc.add(truth, pred, mask)?;
    acc.finish(node_ids, None)
}

/// Window layout for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub window: usize,
    pub stride: usize,
    /// Run window batches one after another instead of on the thread pool.
    pub deterministic: bool,
}

/// Windows of `len` steps every `stride` steps covering every step of
/// `range`: a last window is aligned to the end of each episode when the
/// stride leaves a tail, and episodes shorter than `len` get one window of
/// their own length.
pub fn window_plan(ds: &TimeSeriesDataset, range: Range<usize>, len: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if len == 0 || stride == 0 {
        return Err(GrinError::Parameter("window length and stride must be positive".into()));
    }
    if range.end > ds.n_steps() || range.start > range.end {
        return Err(GrinError::Parameter(format!("step range {range:?} outside 0..{}", ds.n_steps())));
    }
    let mut out = Vec::new();
    for ep in ds.episodes() {
        let (lo, hi) = (ep.start.max(range.start), ep.end.min(range.end));
        if hi <= lo {
            continue;
        }
        let l = len.min(hi - lo);
        let mut start = lo;
        while start + l <= hi {
            out.push(start..start + l);
            start += stride;
        }
        if out.last().is_none_or(|w| w.end < hi) {
            out.push(hi - l..hi);
        }
    }
    Ok(out)
}

/// Values of `ds` rescaled by `scaler`, zero where the training mask is 0.
pub fn normalized_values(ds: &TimeSeriesDataset, scaler: &Scaler, train_mask: &Tensor) -> Tensor {
    let mut z = scaler.apply(&ds.values);
    for (v, &m) in z.data_mut().iter_mut().zip(train_mask.data()) {
        if m != 1.0 {
            *v = 0.0;
        }
    }
    z
}

/// Raw model predictions (normalised scale) for each window of `values`
/// read through `input_mask`.
pub fn predict_windows(
    model: &GrinModel,
    values: &Tensor,
    input_mask: &Tensor,
    windows: &[Range<usize>],
    deterministic: bool,
) -> Result<Vec<Tensor>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, w) in windows.iter().enumerate() {
        by_len.entry(w.len()).or_default().push(k);
    }
    let chunks: Vec<Vec<usize>> = by_len
        .into_values()
        .flat_map(|ks| ks.chunks(INFER_BATCH).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    let run = |ks: &Vec<usize>| -> Result<Vec<(usize, Tensor)>> {
        let slices: Vec<(Tensor, Tensor)> = ks
            .iter()
            .map(|&k| {
                let r = windows[k].clone();
                (
                    TimeSeriesDataset::slice_steps(values, r.clone()),
                    TimeSeriesDataset::slice_steps(input_mask, r),
                )
            })
            .collect();
        let inputs: Vec<WindowInput> = slices
            .iter()
            .map(|(v, m)| WindowInput { values: v, input_mask: m, target_mask: m })
            .collect();
        let batch = model.batch(&inputs)?;
        let outs = model.impute_batch(&batch)?;
        Ok(ks.iter().copied().zip(outs.into_iter().map(|o| o.prediction)).collect())
    };
    let results: Vec<Result<Vec<(usize, Tensor)>>> = if deterministic {
        chunks.iter().map(run).collect()
    } else {
        chunks.par_iter().map(run).collect()
    };
    let mut out: Vec<Option<Tensor>> = vec![None; windows.len()];
    for r in results {
        for (k, t) in r? {
            out[k] = Some(t);
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every window predicted")).collect())
}

/// Imputes steps `range` of `ds`: model predictions averaged over every
/// overlapping window, mapped back through `scaler`, with the training-visible
/// entries copied from the data. Returns `[range.len() x N x d]`.
pub fn impute_range(
    model: &GrinModel,
    ds: &TimeSeriesDataset,
    range: Range<usize>,
    scaler: &Scaler,
    opts: &EvalOptions,
) -> Result<Tensor> {
    let train = ds.training_mask();
    let z = normalized_values(ds, scaler, &train);
    let windows = window_plan(ds, range.clone(), opts.window, opts.stride)?;
    let preds = predict_windows(model, &z, &train, &windows, opts.deterministic)?;
    let block = ds.n_nodes() * ds.n_features();
    let mut sum = vec![0.0; range.len() * block];
    let mut hits = vec![0u32; range.len()];
    for (w, p) in windows.iter().zip(&preds) {
        let off = (w.start - range.start) * block;
        for (s, v) in sum[off..off + p.len()].iter_mut().zip(p.data()) {
            *s += v;
        }
        for h in &mut hits[w.start - range.start..w.end - range.start] {
            *h += 1;
        }
    }
    for (t, row) in sum.chunks_mut(block).enumerate() {
        let c = f64::from(hits[t]);
        row.iter_mut().for_each(|v| *v /= c);
    }
    let shape = [range.len(), ds.n_nodes(), ds.n_features()];
    let avg = scaler.invert(&Tensor::new(shape, sum)?);
    Ok(restore_observed(
        &TimeSeriesDataset::slice_steps(&ds.values, range.clone()),
        &TimeSeriesDataset::slice_steps(&train, range),
        &avg,
    ))
}

/// Metrics of the model on the evaluation mask within `range`.
///
/// In-sample, each entry's prediction is the average over the windows that
/// contain it. Out-of-sample, every window is scored on its own and the
/// errors of all windows are pooled.
pub fn evaluate(
    model: &GrinModel,
    ds: &TimeSeriesDataset,
    range: Range<usize>,
    mode: EvalMode,
    scaler: &Scaler,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let eval = TimeSeriesDataset::slice_steps(&ds.eval_mask, range.clone());
    if eval.sum() == 0.0 {
        return Err(GrinError::NothingToEvaluate(format!(
            "no entries of steps {range:?} are in the evaluation mask"
        )));
    }
    let truth = TimeSeriesDataset::slice_steps(&ds.values, range.clone());
    match mode {
        EvalMode::InSample => {
            let x_hat = impute_range(model, ds, range, scaler, opts)?;
            let mut acc = MetricsAccumulator::new(ds.n_nodes(), ds.n_features());
            acc.add(&truth, &x_hat, &eval)?;
            acc.finish(&ds.node_ids, Some(mode))
        }
        EvalMode::OutOfSample => {
            let train = ds.training_mask();
            let z = normalized_values(ds, scaler, &train);
            let windows = window_plan(ds, range, opts.window, opts.stride)?;
            let preds = predict_windows(model, &z, &train, &windows, opts.deterministic)?;
            let mut acc = MetricsAccumulator::new(ds.n_nodes(), ds.n_features());
            for (w, p) in windows.iter().zip(preds) {
                let x = TimeSeriesDataset::slice_steps(&ds.values, w.clone());
                let m = TimeSeriesDataset::slice_steps(&train, w.clone());
                let e = TimeSeriesDataset::slice_steps(&ds.eval_mask, w.clone());
                let y = restore_observed(&x, &m, &scaler.invert(&p));
                acc.add(&x, &y, &e)?;
            }
            acc.finish(&ds.node_ids, Some(mode))
        }
    }
}
