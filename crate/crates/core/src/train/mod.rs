//! Optimisation loop: random window batches, extra input masking, Adam
//! with a cosine schedule, and early stopping on validation MAE.

mod optim;

use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{adam_step, clip_grad_norm, cosine_lr, AdamState, BETA1, BETA2, EPS};

use crate::data::{Scaler, Splits, TimeSeriesDataset};
use crate::error::{GrinError, Result};
use crate::eval::{normalized_values, predict_windows, window_plan, MetricsAccumulator};
use crate::model::{restore_observed, Checkpoint, GrinModel, WindowInput};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

/// Share of visible validation entries held out when the evaluation mask
/// cannot be used for model selection.
const VAL_HOLDOUT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub init_lr: f64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Share of visible entries hidden from the input of each training
    /// window; they stay loss targets.
    pub extra_mask_rate: f64,
    /// Window length in steps.
    pub window: usize,
    /// Step between consecutive training windows.
    pub stride: usize,
    /// Global gradient norm cap.
    pub clip_norm: f64,
    /// Standardise features with statistics of the training split.
    pub normalize: bool,
    pub seed: u64,
    /// Run everything on one thread in a fixed order.
    pub deterministic: bool,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batches_per_epoch: 160,
            batch_size: 32,
            init_lr: 0.001,
            patience: 40,
            extra_mask_rate: 0.05,
            window: 24,
            stride: 1,
            clip_norm: 5.0,
            normalize: true,
            seed: 0,
            deterministic: false,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(GrinError::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(GrinError::Config("train.init_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.extra_mask_rate) {
            return Err(GrinError::Config("train.extra_mask_rate must be in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(GrinError::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-window loss over the epoch's batches.
    pub train_loss: f64,
    /// Masked MAE on the validation split in data units.
    pub val_mae: Option<f64>,
}

/// Writes `epoch,lr,train_loss,val_mae`; a missing validation MAE is empty.
pub fn write_history_csv<W: Write>(writer: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "lr", "train_loss", "val_mae"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.lr),
            format!("{:?}", r.train_loss),
            r.val_mae.map(|v| format!("{v:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to continue training where a run stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: AdamState,
    pub best_val_mae: Option<f64>,
    pub epochs_since_best: usize,
    pub scaler: Scaler,
}

fn scaler_tensors(s: &Scaler) -> [(&'static str, Tensor); 3] {
    [
        ("scaler.mean", Tensor::vector(s.mean.clone())),
        ("scaler.std", Tensor::vector(s.std.clone())),
        (
            "scaler.clamped",
            Tensor::vector(s.clamped.iter().map(|&c| f64::from(u8::from(c))).collect()),
        ),
    ]
}

/// Stores `scaler` as checkpoint extras.
pub fn save_scaler(ckpt: &mut Checkpoint, scaler: &Scaler) -> Result<()> {
    for (name, t) in scaler_tensors(scaler) {
        ckpt.push(name, t)?;
    }
    Ok(())
}

/// Reads a scaler written by [`save_scaler`], if present.
pub fn load_scaler(ckpt: &Checkpoint) -> Result<Option<Scaler>> {
    let (Some(mean), Some(std)) = (ckpt.tensor("scaler.mean"), ckpt.tensor("scaler.std")) else {
        return Ok(None);
    };
    if mean.len() != std.len() {
        return Err(GrinError::Incompatible("scaler mean and std differ in length".into()));
    }
    let clamped = match ckpt.tensor("scaler.clamped") {
        Some(c) => c.data().iter().map(|&v| v == 1.0).collect(),
        None => vec![false; mean.len()],
    };
    Ok(Some(Scaler {
        mean: mean.data().to_vec(),
        std: std.data().to_vec(),
        clamped,
    }))
}

impl TrainState {
    /// Writes the optimizer moments, counters and scaler into `ckpt`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, params: &ParamStore) -> Result<()> {
        ckpt.epoch = Some(self.epochs_done);
        ckpt.optimizer_step = Some(self.adam.step);
        for (k, (name, _)) in params.iter().enumerate() {
            ckpt.push(format!("adam.m.{name}"), self.adam.m[k].clone())?;
            ckpt.push(format!("adam.v.{name}"), self.adam.v[k].clone())?;
        }
        if let Some(v) = self.best_val_mae {
            ckpt.push("train.best_val_mae", Tensor::scalar(v))?;
        }
        ckpt.push("train.epochs_since_best", Tensor::scalar(self.epochs_since_best as f64))?;
        save_scaler(ckpt, &self.scaler)
    }

    /// Reads a state written by [`TrainState::save_into`]; `None` when the
    /// checkpoint holds parameters only.
    pub fn from_checkpoint(ckpt: &Checkpoint, params: &ParamStore) -> Result<Option<Self>> {
        let (Some(epochs_done), Some(step)) = (ckpt.epoch, ckpt.optimizer_step) else {
            return Ok(None);
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            for (prefix, out) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let t = ckpt
                    .tensor(&format!("{prefix}.{name}"))
                    .ok_or_else(|| GrinError::Incompatible(format!("missing {prefix}.{name}")))?;
                if t.shape() != p.shape() {
                    return Err(GrinError::Incompatible(format!("{prefix}.{name} has shape {:?}", t.shape())));
                }
                out.push(t.clone());
            }
        }
        let scaler = load_scaler(ckpt)?
            .ok_or_else(|| GrinError::Incompatible("training checkpoint without scaler".into()))?;
        Ok(Some(TrainState {
            epochs_done,
            adam: AdamState { step, m, v },
            best_val_mae: ckpt.tensor("train.best_val_mae").map(|t| t.data()[0]),
            epochs_since_best: ckpt
                .tensor("train.epochs_since_best")
                .map_or(0, |t| t.data()[0] as usize),
            scaler,
        }))
    }
}

/// Result of [`train`]; the model holds the best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stopped_early: bool,
    /// Optimizer steps skipped because of non-finite gradients.
    pub skipped_steps: usize,
    pub state: TrainState,
}

/// Full-length windows inside `range` that do not cross episodes.
fn window_starts(ds: &TimeSeriesDataset, range: Range<usize>, len: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for ep in ds.episodes() {
        let (lo, hi) = (ep.start.max(range.start), ep.end.min(range.end));
        let mut s = lo;
        while s + len <= hi {
            out.push(s);
            s += stride;
        }
    }
    out
}

struct Validation {
    windows: Vec<Range<usize>>,
    input: Tensor,
    target: Tensor,
    /// `target` was carved out of the training-visible entries.
    held_out: bool,
}

impl Validation {
    /// Scores the evaluation mask of the validation split, unless that split
    /// has none or overlaps the test split; then a random share of its
    /// visible entries is held out instead (and must be hidden from training).
    fn new(ds: &TimeSeriesDataset, train_mask: &Tensor, splits: &Splits, cfg: &TrainConfig) -> Result<Option<Self>> {
        let range = splits.val.clone();
        if range.is_empty() {
            return Ok(None);
        }
        let windows = window_plan(ds, range.clone(), cfg.window, cfg.window)?;
        let block = ds.n_nodes() * ds.n_features();
        let span = range.start * block..range.end * block;
        let mut input = train_mask.clone();
        let mut target = Tensor::zeros(ds.values.shape());
        let has_eval = ds.eval_mask.data()[span.clone()].contains(&1.0);
        let overlaps_test = range.start < splits.test.end && splits.test.start < range.end;
        let held_out = !has_eval || overlaps_test;
        if !held_out {
            target.data_mut()[span.clone()].copy_from_slice(&ds.eval_mask.data()[span]);
        } else {
            log::info!("validating on {VAL_HOLDOUT} of the visible validation entries, held out from training");
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6c);
            for k in span {
                if input.data()[k] == 1.0 && rng.random_bool(VAL_HOLDOUT) {
                    input.data_mut()[k] = 0.0;
                    target.data_mut()[k] = 1.0;
                }
            }
        }
        if target.sum() == 0.0 {
            return Ok(None);
        }
        Ok(Some(Validation { windows, input, target, held_out }))
    }

    fn mae(&self, model: &GrinModel, ds: &TimeSeriesDataset, scaler: &Scaler, deterministic: bool) -> Result<f64> {
        let mut z = scaler.apply(&ds.values);
        for (v, &m) in z.data_mut().iter_mut().zip(self.input.data()) {
            if m != 1.0 {
                *v = 0.0;
            }
        }
        let preds = predict_windows(model, &z, &self.input, &self.windows, deterministic)?;
        let mut acc = MetricsAccumulator::new(ds.n_nodes(), ds.n_features());
        for (w, p) in self.windows.iter().zip(preds) {
            let x = TimeSeriesDataset::slice_steps(&ds.values, w.clone());
            let m = TimeSeriesDataset::slice_steps(&self.input, w.clone());
            let e = TimeSeriesDataset::slice_steps(&self.target, w.clone());
            acc.add(&x, &restore_observed(&x, &m, &scaler.invert(&p)), &e)?;
        }
        Ok(acc.finish(&ds.node_ids, None)?.mae)
    }
}

/// Summed loss and gradients of one group of windows.
fn group_gradients(model: &GrinModel, inputs: &[WindowInput<'_>]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let batch = model.batch(inputs)?;
    let trace = model.forward(&tape, &p, &batch)?;
    let loss = model.loss(&tape, &trace, &batch)?.loss;
    let value = loss.value().data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, p.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

/// Trains `model` in place on `splits.train`, selecting the parameters with
/// the lowest validation MAE. Passing `resume` continues a previous run:
/// epoch numbering, optimizer moments and the scaler carry over.
pub fn train(
    model: &mut GrinModel,
    ds: &TimeSeriesDataset,
    splits: &Splits,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.n_nodes() != model.n_nodes() || ds.n_features() != model.config().n_features {
        return Err(GrinError::dim(
            "train",
            &[ds.n_nodes(), ds.n_features()],
            &[model.n_nodes(), model.config().n_features],
        ));
    }
    if cfg.deterministic || cfg.threads == 0 {
        return train_inner(model, ds, splits, cfg, resume);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| GrinError::Config(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(model, ds, splits, cfg, resume))
}

fn train_inner(
    model: &mut GrinModel,
    ds: &TimeSeriesDataset,
    splits: &Splits,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    let train_mask = ds.training_mask();
    let scaler = match &resume {
        Some(s) => s.scaler.clone(),
        None if cfg.normalize => Scaler::fit(&ds.values, &train_mask, splits.train.clone())?,
        None => Scaler::identity(ds.n_features()),
    };
    let starts = window_starts(ds, splits.train.clone(), cfg.window, cfg.stride);
    if starts.is_empty() {
        return Err(GrinError::Config(format!(
            "training split {:?} holds no window of {} steps",
            splits.train, cfg.window
        )));
    }
    let validation = Validation::new(ds, &train_mask, splits, cfg)?;
    let train_mask = match &validation {
        Some(v) if v.held_out => v.input.clone(),
        _ => train_mask,
    };
    let z = normalized_values(ds, &scaler, &train_mask);
    let mut state = resume.unwrap_or_else(|| TrainState {
        epochs_done: 0,
        adam: AdamState::new(model.params().tensors()),
        best_val_mae: None,
        epochs_since_best: 0,
        scaler: scaler.clone(),
    });
    let mut best_params = model.params().tensors().to_vec();
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut stopped_early = false;
    let b = cfg.batch_size;
    let groups = if cfg.deterministic { 1 } else { rayon::current_num_threads().clamp(1, b) };

    for epoch in state.epochs_done..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.init_lr, cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let mut windows = Vec::with_capacity(b);
            for _ in 0..b {
                let s = starts[rng.random_range(0..starts.len())];
                let r = s..s + cfg.window;
                let values = TimeSeriesDataset::slice_steps(&z, r.clone());
                let target = TimeSeriesDataset::slice_steps(&train_mask, r);
                let mut input = target.clone();
                if cfg.extra_mask_rate > 0.0 {
                    for m in input.data_mut() {
                        if *m == 1.0 && rng.random_bool(cfg.extra_mask_rate) {
                            *m = 0.0;
                        }
                    }
                }
                windows.push((values, input, target));
            }
            let inputs: Vec<WindowInput> = windows
                .iter()
                .map(|(v, i, t)| WindowInput { values: v, input_mask: i, target_mask: t })
                .collect();
            let per = b.div_ceil(groups);
            let chunks: Vec<&[WindowInput]> = inputs.chunks(per).collect();
            let shared: &GrinModel = model;
            let results: Vec<Result<(f64, Vec<Tensor>)>> = if chunks.len() == 1 {
                vec![group_gradients(shared, chunks[0])]
            } else {
                chunks.par_iter().map(|c| group_gradients(shared, c)).collect()
            };
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, g) = r?;
                loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(g) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            let mut grads = grads.expect("at least one group");
            let scale = 1.0 / b as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            loss_sum += loss * scale;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            if !adam_step(model.params_mut().tensors_mut(), &grads, &mut state.adam, lr)? {
                skipped += 1;
            }
        }
        let val_mae = match &validation {
            Some(v) => Some(v.mae(model, ds, &scaler, cfg.deterministic)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / cfg.batches_per_epoch as f64,
            val_mae,
        });
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train_loss {:.5} val_mae {}",
            loss_sum / cfg.batches_per_epoch as f64,
            val_mae.map_or("-".into(), |v| format!("{v:.5}"))
        );
        state.epochs_done = epoch + 1;
        match val_mae {
            Some(v) if state.best_val_mae.is_none_or(|best| v < best) => {
                state.best_val_mae = Some(v);
                state.epochs_since_best = 0;
                best_params = model.params().tensors().to_vec();
                best_epoch = Some(epoch);
            }
            Some(_) => {
                state.epochs_since_best += 1;
                if state.epochs_since_best > cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
            None => best_params = model.params().tensors().to_vec(),
        }
    }
    model.params_mut().load_values(best_params)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_mae: state.best_val_mae,
        stopped_early,
        skipped_steps: skipped,
        state,
    })
}
