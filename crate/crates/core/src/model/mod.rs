//! The bidirectional imputation network, its ablation variants and the
//! multi-stage training loss.
//!
//! A forward pass works on a [`Batch`] of equally long windows. Each window
//! is a `[T x N x d]` tensor; the windows of a batch are stacked into one
//! block-diagonal graph so every step is a single `[B·N x c]` matrix.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;

use crate::error::{GrinError, Result};
use crate::graph::{transition_matrices, GraphSpec, TransitionMatrices};
use crate::layers::{check_binary, Filler, FusionMlp, Linear, MpgruCell, SpatialDecoder};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Both directions with spatial decoders, fused by an MLP.
    Full,
    /// Bidirectional recurrent encoder fused on the hidden states before
    /// each step; no spatial decoder.
    NoSpatialDecoder,
    /// Like `NoSpatialDecoder` but fuses the hidden states after each step,
    /// so every node sees its own observation.
    DenoisingDecoder,
    /// Forward encoder only; the imputation is the one-step-ahead readout.
    UnidirectionalMpgru,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSpatialDecoder,
        Variant::DenoisingDecoder,
        Variant::UnidirectionalMpgru,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatialDecoder => "no_spatial_decoder",
            Variant::DenoisingDecoder => "denoising_decoder",
            Variant::UnidirectionalMpgru => "unidirectional_mpgru",
        }
    }

    pub fn has_decoder(self) -> bool {
        self == Variant::Full
    }

    pub fn is_bidirectional(self) -> bool {
        self != Variant::UnidirectionalMpgru
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = GrinError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| GrinError::Config(format!("unknown model variant `{s}`")))
    }
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Features per node, `d`.
    pub n_features: usize,
    /// Hidden width `l`, shared by the encoder and the decoder.
    pub hidden: usize,
    /// Diffusion hops in the recurrent encoder.
    pub encoder_hops: usize,
    /// Diffusion hops in the spatial decoder. Only 1 is supported.
    pub decoder_hops: usize,
    /// Width of the fusion MLP's hidden layer.
    pub fusion_hidden: usize,
    /// Learn the initial hidden state instead of starting from zeros.
    pub learnable_h0: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            n_features: 1,
            hidden: 64,
            encoder_hops: 2,
            decoder_hops: 1,
            fusion_hidden: 64,
            learnable_h0: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("hidden", self.hidden),
            ("encoder_hops", self.encoder_hops),
            ("fusion_hidden", self.fusion_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GrinError::Config(format!("model.{name} must be positive")));
            }
        }
        if self.decoder_hops != 1 {
            return Err(GrinError::Config(format!(
                "model.decoder_hops = {}: the spatial decoder is a one-hop layer",
                self.decoder_hops
            )));
        }
        Ok(())
    }
}

/// Parameters of one direction: recurrent cell, first readout and
/// (optionally) the spatial decoder.
#[derive(Clone, Debug)]
pub struct DirectionModule {
    pub cell: MpgruCell,
    /// First-stage readout `V_h, b_h`.
    pub readout: Linear,
    pub decoder: Option<SpatialDecoder>,
    pub h0: Option<ParamId>,
}

impl DirectionModule {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, l) = (cfg.n_features, cfg.hidden);
        let cell = MpgruCell::new(store, &format!("{name}.cell"), d, l, cfg.encoder_hops, rng);
        let readout = Linear::new(store, &format!("{name}.readout"), l, d, rng);
        let decoder = cfg
            .variant
            .has_decoder()
            .then(|| SpatialDecoder::new(store, &format!("{name}.decoder"), d, l, l, rng));
        let h0 = cfg
            .learnable_h0
            .then(|| store.add(format!("{name}.h0"), Tensor::zeros([l])));
        DirectionModule {
            cell,
            readout,
            decoder,
            h0,
        }
    }
}

/// One input window: values, the mask the model may read, and the mask of
/// entries the loss is computed on. All three are `[T x N x d]`.
#[derive(Clone, Copy, Debug)]
pub struct WindowInput<'a> {
    pub values: &'a Tensor,
    pub input_mask: &'a Tensor,
    pub target_mask: &'a Tensor,
}

/// Windows stacked node-major per step, ready for a forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n_windows: usize,
    pub n_nodes: usize,
    pub n_features: usize,
    pub steps: usize,
    values: Vec<Tensor>,
    input_mask: Vec<Tensor>,
    targets: Vec<Tensor>,
    weights: Vec<Tensor>,
    n_targets: usize,
}

impl Batch {
    pub fn new(n_nodes: usize, n_features: usize, windows: &[WindowInput<'_>]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| GrinError::Contract("empty batch".into()))?;
        let steps = first.values.shape().first().copied().unwrap_or(0);
        let expected = [steps, n_nodes, n_features];
        for w in windows {
            for t in [w.values, w.input_mask, w.target_mask] {
                if t.shape() != expected {
                    return Err(GrinError::dim("batch window", t.shape(), &expected));
                }
            }
            check_binary(w.input_mask)?;
            check_binary(w.target_mask)?;
        }
        if steps == 0 {
            return Err(GrinError::Parameter("windows must have at least one step".into()));
        }
        let block = n_nodes * n_features;
        let stack = |parts: &[&Tensor], t: usize| {
            let mut data = Vec::with_capacity(windows.len() * block);
            for w in parts {
                data.extend_from_slice(&w.data()[t * block..(t + 1) * block]);
            }
            Tensor::new([windows.len() * n_nodes, n_features], data).expect("stacked block")
        };
        let values: Vec<&Tensor> = windows.iter().map(|w| w.values).collect();
        let inputs: Vec<&Tensor> = windows.iter().map(|w| w.input_mask).collect();
        let target_masks: Vec<&Tensor> = windows.iter().map(|w| w.target_mask).collect();
        let mut batch = Batch {
            n_windows: windows.len(),
            n_nodes,
            n_features,
            steps,
            values: Vec::with_capacity(steps),
            input_mask: Vec::with_capacity(steps),
            targets: Vec::with_capacity(steps),
            weights: Vec::with_capacity(steps),
            n_targets: 0,
        };
        for t in 0..steps {
            let step_values = stack(&values, t);
            let target_mask = stack(&target_masks, t);
            let targets = step_values
                .data()
                .iter()
                .zip(target_mask.data())
                .map(|(&v, &m)| if m == 1.0 { v } else { 0.0 })
                .collect();
            let mut weights = target_mask.clone();
            for row in weights.data_mut().chunks_mut(n_features) {
                let count: f64 = row.iter().sum();
                if count > 0.0 {
                    row.iter_mut().for_each(|w| *w /= count);
                }
            }
            batch.n_targets += target_mask.data().iter().filter(|&&m| m == 1.0).count();
            batch.values.push(step_values);
            batch.input_mask.push(stack(&inputs, t));
            batch.targets.push(Tensor::new(target_mask.shape(), targets)?);
            batch.weights.push(weights);
        }
        Ok(batch)
    }

    /// Number of entries that contribute to the loss.
    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    /// Unstacks per-step `[B·N x d]` matrices into one `[T x N x d]` tensor per window.
    fn unstack(&self, steps: &[Tensor]) -> Vec<Tensor> {
        let block = self.n_nodes * self.n_features;
        (0..self.n_windows)
            .map(|b| {
                let mut data = Vec::with_capacity(self.steps * block);
                for s in steps {
                    data.extend_from_slice(&s.data()[b * block..(b + 1) * block]);
                }
                Tensor::new([self.steps, self.n_nodes, self.n_features], data)
                    .expect("unstacked window")
            })
            .collect()
    }
}

/// Per-step outputs of one direction, stored at their natural time index.
struct DirectionTrace<'t> {
    y1: Vec<Var<'t>>,
    y2: Option<Vec<Var<'t>>>,
    s: Option<Vec<Var<'t>>>,
    h_prev: Vec<Var<'t>>,
    h_next: Vec<Var<'t>>,
}

/// Recorded outputs of a forward pass, one `[B·N x d]` node per step.
pub struct Trace<'t> {
    pub prediction: Vec<Var<'t>>,
    pub y1_fwd: Vec<Var<'t>>,
    pub y2_fwd: Option<Vec<Var<'t>>>,
    pub y1_bwd: Option<Vec<Var<'t>>>,
    pub y2_bwd: Option<Vec<Var<'t>>>,
}

impl<'t> Trace<'t> {
    /// Output sequences that enter the training loss.
    pub fn loss_terms(&self, variant: Variant) -> Vec<&[Var<'t>]> {
        if variant == Variant::UnidirectionalMpgru {
            return vec![&self.prediction];
        }
        let mut terms: Vec<&[Var<'t>]> = vec![&self.prediction, &self.y1_fwd];
        terms.extend(self.y2_fwd.as_deref());
        terms.extend(self.y1_bwd.as_deref());
        terms.extend(self.y2_bwd.as_deref());
        terms
    }
}

/// Imputation of one window. Every tensor is `[T x N x d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationOutput {
    /// Final predictions `Ŷ`.
    pub prediction: Tensor,
    /// `Ŷ` with observed entries restored, `X̂`.
    pub imputed: Tensor,
    pub y1_fwd: Tensor,
    pub y2_fwd: Option<Tensor>,
    pub y1_bwd: Option<Tensor>,
    pub y2_bwd: Option<Tensor>,
}

impl ImputationOutput {
    /// Sequences that enter the training loss, matching [`Trace::loss_terms`].
    pub fn loss_terms(&self, variant: Variant) -> Vec<&Tensor> {
        if variant == Variant::UnidirectionalMpgru {
            return vec![&self.prediction];
        }
        let mut terms = vec![&self.prediction, &self.y1_fwd];
        terms.extend(self.y2_fwd.as_ref());
        terms.extend(self.y1_bwd.as_ref());
        terms.extend(self.y2_bwd.as_ref());
        terms
    }
}

/// Scalar training loss recorded on a tape.
pub struct LossValue<'t> {
    pub loss: Var<'t>,
    /// Entries that contributed; zero means the loss is a constant 0.
    pub n_targets: usize,
}

/// The imputation network together with the graph it was built for.
#[derive(Clone, Debug)]
pub struct GrinModel {
    config: ModelConfig,
    graph: GraphSpec,
    fingerprint: String,
    encoder_tm: TransitionMatrices,
    decoder_tm: TransitionMatrices,
    params: ParamStore,
    fwd: DirectionModule,
    bwd: Option<DirectionModule>,
    fusion: Option<FusionMlp>,
}

impl GrinModel {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, graph: &GraphSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder_tm = transition_matrices(graph, config.encoder_hops)?;
        let decoder_tm = transition_matrices(graph, 1)?.without_self_loops(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fwd = DirectionModule::new(&mut params, "fwd", &config, &mut rng);
        let bidirectional = config.variant.is_bidirectional();
        let bwd = bidirectional.then(|| DirectionModule::new(&mut params, "bwd", &config, &mut rng));
        let fusion = bidirectional.then(|| {
            let width = if config.variant.has_decoder() { 4 } else { 2 } * config.hidden;
            FusionMlp::new(
                &mut params,
                "fusion",
                width,
                config.fusion_hidden,
                config.n_features,
                &mut rng,
            )
        });
        Ok(GrinModel {
            fingerprint: graph.fingerprint(),
            graph: graph.clone(),
            config,
            encoder_tm,
            decoder_tm,
            params,
            fwd,
            bwd,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn graph_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward_module(&self) -> &DirectionModule {
        &self.fwd
    }

    pub fn backward_module(&self) -> Option<&DirectionModule> {
        self.bwd.as_ref()
    }

    pub fn fusion(&self) -> Option<&FusionMlp> {
        self.fusion.as_ref()
    }

    pub fn batch(&self, windows: &[WindowInput<'_>]) -> Result<Batch> {
        Batch::new(self.n_nodes(), self.config.n_features, windows)
    }

    /// Records a forward pass over `batch` on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &Batch) -> Result<Trace<'t>> {
        if batch.n_nodes != self.n_nodes() || batch.n_features != self.config.n_features {
            return Err(GrinError::dim(
                "model input",
                &[batch.n_nodes, batch.n_features],
                &[self.n_nodes(), self.config.n_features],
            ));
        }
        let enc = self.encoder_tm.batched(batch.n_windows);
        let dec = self
            .config
            .variant
            .has_decoder()
            .then(|| self.decoder_tm.batched(batch.n_windows));
        let mut fillers = Vec::with_capacity(batch.steps);
        let mut masks = Vec::with_capacity(batch.steps);
        for t in 0..batch.steps {
            fillers.push(Filler::new(tape, &batch.values[t], &batch.input_mask[t])?);
            masks.push(tape.constant(batch.input_mask[t].clone()));
        }
        let rows = batch.n_windows * batch.n_nodes;
        let run = |module: &DirectionModule, order: &mut dyn Iterator<Item = usize>| {
            self.run_direction(tape, p, module, &fillers, &masks, rows, &enc, dec.as_ref(), order)
        };
        let f = run(&self.fwd, &mut (0..batch.steps))?;
        let b = match &self.bwd {
            Some(module) => Some(run(module, &mut (0..batch.steps).rev())?),
            None => None,
        };
        let prediction = match (&self.fusion, &b) {
            (Some(fusion), Some(b)) => (0..batch.steps)
                .map(|t| {
                    let inputs = match self.config.variant {
                        Variant::Full => vec![
                            f.s.as_ref().expect("decoder state")[t],
                            f.h_prev[t],
                            b.s.as_ref().expect("decoder state")[t],
                            b.h_prev[t],
                        ],
                        Variant::NoSpatialDecoder => vec![f.h_prev[t], b.h_prev[t]],
                        Variant::DenoisingDecoder => vec![f.h_next[t], b.h_next[t]],
                        Variant::UnidirectionalMpgru => unreachable!("no fusion"),
                    };
                    fusion.forward(tape, p, &inputs)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => f.y1.clone(),
        };
        Ok(Trace {
            prediction,
            y1_fwd: f.y1,
            y2_fwd: f.y2,
            y1_bwd: b.as_ref().map(|b| b.y1.clone()),
            y2_bwd: b.and_then(|b| b.y2),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_direction<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        module: &DirectionModule,
        fillers: &[Filler<'t>],
        masks: &[Var<'t>],
        rows: usize,
        enc: &TransitionMatrices,
        dec: Option<&TransitionMatrices>,
        order: &mut dyn Iterator<Item = usize>,
    ) -> Result<DirectionTrace<'t>> {
        let steps = fillers.len();
        let zeros = tape.constant(Tensor::zeros([rows, self.config.hidden]));
        let mut h = match module.h0 {
            Some(id) => zeros.add(p[id])?,
            None => zeros,
        };
        let mut y1 = vec![None; steps];
        let mut y2 = vec![None; steps];
        let mut s = vec![None; steps];
        let mut h_prev = vec![None; steps];
        let mut h_next = vec![None; steps];
        for t in order {
            let pred1 = module.readout.forward(p, h)?;
            let mut x = fillers[t].fill(pred1)?;
            if let (Some(decoder), Some(dec)) = (&module.decoder, dec) {
                let (state, pred2) = decoder.step(tape, p, x, masks[t], h, dec)?;
                x = fillers[t].fill(pred2)?;
                y2[t] = Some(pred2);
                s[t] = Some(state);
            }
            let next = module.cell.step(tape, p, x, masks[t], h, enc)?.hidden;
            y1[t] = Some(pred1);
            h_prev[t] = Some(h);
            h_next[t] = Some(next);
            h = next;
        }
        let done = |v: Vec<Option<Var<'t>>>| v.into_iter().map(|x| x.expect("every step visited")).collect();
        let has_decoder = module.decoder.is_some();
        Ok(DirectionTrace {
            y1: done(y1),
            y2: has_decoder.then(|| done(y2)),
            s: has_decoder.then(|| done(s)),
            h_prev: done(h_prev),
            h_next: done(h_next),
        })
    }

    /// Sum over loss terms and steps of the per-node-step normalised
    /// absolute error on target entries.
    pub fn loss<'t>(&self, tape: &'t Tape, trace: &Trace<'t>, batch: &Batch) -> Result<LossValue<'t>> {
        if batch.n_targets == 0 {
            log::warn!("batch has no loss targets; loss is zero");
        }
        let targets: Vec<_> = batch.targets.iter().map(|t| tape.constant(t.clone())).collect();
        let weights: Vec<_> = batch.weights.iter().map(|w| tape.constant(w.clone())).collect();
        let mut loss = tape.constant(Tensor::scalar(0.0));
        for term in trace.loss_terms(self.config.variant) {
            for (t, y) in term.iter().enumerate() {
                let err = y.sub(targets[t])?.abs().mul(weights[t])?.sum();
                loss = loss.add(err)?;
            }
        }
        Ok(LossValue {
            loss,
            n_targets: batch.n_targets,
        })
    }

    /// Runs the model without recording gradients and unstacks the outputs.
    pub fn impute_batch(&self, batch: &Batch) -> Result<Vec<ImputationOutput>> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let trace = self.forward(&tape, &p, batch)?;
        let collect = |vars: &[Var<'_>]| {
            let steps: Vec<Tensor> = vars.iter().map(|v| (*v.value()).clone()).collect();
            batch.unstack(&steps)
        };
        let optional = |vars: &Option<Vec<Var<'_>>>| match vars {
            Some(v) => collect(v).into_iter().map(Some).collect(),
            None => vec![None; batch.n_windows],
        };
        let prediction = collect(&trace.prediction);
        let y1_fwd = collect(&trace.y1_fwd);
        let y2_fwd = optional(&trace.y2_fwd);
        let y1_bwd = optional(&trace.y1_bwd);
        let y2_bwd = optional(&trace.y2_bwd);
        let values = batch.unstack(&batch.values);
        let masks = batch.unstack(&batch.input_mask);
        let mut out = Vec::with_capacity(batch.n_windows);
        for (b, ((((pred, y1f), y2f), y1b), y2b)) in prediction
            .into_iter()
            .zip(y1_fwd)
            .zip(y2_fwd)
            .zip(y1_bwd)
            .zip(y2_bwd)
            .enumerate()
        {
            let imputed = restore_observed(&values[b], &masks[b], &pred);
            out.push(ImputationOutput {
                prediction: pred,
                imputed,
                y1_fwd: y1f,
                y2_fwd: y2f,
                y1_bwd: y1b,
                y2_bwd: y2b,
            });
        }
        Ok(out)
    }

    /// Imputes one `[T x N x d]` window given its observation mask.
    pub fn impute(&self, values: &Tensor, mask: &Tensor) -> Result<ImputationOutput> {
        let batch = self.batch(&[WindowInput {
            values,
            input_mask: mask,
            target_mask: mask,
        }])?;
        Ok(self.impute_batch(&batch)?.pop().expect("one window"))
    }

    /// Loss of an already computed imputation, without a tape.
    pub fn training_loss(&self, out: &ImputationOutput, x: &Tensor, target_mask: &Tensor) -> Result<f64> {
        let batch = self.batch(&[WindowInput {
            values: x,
            input_mask: target_mask,
            target_mask,
        }])?;
        let block = batch.n_nodes * batch.n_features;
        let mut total = 0.0;
        for term in out.loss_terms(self.config.variant) {
            if term.shape() != x.shape() {
                return Err(GrinError::dim("training_loss", term.shape(), x.shape()));
            }
            for t in 0..batch.steps {
                let y = &term.data()[t * block..(t + 1) * block];
                let step: f64 = y
                    .iter()
                    .zip(batch.targets[t].data())
                    .zip(batch.weights[t].data())
                    .map(|((y, x), w)| (y - x).abs() * w)
                    .sum();
                total += step;
            }
        }
        Ok(total)
    }
}

/// `m ⊙ x + (1 − m) ⊙ y`, taking observed entries verbatim.
pub fn restore_observed(x: &Tensor, m: &Tensor, y: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(m.data())
        .zip(y.data())
        .map(|((&x, &m), &y)| if m == 1.0 { x } else { y })
        .collect();
    Tensor::new(y.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests;
