//! Neural building blocks: diffusion convolution, the message-passing GRU
//! cell, the filler operator, the spatial decoder and the fusion MLP.
//!
//! All layers work on node-major matrices: row `i` holds the features of
//! node `i`. Several graphs can be stacked by using block-diagonal
//! transition matrices (see [`TransitionMatrices::batched`]).

use rand::Rng;

use crate::error::{GrinError, Result};
use crate::graph::TransitionMatrices;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

fn check_width(op: &'static str, x: &Var<'_>, expected: usize) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != expected {
        return Err(GrinError::dim(op, &shape, &[shape.first().copied().unwrap_or(0), expected]));
    }
    Ok(())
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[in_features, out_features],
            in_features,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), &[out_features], in_features, rng);
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_width("linear", &x, self.in_features)?;
        x.matmul(p[self.weight])?.add(p[self.bias])
    }
}

/// Diffusion convolution
/// `y = x·θ₀ + Σ_k (T_fᵏ x)·θ_{k,f} + (T_bᵏ x)·θ_{k,b} + b`.
///
/// The hop weights are stored stacked in one `((1 + 2K)·c_in) x c_out`
/// matrix, in the order `θ₀, θ_{1,f} … θ_{K,f}, θ_{1,b} … θ_{K,b}`, so the
/// hop-0 term is applied once and shared by both directions.
#[derive(Clone, Debug)]
pub struct DiffusionConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
    pub hops: usize,
}

impl DiffusionConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        hops: usize,
        rng: &mut R,
    ) -> Self {
        let rows = (1 + 2 * hops) * in_features;
        let weight = store.add_uniform(format!("{name}.weight"), &[rows, out_features], rows, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_features], rows, rng);
        DiffusionConv {
            weight,
            bias,
            in_features,
            out_features,
            hops,
        }
    }

    /// Row range of the stacked weight holding `θ_{hop,dir}`; hop 0 ignores `forward`.
    pub fn block_rows(&self, hop: usize, forward: bool) -> std::ops::Range<usize> {
        let block = match (hop, forward) {
            (0, _) => 0,
            (k, true) => k,
            (k, false) => self.hops + k,
        };
        block * self.in_features..(block + 1) * self.in_features
    }

    /// `[x ‖ T_f x ‖ … ‖ T_f^K x ‖ T_b x ‖ … ‖ T_b^K x]`, reusable across
    /// convolutions that share an input.
    pub fn supports<'t>(
        tape: &'t Tape,
        x: Var<'t>,
        tm: &TransitionMatrices,
    ) -> Result<Var<'t>> {
        let mut parts = Vec::with_capacity(1 + 2 * tm.max_hops);
        parts.push(x);
        for adj in [&tm.forward, &tm.backward] {
            let mut z = x;
            for _ in 0..tm.max_hops {
                z = z.spmm(adj)?;
                parts.push(z);
            }
        }
        tape.concat_last(&parts)
    }

    pub fn apply_supports<'t>(&self, p: &Bound<'t>, supports: Var<'t>) -> Result<Var<'t>> {
        check_width("diffusion_conv", &supports, (1 + 2 * self.hops) * self.in_features)?;
        supports.matmul(p[self.weight])?.add(p[self.bias])
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        x: Var<'t>,
        tm: &TransitionMatrices,
    ) -> Result<Var<'t>> {
        self.check_hops(tm)?;
        check_width("diffusion_conv", &x, self.in_features)?;
        let s = Self::supports(tape, x, tm)?;
        self.apply_supports(p, s)
    }

    fn check_hops(&self, tm: &TransitionMatrices) -> Result<()> {
        if tm.max_hops != self.hops {
            return Err(GrinError::Parameter(format!(
                "transition matrices have {} hops, layer expects {}",
                tm.max_hops, self.hops
            )));
        }
        Ok(())
    }
}

/// Gate activations of one [`MpgruCell`] step.
pub struct GruStep<'t> {
    pub reset: Var<'t>,
    pub update: Var<'t>,
    pub candidate: Var<'t>,
    pub hidden: Var<'t>,
}

/// GRU cell whose gates are diffusion convolutions over `[x ‖ m ‖ h]`.
#[derive(Clone, Debug)]
pub struct MpgruCell {
    pub reset: DiffusionConv,
    pub update: DiffusionConv,
    pub candidate: DiffusionConv,
    pub n_features: usize,
    pub hidden: usize,
}

impl MpgruCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_features: usize,
        hidden: usize,
        hops: usize,
        rng: &mut R,
    ) -> Self {
        let width = 2 * n_features + hidden;
        MpgruCell {
            reset: DiffusionConv::new(store, &format!("{name}.reset"), width, hidden, hops, rng),
            update: DiffusionConv::new(store, &format!("{name}.update"), width, hidden, hops, rng),
            candidate: DiffusionConv::new(
                store,
                &format!("{name}.candidate"),
                width,
                hidden,
                hops,
                rng,
            ),
            n_features,
            hidden,
        }
    }

    /// One recurrent update from the filled input `x`, mask `m` and the
    /// previous state `h`.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        x: Var<'t>,
        m: Var<'t>,
        h: Var<'t>,
        tm: &TransitionMatrices,
    ) -> Result<GruStep<'t>> {
        self.reset.check_hops(tm)?;
        check_width("mpgru input", &x, self.n_features)?;
        check_width("mpgru mask", &m, self.n_features)?;
        check_width("mpgru hidden", &h, self.hidden)?;
        let xmh = tape.concat_last(&[x, m, h])?;
        let s = DiffusionConv::supports(tape, xmh, tm)?;
        let reset = self.reset.apply_supports(p, s)?.sigmoid();
        let update = self.update.apply_supports(p, s)?.sigmoid();
        let rh = reset.mul(h)?;
        let xmrh = tape.concat_last(&[x, m, rh])?;
        let s = DiffusionConv::supports(tape, xmrh, tm)?;
        let candidate = self.candidate.apply_supports(p, s)?.tanh();
        let hidden = update.mul(h)?.add(update.one_minus().mul(candidate)?)?;
        Ok(GruStep {
            reset,
            update,
            candidate,
            hidden,
        })
    }
}

/// Keeps `x` where `m = 1` and takes `y` elsewhere.
///
/// ```
/// use grin::layers::filler;
/// use grin::tensor::{Tape, Tensor};
///
/// let tape = Tape::new();
/// let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
/// let m = tape.constant(Tensor::vector(vec![1.0, 0.0]));
/// let y = tape.constant(Tensor::vector(vec![9.0, 7.0]));
/// assert_eq!(filler(x, m, y).unwrap().value().data(), &[1.0, 7.0]);
/// ```
pub fn filler<'t>(x: Var<'t>, m: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let (xs, ms, ys) = (x.shape(), m.shape(), y.shape());
    if xs != ms || xs != ys {
        return Err(GrinError::dim("filler", &xs, &ys));
    }
    check_binary(&m.value())?;
    m.mul(x)?.add(m.one_minus().mul(y)?)
}

pub(crate) fn check_binary(m: &Tensor) -> Result<()> {
    match m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(GrinError::Validation(format!("mask value {v} is not binary"))),
        None => Ok(()),
    }
}

/// Filler with the observed part precomputed, for repeated use at one step.
pub struct Filler<'t> {
    observed: Var<'t>,
    missing: Var<'t>,
}

impl<'t> Filler<'t> {
    pub fn new(tape: &'t Tape, x: &Tensor, m: &Tensor) -> Result<Self> {
        if x.shape() != m.shape() {
            return Err(GrinError::dim("filler", x.shape(), m.shape()));
        }
        check_binary(m)?;
        let observed = x
            .data()
            .iter()
            .zip(m.data())
            .map(|(&xv, &mv)| if mv == 1.0 { xv } else { 0.0 })
            .collect();
        Ok(Filler {
            observed: tape.constant(Tensor::new(x.shape(), observed)?),
            missing: tape.constant(m.map(|v| 1.0 - v)),
        })
    }

    pub fn fill(&self, y: Var<'t>) -> Result<Var<'t>> {
        self.missing.mul(y)?.add(self.observed)
    }
}

/// Second imputation stage: a one-hop message-passing layer that excludes
/// each node's own message, plus a linear readout over `[s ‖ h]`.
#[derive(Clone, Debug)]
pub struct SpatialDecoder {
    /// `ρ`: message from `[x̂ ‖ h ‖ m]` of the sending node.
    pub message: Linear,
    /// `γ`: update from `[h ‖ Σ_fwd ‖ Σ_bwd]`.
    pub update: Linear,
    /// Second readout `V_s, b_s` over `[s ‖ h]`.
    pub readout: Linear,
    pub n_features: usize,
    pub hidden: usize,
    pub repr: usize,
}

impl SpatialDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        n_features: usize,
        hidden: usize,
        repr: usize,
        rng: &mut R,
    ) -> Self {
        SpatialDecoder {
            message: Linear::new(
                store,
                &format!("{name}.message"),
                2 * n_features + hidden,
                repr,
                rng,
            ),
            update: Linear::new(store, &format!("{name}.update"), hidden + 2 * repr, repr, rng),
            readout: Linear::new(store, &format!("{name}.readout"), repr + hidden, n_features, rng),
            n_features,
            hidden,
            repr,
        }
    }

    /// Returns the imputation representation `s` and the second-stage
    /// prediction `ŷ⁽²⁾`. `tm` must have no self-transitions.
    pub fn step<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        x1_filled: Var<'t>,
        m: Var<'t>,
        h: Var<'t>,
        tm: &TransitionMatrices,
    ) -> Result<(Var<'t>, Var<'t>)> {
        check_width("decoder input", &x1_filled, self.n_features)?;
        check_width("decoder mask", &m, self.n_features)?;
        check_width("decoder hidden", &h, self.hidden)?;
        let msg = self
            .message
            .forward(p, tape.concat_last(&[x1_filled, h, m])?)?
            .tanh();
        let agg_f = msg.spmm(&tm.forward)?;
        let agg_b = msg.spmm(&tm.backward)?;
        let s = self
            .update
            .forward(p, tape.concat_last(&[h, agg_f, agg_b])?)?
            .tanh();
        let y2 = self.readout.forward(p, tape.concat_last(&[s, h])?)?;
        Ok((s, y2))
    }
}

/// Per-node MLP with one `tanh` hidden layer.
#[derive(Clone, Debug)]
pub struct FusionMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl FusionMlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        hidden: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        FusionMlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_features, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out_features, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let z = tape.concat_last(inputs)?;
        let hidden = self.hidden.forward(p, z)?.tanh();
        self.out.forward(p, hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{transition_matrices, Edge, GraphSpec};
    use crate::tensor::CsrMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn line3() -> GraphSpec {
        let e = |s, t| Edge { source: s, target: t, weight: 1.0 };
        GraphSpec::new(3, vec![e(0, 1), e(1, 0), e(1, 2), e(2, 1)], false).unwrap()
    }

    fn zero_all(store: &mut ParamStore) {
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }

    fn dense_rows(t: &Tensor, r: std::ops::Range<usize>) -> Tensor {
        let c = t.cols();
        Tensor::new([r.len(), c], t.data()[r.start * c..r.end * c].to_vec()).unwrap()
    }

    fn dense_add(a: &Tensor, b: &Tensor) -> Tensor {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::new(a.shape(), data).unwrap()
    }

    #[test]
    fn diffusion_conv_without_edges_is_pointwise() {
        let mut store = ParamStore::new();
        let conv = DiffusionConv::new(&mut store, "c", 3, 2, 2, &mut rng());
        let tm = transition_matrices(&GraphSpec::empty(4), 2).unwrap();
        let x = random(&mut rng(), &[4, 3]);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let y = conv.forward(&tape, &p, tape.constant(x.clone()), &tm).unwrap().value();
        let w = store.get(conv.weight);
        let theta0 = dense_rows(w, conv.block_rows(0, true));
        let mut expect = x.matmul(&theta0).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                let v = expect.get(&[r, c]) + store.get(conv.bias).data()[c];
                expect.set(&[r, c], v);
            }
        }
        assert!(y.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn diffusion_conv_identity_composition() {
        let mut store = ParamStore::new();
        let conv = DiffusionConv::new(&mut store, "c", 2, 2, 1, &mut rng());
        let mut w = Tensor::zeros([6, 2]);
        for (row, col) in [(2, 0), (3, 1), (4, 0), (5, 1)] {
            w.set(&[row, col], 0.5);
        }
        *store.get_mut(conv.weight) = w;
        *store.get_mut(conv.bias) = Tensor::zeros([2]);
        let id = Arc::new(CsrMatrix::identity(3));
        let tm = TransitionMatrices { forward: id.clone(), backward: id, max_hops: 1 };
        let x = random(&mut rng(), &[3, 2]);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let y = conv.forward(&tape, &p, tape.constant(x.clone()), &tm).unwrap().value();
        assert_eq!(*y, x);
    }

    #[test]
    fn diffusion_conv_matches_dense_powers() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let conv = DiffusionConv::new(&mut store, "c", 2, 3, 2, &mut r);
        let tm = transition_matrices(&line3(), 2).unwrap();
        let x = random(&mut r, &[3, 2]);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let y = conv.forward(&tape, &p, tape.constant(x.clone()), &tm).unwrap().value();

        let tf = tm.forward.to_dense();
        let tb = tm.backward.to_dense();
        let w = store.get(conv.weight);
        let mut expect = x.matmul(&dense_rows(w, conv.block_rows(0, true))).unwrap();
        let mut pf = Tensor::eye(3);
        let mut pb = Tensor::eye(3);
        for k in 1..=2 {
            pf = pf.matmul(&tf).unwrap();
            pb = pb.matmul(&tb).unwrap();
            let fk = pf.matmul(&x).unwrap().matmul(&dense_rows(w, conv.block_rows(k, true)));
            let bk = pb.matmul(&x).unwrap().matmul(&dense_rows(w, conv.block_rows(k, false)));
            expect = dense_add(&dense_add(&expect, &fk.unwrap()), &bk.unwrap());
        }
        let bias = store.get(conv.bias);
        for i in 0..3 {
            for c in 0..3 {
                expect.set(&[i, c], expect.get(&[i, c]) + bias.data()[c]);
            }
        }
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn diffusion_conv_width_and_hop_errors() {
        let mut store = ParamStore::new();
        let conv = DiffusionConv::new(&mut store, "c", 2, 3, 2, &mut rng());
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let tm2 = transition_matrices(&line3(), 2).unwrap();
        let tm1 = transition_matrices(&line3(), 1).unwrap();
        let bad = tape.constant(Tensor::zeros([3, 5]));
        assert!(matches!(conv.forward(&tape, &p, bad, &tm2), Err(GrinError::Dimension { .. })));
        let ok = tape.constant(Tensor::zeros([3, 2]));
        assert!(conv.forward(&tape, &p, ok, &tm1).is_err());
    }

    fn cell_and_tm(hidden: usize) -> (ParamStore, MpgruCell, TransitionMatrices) {
        let mut store = ParamStore::new();
        let cell = MpgruCell::new(&mut store, "cell", 2, hidden, 2, &mut rng());
        (store, cell, transition_matrices(&line3(), 2).unwrap())
    }

    #[test]
    fn mpgru_zero_parameters_halve_state() {
        let (mut store, cell, tm) = cell_and_tm(4);
        zero_all(&mut store);
        let mut r = rng();
        let h = random(&mut r, &[3, 4]);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = cell
            .step(
                &tape,
                &p,
                tape.constant(random(&mut r, &[3, 2])),
                tape.constant(Tensor::ones([3, 2])),
                tape.constant(h.clone()),
                &tm,
            )
            .unwrap();
        assert!(out.reset.value().data().iter().all(|&v| v == 0.5));
        assert!(out.update.value().data().iter().all(|&v| v == 0.5));
        assert!(out.candidate.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(*out.hidden.value(), h.map(|v| 0.5 * v));
    }

    #[test]
    fn mpgru_saturated_update_keeps_zero_state() {
        let (mut store, cell, tm) = cell_and_tm(3);
        *store.get_mut(cell.update.bias) = Tensor::full([3], 1000.0);
        let mut r = rng();
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = cell
            .step(
                &tape,
                &p,
                tape.constant(random(&mut r, &[3, 2]).map(|v| v * 0.1)),
                tape.constant(Tensor::ones([3, 2])),
                tape.constant(Tensor::zeros([3, 3])),
                &tm,
            )
            .unwrap();
        assert!(out.hidden.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mpgru_single_node_scalar_oracle() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let cell = MpgruCell::new(&mut store, "cell", 1, 1, 1, &mut r);
        let tm = transition_matrices(&GraphSpec::empty(1), 1).unwrap();
        let (x, m, h) = (0.7, 1.0, -0.3);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let got = cell
            .step(
                &tape,
                &p,
                tape.constant(Tensor::new([1, 1], vec![x]).unwrap()),
                tape.constant(Tensor::new([1, 1], vec![m]).unwrap()),
                tape.constant(Tensor::new([1, 1], vec![h]).unwrap()),
                &tm,
            )
            .unwrap()
            .hidden
            .value()
            .data()[0];
        // only the hop-0 rows act on an isolated node: rows 0..3 of the 9x1 weight
        let gate = |conv: &DiffusionConv, hv: f64| {
            let w = store.get(conv.weight).data();
            w[0] * x + w[1] * m + w[2] * hv + store.get(conv.bias).data()[0]
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let rg = sig(gate(&cell.reset, h));
        let ug = sig(gate(&cell.update, h));
        let c = gate(&cell.candidate, rg * h).tanh();
        let expect = ug * h + (1.0 - ug) * c;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn mpgru_gates_in_range_and_convex() {
        let (store, cell, tm) = cell_and_tm(5);
        let mut r = rng();
        let h = random(&mut r, &[3, 5]).map(f64::tanh);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let out = cell
            .step(
                &tape,
                &p,
                tape.constant(random(&mut r, &[3, 2])),
                tape.constant(Tensor::ones([3, 2])),
                tape.constant(h.clone()),
                &tm,
            )
            .unwrap();
        let (u, c, hn) = (out.update.value(), out.candidate.value(), out.hidden.value());
        for g in [out.reset.value(), u.clone()] {
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for i in 0..hn.len() {
            let (a, b) = (h.data()[i], c.data()[i]);
            let v = hn.data()[i];
            assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
        }
    }

    #[test]
    fn filler_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.constant(Tensor::vector(vec![9.0, 7.0]));
        let ones = tape.constant(Tensor::ones([2]));
        let zeros = tape.constant(Tensor::zeros([2]));
        assert_eq!(filler(x, ones, y).unwrap().value().data(), &[1.0, 2.0]);
        assert_eq!(filler(x, zeros, y).unwrap().value().data(), &[9.0, 7.0]);
        let half = tape.constant(Tensor::full([2], 0.5));
        assert!(matches!(filler(x, half, y), Err(GrinError::Validation(_))));
    }

    #[test]
    fn filler_gradient_routing() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.param(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let m = tape.constant(Tensor::vector(vec![1.0, 0.0, 1.0]));
        let g = tape.backward(filler(x, m, y).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.wrt(y).data(), &[0.0, 1.0, 0.0]);

        let tape = Tape::new();
        let y = tape.param(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let f = Filler::new(
            &tape,
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            &Tensor::vector(vec![1.0, 0.0, 1.0]),
        )
        .unwrap();
        let out = f.fill(y).unwrap();
        assert_eq!(out.value().data(), &[1.0, 5.0, 3.0]);
        assert_eq!(tape.backward(out.sum()).unwrap().wrt(y).data(), &[0.0, 1.0, 0.0]);
    }

    fn decoder_setup() -> (ParamStore, SpatialDecoder) {
        let mut store = ParamStore::new();
        let dec = SpatialDecoder::new(&mut store, "dec", 2, 3, 3, &mut rng());
        (store, dec)
    }

    fn decode(
        store: &ParamStore,
        dec: &SpatialDecoder,
        g: &GraphSpec,
        x: &Tensor,
        m: &Tensor,
        h: &Tensor,
    ) -> (Tensor, Tensor) {
        let tm = transition_matrices(g, 1).unwrap().without_self_loops(1);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let (s, y) = dec
            .step(
                &tape,
                &p,
                tape.constant(x.clone()),
                tape.constant(m.clone()),
                tape.constant(h.clone()),
                &tm,
            )
            .unwrap();
        ((*s.value()).clone(), (*y.value()).clone())
    }

    #[test]
    fn decoder_isolated_node_gets_zero_message() {
        let (store, dec) = decoder_setup();
        let mut r = rng();
        let g = GraphSpec::empty(2);
        let (x, m, h) = (random(&mut r, &[2, 2]), Tensor::ones([2, 2]), random(&mut r, &[2, 3]));
        let (s, _) = decode(&store, &dec, &g, &x, &m, &h);
        // γ(h, 0): tanh([h ‖ 0 ‖ 0]·W + b)
        let w = store.get(dec.update.weight);
        let b = store.get(dec.update.bias);
        for i in 0..2 {
            for c in 0..3 {
                let mut z = b.data()[c];
                for k in 0..3 {
                    z += h.get(&[i, k]) * w.get(&[k, c]);
                }
                assert!((s.get(&[i, c]) - z.tanh()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decoder_excludes_own_input() {
        let (store, dec) = decoder_setup();
        let mut r = rng();
        let g = crate::graph::GraphSpec::fully_connected(4);
        let (x, m, h) = (random(&mut r, &[4, 2]), Tensor::ones([4, 2]), random(&mut r, &[4, 3]));
        let (s0, _) = decode(&store, &dec, &g, &x, &m, &h);
        for i in 0..4 {
            let mut xp = x.clone();
            xp.set(&[i, 0], x.get(&[i, 0]) + 3.0);
            xp.set(&[i, 1], -7.0);
            let mut mp = m.clone();
            mp.set(&[i, 1], 0.0);
            let (s1, _) = decode(&store, &dec, &g, &xp, &mp, &h);
            assert_eq!(s0.row(i), s1.row(i), "node {i}");
        }
    }

    #[test]
    fn decoder_single_message_oracle() {
        let (store, dec) = decoder_setup();
        let mut r = rng();
        let g = GraphSpec::new(2, vec![Edge { source: 0, target: 1, weight: 0.4 }], true).unwrap();
        let (x, m, h) = (random(&mut r, &[2, 2]), Tensor::ones([2, 2]), random(&mut r, &[2, 3]));
        let (s, _) = decode(&store, &dec, &g, &x, &m, &h);
        let lin = |l: &Linear, input: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight);
            let b = store.get(l.bias);
            (0..l.out_features)
                .map(|c| b.data()[c] + (0..l.in_features).map(|k| input[k] * w.get(&[k, c])).sum::<f64>())
                .collect()
        };
        let msg0: Vec<f64> = lin(&dec.message, &[x.row(0), h.row(0), m.row(0)].concat())
            .into_iter()
            .map(f64::tanh)
            .collect();
        // node 1 only hears node 0 through the backward (in-degree) direction
        let input = [h.row(1), &[0.0; 3], &msg0].concat();
        let expect: Vec<f64> = lin(&dec.update, &input).into_iter().map(f64::tanh).collect();
        for c in 0..3 {
            assert!((s.get(&[1, c]) - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_cases() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mlp = FusionMlp::new(&mut store, "mlp", 4, 3, 2, &mut r);
        let inputs = random(&mut r, &[5, 4]);
        let run = |store: &ParamStore, x: &Tensor| {
            let tape = Tape::new();
            let p = store.bind_constant(&tape);
            (*mlp.forward(&tape, &p, &[tape.constant(x.clone())]).unwrap().value()).clone()
        };
        // permutation equivariance
        let perm = [3, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros([5, 4]);
        for i in 0..5 {
            for c in 0..4 {
                permuted.set(&[perm[i], c], inputs.get(&[i, c]));
            }
        }
        let (a, b) = (run(&store, &inputs), run(&store, &permuted));
        for i in 0..5 {
            assert_eq!(a.row(i), b.row(perm[i]));
        }
        // zero weights: output is the bias
        let mut zeroed = store.clone();
        *zeroed.get_mut(mlp.hidden.weight) = Tensor::zeros([4, 3]);
        *zeroed.get_mut(mlp.out.weight) = Tensor::zeros([3, 2]);
        let bias = zeroed.get(mlp.out.bias).clone();
        let out = run(&zeroed, &inputs);
        for i in 0..5 {
            assert_eq!(out.row(i), bias.data());
        }
    }

    #[test]
    fn fusion_scalar_oracle() {
        let mut store = ParamStore::new();
        let mlp = FusionMlp::new(&mut store, "mlp", 1, 1, 1, &mut rng());
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let x = 0.37;
        let out = mlp
            .forward(&tape, &p, &[tape.constant(Tensor::new([1, 1], vec![x]).unwrap())])
            .unwrap()
            .value()
            .data()[0];
        let v = |id| store.get(id).data()[0];
        let expect = (v(mlp.hidden.weight) * x + v(mlp.hidden.bias)).tanh() * v(mlp.out.weight)
            + v(mlp.out.bias);
        assert!((out - expect).abs() < 1e-12);
    }

    #[test]
    fn layers_permutation_equivariant() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cell = MpgruCell::new(&mut store, "cell", 2, 4, 2, &mut r);
        let dec = SpatialDecoder::new(&mut store, "dec", 2, 4, 4, &mut r);
        let n = 5;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && r.random_bool(0.5) {
                    edges.push(Edge { source: i, target: j, weight: r.random_range(0.1..2.0) });
                }
            }
        }
        let g = GraphSpec::new(n, edges, true).unwrap();
        let perm = [2, 4, 0, 1, 3];
        let (x, m, h) = (random(&mut r, &[n, 2]), Tensor::ones([n, 2]), random(&mut r, &[n, 4]));
        let permute = |t: &Tensor| {
            let mut out = Tensor::zeros(t.shape().to_vec());
            let c = t.cols();
            for i in 0..n {
                out.data_mut()[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(t.row(i));
            }
            out
        };
        let run = |g: &GraphSpec, x: &Tensor, m: &Tensor, h: &Tensor| {
            let tm = transition_matrices(g, 2).unwrap();
            let tmd = transition_matrices(g, 1).unwrap().without_self_loops(1);
            let tape = Tape::new();
            let p = store.bind_constant(&tape);
            let (xv, mv, hv) = (tape.constant(x.clone()), tape.constant(m.clone()), tape.constant(h.clone()));
            let hn = cell.step(&tape, &p, xv, mv, hv, &tm).unwrap().hidden.value();
            let (s, _) = dec.step(&tape, &p, xv, mv, hv, &tmd).unwrap();
            ((*hn).clone(), (*s.value()).clone())
        };
        let (h1, s1) = run(&g, &x, &m, &h);
        let (h2, s2) = run(&g.permuted(&perm), &permute(&x), &permute(&m), &permute(&h));
        assert!(permute(&h1).max_abs_diff(&h2) <= 1e-9);
        assert!(permute(&s1).max_abs_diff(&s2) <= 1e-9);
    }
}
