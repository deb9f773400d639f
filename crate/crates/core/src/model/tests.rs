use super::*;
use crate::graph::Edge;
use rand::Rng;

fn cfg(variant: Variant, d: usize, l: usize) -> ModelConfig {
    ModelConfig {
        variant,
        n_features: d,
        hidden: l,
        encoder_hops: 2,
        decoder_hops: 1,
        fusion_hidden: 5,
        learnable_h0: false,
    }
}

fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> GraphSpec {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.5) {
                edges.push(Edge { source: i, target: j, weight: rng.random_range(0.2..2.0) });
            }
        }
    }
    GraphSpec::new(n, edges, true).unwrap()
}

fn random_window(t: usize, n: usize, d: usize, p_obs: f64, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let len = t * n * d;
    let mask: Vec<f64> = (0..len).map(|_| if rng.random_bool(p_obs) { 1.0 } else { 0.0 }).collect();
    let values = (0..len).map(|_| rng.random_range(-1.5..1.5)).collect();
    (Tensor::new([t, n, d], values).unwrap(), Tensor::new([t, n, d], mask).unwrap())
}

fn zero_params(model: &mut GrinModel) {
    for t in model.params_mut().tensors_mut() {
        *t = Tensor::zeros(t.shape().to_vec());
    }
}

#[test]
fn zero_parameters_first_readout_is_bias() {
    let g = GraphSpec::fully_connected(3);
    let mut model = GrinModel::new(cfg(Variant::Full, 2, 4), &g, 1).unwrap();
    zero_params(&mut model);
    let bias = model.forward_module().readout.bias;
    *model.params_mut().get_mut(bias) = Tensor::vector(vec![0.25, -1.5]);
    let (x, m) = random_window(1, 3, 2, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    let out = model.impute(&x, &m).unwrap();
    assert_eq!(out.y1_fwd.data(), &[0.25, -1.5, 0.25, -1.5, 0.25, -1.5]);
}

#[test]
fn observed_entries_pass_through_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(4, &mut rng);
    for variant in Variant::ALL {
        let model = GrinModel::new(cfg(variant, 2, 3), &g, 5).unwrap();
        let (x, m) = random_window(6, 4, 2, 0.6, &mut rng);
        let out = model.impute(&x, &m).unwrap();
        for i in 0..x.len() {
            if m.data()[i] == 1.0 {
                assert_eq!(out.imputed.data()[i], x.data()[i], "{variant}");
            } else {
                assert_eq!(out.imputed.data()[i], out.prediction.data()[i]);
            }
        }
        let full = model.impute(&x, &Tensor::ones([6, 4, 2])).unwrap();
        assert_eq!(full.imputed, x);
    }
}

#[test]
fn node_count_mismatch_is_dimension_error() {
    let model = GrinModel::new(cfg(Variant::Full, 1, 2), &GraphSpec::fully_connected(3), 0).unwrap();
    let (x, m) = random_window(2, 4, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(model.impute(&x, &m), Err(GrinError::Dimension { .. })));
}

// Dense, loop-based re-derivation of the full bidirectional model.
mod oracle {
    use super::*;

    pub type Mat = Vec<Vec<f64>>;

    pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
        let w = store.get(store.find(&format!("{name}.weight")).unwrap());
        let b = store.get(store.find(&format!("{name}.bias")).unwrap());
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(rows, x.len(), "{name}");
        (0..cols)
            .map(|c| b.data()[c] + (0..rows).map(|r| x[r] * w.data()[r * cols + c]).sum::<f64>())
            .collect()
    }

    pub fn propagate(t: &Mat, z: &Mat) -> Mat {
        let n = t.len();
        let c = z[0].len();
        (0..n)
            .map(|i| (0..c).map(|k| (0..n).map(|j| t[i][j] * z[j][k]).sum()).collect())
            .collect()
    }

    fn dconv(store: &ParamStore, name: &str, z: &Mat, tf: &Mat, tb: &Mat) -> Mat {
        let f1 = propagate(tf, z);
        let f2 = propagate(tf, &f1);
        let b1 = propagate(tb, z);
        let b2 = propagate(tb, &b1);
        (0..z.len())
            .map(|i| {
                let row = [&z[i][..], &f1[i], &f2[i], &b1[i], &b2[i]].concat();
                linear(store, name, &row)
            })
            .collect()
    }

    pub struct Dir {
        pub y1: Vec<Mat>,
        pub y2: Vec<Mat>,
        pub s: Vec<Mat>,
        pub h_prev: Vec<Mat>,
    }

    #[allow(clippy::too_many_arguments)]
    pub fn direction(
        store: &ParamStore,
        prefix: &str,
        x: &[Mat],
        m: &[Mat],
        tf: &Mat,
        tb: &Mat,
        l: usize,
        order: &[usize],
    ) -> Dir {
        let n = tf.len();
        let steps = x.len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let fill = |x: &Mat, m: &Mat, y: &Mat| -> Mat {
            (0..n)
                .map(|i| (0..x[i].len()).map(|f| if m[i][f] == 1.0 { x[i][f] } else { y[i][f] }).collect())
                .collect()
        };
        // decoder operators: same transitions with the diagonal dropped
        let nodiag = |t: &Mat| -> Mat {
            (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { t[i][j] }).collect()).collect()
        };
        let (df, db) = (nodiag(tf), nodiag(tb));
        let mut h: Mat = vec![vec![0.0; l]; n];
        let mut dir = Dir {
            y1: vec![vec![]; steps],
            y2: vec![vec![]; steps],
            s: vec![vec![]; steps],
            h_prev: vec![vec![]; steps],
        };
        for &t in order {
            let y1: Mat = (0..n).map(|i| linear(store, &format!("{prefix}.readout"), &h[i])).collect();
            let x1 = fill(&x[t], &m[t], &y1);
            let msg: Mat = (0..n)
                .map(|j| {
                    let input = [&x1[j][..], &h[j], &m[t][j]].concat();
                    linear(store, &format!("{prefix}.decoder.message"), &input)
                        .into_iter()
                        .map(f64::tanh)
                        .collect()
                })
                .collect();
            let (af, ab) = (propagate(&df, &msg), propagate(&db, &msg));
            let s: Mat = (0..n)
                .map(|i| {
                    let input = [&h[i][..], &af[i], &ab[i]].concat();
                    linear(store, &format!("{prefix}.decoder.update"), &input)
                        .into_iter()
                        .map(f64::tanh)
                        .collect()
                })
                .collect();
            let y2: Mat = (0..n)
                .map(|i| linear(store, &format!("{prefix}.decoder.readout"), &[&s[i][..], &h[i]].concat()))
                .collect();
            let x2 = fill(&x[t], &m[t], &y2);
            let z: Mat = (0..n).map(|i| [&x2[i][..], &m[t][i], &h[i]].concat()).collect();
            let r = dconv(store, &format!("{prefix}.cell.reset"), &z, tf, tb);
            let u = dconv(store, &format!("{prefix}.cell.update"), &z, tf, tb);
            let zr: Mat = (0..n)
                .map(|i| {
                    let rh: Vec<f64> = (0..l).map(|k| sig(r[i][k]) * h[i][k]).collect();
                    [&x2[i][..], &m[t][i], &rh].concat()
                })
                .collect();
            let c = dconv(store, &format!("{prefix}.cell.candidate"), &zr, tf, tb);
            let next: Mat = (0..n)
                .map(|i| {
                    (0..l)
                        .map(|k| {
                            let ug = sig(u[i][k]);
                            ug * h[i][k] + (1.0 - ug) * c[i][k].tanh()
                        })
                        .collect()
                })
                .collect();
            dir.y1[t] = y1;
            dir.y2[t] = y2;
            dir.s[t] = s;
            dir.h_prev[t] = h;
            h = next;
        }
        dir
    }
}

#[test]
fn manual_unrolling_oracle() {
    let (n, d, l, steps) = (2, 1, 1, 2);
    let g = GraphSpec::new(2, vec![Edge { source: 0, target: 1, weight: 2.0 }], true).unwrap();
    let model = GrinModel::new(cfg(Variant::Full, d, l), &g, 17).unwrap();
    let x = Tensor::new([steps, n, d], vec![0.3, -0.8, 1.1, 0.4]).unwrap();
    let m = Tensor::new([steps, n, d], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let out = model.impute(&x, &m).unwrap();

    // W = [[0, 2], [0, 0]]: the forward operator moves node 1 to node 0,
    // the backward operator node 0 to node 1
    let tf = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
    let tb = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    let mat = |t: &Tensor, s: usize| -> oracle::Mat {
        (0..n).map(|i| (0..d).map(|f| t.data()[(s * n + i) * d + f]).collect()).collect()
    };
    let xs: Vec<_> = (0..steps).map(|s| mat(&x, s)).collect();
    let ms: Vec<_> = (0..steps).map(|s| mat(&m, s)).collect();
    let store = model.params();
    let f = oracle::direction(store, "fwd", &xs, &ms, &tf, &tb, l, &[0, 1]);
    let b = oracle::direction(store, "bwd", &xs, &ms, &tf, &tb, l, &[1, 0]);
    let check = |got: &Tensor, want: &[oracle::Mat]| {
        for s in 0..steps {
            for i in 0..n {
                for c in 0..d {
                    let g = got.data()[(s * n + i) * d + c];
                    assert!((g - want[s][i][c]).abs() < 1e-12, "step {s} node {i}: {g} vs {}", want[s][i][c]);
                }
            }
        }
    };
    check(&out.y1_fwd, &f.y1);
    check(out.y2_fwd.as_ref().unwrap(), &f.y2);
    check(out.y1_bwd.as_ref().unwrap(), &b.y1);
    check(out.y2_bwd.as_ref().unwrap(), &b.y2);
    let fused: Vec<oracle::Mat> = (0..steps)
        .map(|s| {
            (0..n)
                .map(|i| {
                    let input = [&f.s[s][i][..], &f.h_prev[s][i], &b.s[s][i], &b.h_prev[s][i]].concat();
                    let hidden: Vec<f64> = oracle::linear(store, "fusion.hidden", &input)
                        .into_iter()
                        .map(f64::tanh)
                        .collect();
                    oracle::linear(store, "fusion.out", &hidden)
                })
                .collect()
        })
        .collect();
    check(&out.prediction, &fused);
}

#[test]
fn loss_examples() {
    let g = GraphSpec::fully_connected(2);
    let model = GrinModel::new(cfg(Variant::Full, 2, 3), &g, 4).unwrap();
    let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = Tensor::new([1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let perfect = ImputationOutput {
        prediction: x.clone(),
        imputed: x.clone(),
        y1_fwd: x.clone(),
        y2_fwd: Some(x.clone()),
        y1_bwd: Some(x.clone()),
        y2_bwd: Some(x.clone()),
    };
    assert_eq!(model.training_loss(&perfect, &x, &m).unwrap(), 0.0);
    // errors (1, 3) at the only evaluated node-step: (1 + 3) / 2 per stage
    let y = Tensor::new([1, 2, 2], vec![2.0, -1.0, 50.0, 50.0]).unwrap();
    let off = ImputationOutput {
        prediction: y.clone(),
        imputed: y.clone(),
        y1_fwd: y.clone(),
        y2_fwd: Some(y.clone()),
        y1_bwd: Some(y.clone()),
        y2_bwd: Some(y),
    };
    assert_eq!(model.training_loss(&off, &x, &m).unwrap(), 5.0 * 2.0);
}

fn tape_loss(model: &GrinModel, x: &Tensor, input: &Tensor, target: &Tensor) -> f64 {
    let batch = model
        .batch(&[WindowInput { values: x, input_mask: input, target_mask: target }])
        .unwrap();
    let tape = Tape::new();
    let p = model.params().bind_constant(&tape);
    let trace = model.forward(&tape, &p, &batch).unwrap();
    let v = model.loss(&tape, &trace, &batch).unwrap().loss.value().data()[0];
    v
}

#[test]
fn tape_loss_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_graph(3, &mut rng);
    for variant in Variant::ALL {
        let model = GrinModel::new(cfg(variant, 2, 3), &g, 2).unwrap();
        let (x, m) = random_window(4, 3, 2, 0.7, &mut rng);
        let out = model.impute(&x, &m).unwrap();
        let direct = model.training_loss(&out, &x, &m).unwrap();
        let taped = tape_loss(&model, &x, &m, &m);
        assert!((direct - taped).abs() < 1e-12 * direct.max(1.0), "{variant}");
    }
}

#[test]
fn unobserved_values_do_not_affect_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = random_graph(4, &mut rng);
    let model = GrinModel::new(cfg(Variant::Full, 2, 3), &g, 3).unwrap();
    let (x, m) = random_window(5, 4, 2, 0.6, &mut rng);
    let before = tape_loss(&model, &x, &m, &m);
    let mut x2 = x.clone();
    for (v, &mv) in x2.data_mut().iter_mut().zip(m.data()) {
        if mv == 0.0 {
            *v = 1e6;
        }
    }
    assert_eq!(before.to_bits(), tape_loss(&model, &x2, &m, &m).to_bits());
}

#[test]
fn empty_target_mask_gives_zero_loss() {
    let g = GraphSpec::fully_connected(2);
    let model = GrinModel::new(cfg(Variant::Full, 1, 2), &g, 3).unwrap();
    let (x, m) = random_window(3, 2, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let none = Tensor::zeros([3, 2, 1]);
    assert_eq!(tape_loss(&model, &x, &m, &none), 0.0);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = random_graph(4, &mut rng);
    let mut c = cfg(Variant::Full, 2, 3);
    c.learnable_h0 = true;
    let model = GrinModel::new(c, &g, 8).unwrap();
    let bytes = model.save_checkpoint();
    let loaded = GrinModel::load_checkpoint(&bytes, &g).unwrap();
    assert_eq!(loaded.params(), model.params());
    assert_eq!(loaded.save_checkpoint(), bytes);
    let (x, m) = random_window(3, 4, 2, 0.5, &mut rng);
    assert_eq!(loaded.impute(&x, &m).unwrap(), model.impute(&x, &m).unwrap());
}

#[test]
fn checkpoint_rejects_other_graphs() {
    let g = GraphSpec::fully_connected(3);
    let bytes = GrinModel::new(cfg(Variant::Full, 1, 2), &g, 0).unwrap().save_checkpoint();
    let err = GrinModel::load_checkpoint(&bytes, &GraphSpec::fully_connected(4)).unwrap_err();
    assert!(matches!(err, GrinError::Incompatible(_)));
    let mut edges = g.edges.clone();
    edges[0].weight = 0.5;
    let reweighted = GraphSpec::new(3, edges, true).unwrap();
    let err = GrinModel::load_checkpoint(&bytes, &reweighted).unwrap_err();
    assert!(err.to_string().contains("fingerprint"), "{err}");
    assert!(GrinModel::load_checkpoint(&bytes[..bytes.len() - 3], &g).is_err());
    assert!(GrinModel::load_checkpoint(b"NOTACKPT", &g).is_err());
}

#[test]
fn full_reduces_to_no_decoder_when_readouts_are_silenced() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = random_graph(4, &mut rng);
    let (d, l) = (2, 3);
    let mut full = GrinModel::new(cfg(Variant::Full, d, l), &g, 1).unwrap();
    let mut plain = GrinModel::new(cfg(Variant::NoSpatialDecoder, d, l), &g, 2).unwrap();
    for dir in ["fwd", "bwd"] {
        for name in ["readout.weight", "readout.bias", "decoder.readout.weight", "decoder.readout.bias"] {
            let id = full.params().find(&format!("{dir}.{name}")).unwrap();
            let t = full.params_mut().get_mut(id);
            *t = Tensor::zeros(t.shape().to_vec());
        }
    }
    // share encoder weights and the fusion output layer
    let shared: Vec<(String, Tensor)> = plain
        .params()
        .iter()
        .filter(|(n, _)| !n.starts_with("fusion.hidden.weight"))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    for (name, _) in &shared {
        let src = full.params().get(full.params().find(name).unwrap()).clone();
        let id = plain.params().find(name).unwrap();
        *plain.params_mut().get_mut(id) = src;
    }
    // full fusion reads [s_f ‖ h_f ‖ s_b ‖ h_b]; keep only the hidden-state rows
    let fid = full.params().find("fusion.hidden.weight").unwrap();
    let pid = plain.params().find("fusion.hidden.weight").unwrap();
    let fh = full.params().get(fid).clone();
    let cols = fh.cols();
    let mut silenced = fh.clone();
    let mut reduced = Vec::new();
    for r in 0..4 * l {
        let block = r / l;
        if block == 0 || block == 2 {
            silenced.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
        } else {
            reduced.extend_from_slice(fh.row(r));
        }
    }
    *full.params_mut().get_mut(fid) = silenced;
    *plain.params_mut().get_mut(pid) = Tensor::new([2 * l, cols], reduced).unwrap();

    let (x, m) = random_window(5, 4, d, 0.6, &mut rng);
    let a = full.impute(&x, &m).unwrap();
    let b = plain.impute(&x, &m).unwrap();
    assert!(a.prediction.max_abs_diff(&b.prediction) < 1e-14);
}

#[test]
fn whole_model_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 6;
    let g = random_graph(n, &mut rng);
    let perm = [3, 5, 0, 1, 4, 2];
    let (x, m) = random_window(4, n, 2, 0.6, &mut rng);
    let permute = |t: &Tensor| {
        let mut out = t.clone();
        let d = 2;
        for s in 0..4 {
            for i in 0..n {
                for f in 0..d {
                    out.data_mut()[(s * n + perm[i]) * d + f] = t.data()[(s * n + i) * d + f];
                }
            }
        }
        out
    };
    for variant in Variant::ALL {
        let model = GrinModel::new(cfg(variant, 2, 4), &g, 6).unwrap();
        let mut moved = GrinModel::new(cfg(variant, 2, 4), &g.permuted(&perm), 0).unwrap();
        moved.params_mut().load_values(model.params().tensors().to_vec()).unwrap();
        let a = model.impute(&x, &m).unwrap();
        let b = moved.impute(&permute(&x), &permute(&m)).unwrap();
        assert!(permute(&a.prediction).max_abs_diff(&b.prediction) <= 1e-9, "{variant}");
    }
}

#[test]
fn batched_windows_match_single_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let g = random_graph(3, &mut rng);
    let model = GrinModel::new(cfg(Variant::Full, 1, 3), &g, 6).unwrap();
    let w: Vec<_> = (0..3).map(|_| random_window(4, 3, 1, 0.6, &mut rng)).collect();
    let inputs: Vec<_> = w
        .iter()
        .map(|(x, m)| WindowInput { values: x, input_mask: m, target_mask: m })
        .collect();
    let batched = model.impute_batch(&model.batch(&inputs).unwrap()).unwrap();
    for ((x, m), out) in w.iter().zip(&batched) {
        let single = model.impute(x, m).unwrap();
        assert!(single.prediction.max_abs_diff(&out.prediction) < 1e-14);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let g = random_graph(3, &mut rng);
    for variant in Variant::ALL {
        let mut c = cfg(variant, 2, 3);
        c.learnable_h0 = true;
        let mut model = GrinModel::new(c, &g, 7).unwrap();
        let (x, m) = random_window(3, 3, 2, 0.6, &mut rng);
        let batch = model.batch(&[WindowInput { values: &x, input_mask: &m, target_mask: &m }]).unwrap();
        let proj: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights = |t: usize| Tensor::new([3, 2], proj[t * 6..(t + 1) * 6].to_vec()).unwrap();

        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let trace = model.forward(&tape, &p, &batch).unwrap();
        let mut total = tape.constant(Tensor::scalar(0.0));
        for term in trace.loss_terms(variant) {
            for (t, y) in term.iter().enumerate() {
                total = total.add(y.mul(tape.constant(weights(t))).unwrap().sum()).unwrap();
            }
        }
        let grads = tape.backward(total).unwrap();
        let analytic: Vec<Tensor> = p.vars().iter().map(|v| grads.wrt(*v)).collect();

        let objective = |model: &GrinModel| {
            let out = model.impute_batch(&batch).unwrap().pop().unwrap();
            out.loss_terms(variant)
                .iter()
                .map(|y| y.data().iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let h = 1e-6;
        for (k, a) in analytic.iter().enumerate() {
            for j in 0..a.len() {
                let orig = model.params().tensors()[k].data()[j];
                model.params_mut().tensors_mut()[k].data_mut()[j] = orig + h;
                let up = objective(&model);
                model.params_mut().tensors_mut()[k].data_mut()[j] = orig - h;
                let down = objective(&model);
                model.params_mut().tensors_mut()[k].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let g = a.data()[j];
                // central differences carry ~1e-10 of rounding noise at this step
                assert!((g - numeric).abs() <= 1e-5 * g.abs().max(numeric.abs()) + 1e-8, "{variant} {} [{j}]: {g} vs {numeric}", model.params().name(ParamId(k)));
            }
        }
    }
}
