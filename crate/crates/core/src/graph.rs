//! Sensor graphs: construction from distances or series similarity, and the
//! diffusion transition matrices used by the message-passing layers.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GrinError, Result};
use crate::tensor::{CsrMatrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Fixed weighted graph over `n_nodes` sensors.
///
/// Edges are unique `(source, target)` pairs without self-loops, with finite
/// non-negative weights. Undirected graphs store both orientations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
    pub directed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_ids: Option<Vec<String>>,
}

impl GraphSpec {
    pub fn new(n_nodes: usize, edges: Vec<Edge>, directed: bool) -> Result<Self> {
        let g = GraphSpec {
            n_nodes,
            edges,
            directed,
            node_ids: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn empty(n_nodes: usize) -> Self {
        GraphSpec {
            n_nodes,
            edges: Vec::new(),
            directed: false,
            node_ids: None,
        }
    }

    /// Every ordered pair of distinct nodes, unit weight.
    pub fn fully_connected(n_nodes: usize) -> Self {
        let edges = (0..n_nodes)
            .flat_map(|i| (0..n_nodes).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(source, target)| Edge {
                source,
                target,
                weight: 1.0,
            })
            .collect();
        GraphSpec {
            n_nodes,
            edges,
            directed: false,
            node_ids: None,
        }
    }

    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_nodes {
            return Err(GrinError::Validation(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.n_nodes
            )));
        }
        self.node_ids = Some(ids);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            if e.source >= self.n_nodes || e.target >= self.n_nodes {
                return Err(GrinError::Validation(format!(
                    "edge ({}, {}) references a node outside 0..{}",
                    e.source, e.target, self.n_nodes
                )));
            }
            if e.source == e.target {
                return Err(GrinError::Validation(format!("self-loop at node {}", e.source)));
            }
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(GrinError::Validation(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.source, e.target, e.weight
                )));
            }
            if !seen.insert((e.source, e.target)) {
                return Err(GrinError::Validation(format!(
                    "duplicate edge ({}, {})",
                    e.source, e.target
                )));
            }
        }
        Ok(())
    }

    /// Weighted adjacency `W` with `W[source, target] = weight`.
    pub fn adjacency(&self) -> CsrMatrix {
        CsrMatrix::from_triplets(
            self.n_nodes,
            self.n_nodes,
            self.edges.iter().map(|e| (e.source, e.target, e.weight)),
        )
        .expect("validated graph")
    }

    /// Edges sorted by `(source, target)`.
    pub fn sorted_edges(&self) -> Vec<Edge> {
        let mut edges = self.edges.clone();
        edges.sort_by_key(|e| (e.source, e.target));
        edges
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> GraphSpec {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                source: perm[e.source],
                target: perm[e.target],
                weight: e.weight,
            })
            .collect();
        GraphSpec {
            n_nodes: self.n_nodes,
            edges,
            directed: self.directed,
            node_ids: None,
        }
    }

    /// SHA-256 over the node count and the sorted edge list, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_nodes as u64).to_le_bytes());
        for e in self.sorted_edges() {
            h.update((e.source as u64).to_le_bytes());
            h.update((e.target as u64).to_le_bytes());
            h.update(e.weight.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes `source,target,weight` rows, sorted.
    pub fn write_edge_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["source", "target", "weight"])?;
        for e in self.sorted_edges() {
            w.write_record([
                e.source.to_string(),
                e.target.to_string(),
                format!("{:?}", e.weight),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an edge list. Node count is `n_nodes` when given, otherwise one
    /// past the largest index.
    pub fn read_edge_csv<R: Read>(reader: R, n_nodes: Option<usize>, directed: bool) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let expected = ["source", "target", "weight"];
        if header.iter().map(str::trim).ne(expected) {
            return Err(GrinError::ingest(
                "edge list header",
                format!("expected source,target,weight, found {:?}", header),
            ));
        }
        let mut edges = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let loc = |col: usize| format!("edge list row {}, column {}", row + 2, col + 1);
            let parse_idx = |col: usize| -> Result<usize> {
                rec.get(col)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|_| GrinError::ingest(loc(col), "expected a node index"))
            };
            let weight: f64 = rec
                .get(2)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| GrinError::ingest(loc(2), "expected a numeric weight"))?;
            edges.push(Edge {
                source: parse_idx(0)?,
                target: parse_idx(1)?,
                weight,
            });
        }
        let inferred = edges
            .iter()
            .map(|e| e.source.max(e.target) + 1)
            .max()
            .unwrap_or(0);
        let n = n_nodes.unwrap_or(inferred);
        if inferred > n {
            return Err(GrinError::ingest(
                "edge list",
                format!("references node {} but the dataset has {n} nodes", inferred - 1),
            ));
        }
        GraphSpec::new(n, edges, directed)
    }
}

/// Forward (out-degree normalised `W`) and backward (normalised `Wᵀ`)
/// transition matrices.
#[derive(Clone, Debug)]
pub struct TransitionMatrices {
    pub forward: Arc<CsrMatrix>,
    pub backward: Arc<CsrMatrix>,
    pub max_hops: usize,
}

impl TransitionMatrices {
    pub fn n_nodes(&self) -> usize {
        self.forward.n_rows()
    }

    /// Same operator applied independently to `copies` stacked graphs.
    pub fn batched(&self, copies: usize) -> TransitionMatrices {
        TransitionMatrices {
            forward: Arc::new(self.forward.block_diagonal(copies)),
            backward: Arc::new(self.backward.block_diagonal(copies)),
            max_hops: self.max_hops,
        }
    }

    /// Copy restricted to `hops` with self-transitions removed.
    pub fn without_self_loops(&self, hops: usize) -> TransitionMatrices {
        TransitionMatrices {
            forward: Arc::new(self.forward.without_diagonal()),
            backward: Arc::new(self.backward.without_diagonal()),
            max_hops: hops,
        }
    }
}

pub fn transition_matrices(g: &GraphSpec, max_hops: usize) -> Result<TransitionMatrices> {
    if max_hops == 0 {
        return Err(GrinError::Parameter("diffusion needs at least one hop".into()));
    }
    g.validate()?;
    let w = g.adjacency();
    Ok(TransitionMatrices {
        forward: Arc::new(w.row_normalized()),
        backward: Arc::new(w.transpose().row_normalized()),
        max_hops,
    })
}

fn square_matrix(t: &Tensor, what: &str) -> Result<usize> {
    match t.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(GrinError::Validation(format!("{what} must be square, got {s:?}"))),
    }
}

/// Thresholded Gaussian kernel: `w = exp(-d²/gamma)` for `d <= delta`.
/// Infinite distances mark unreachable pairs.
///
/// ```
/// use grin::graph::gaussian_kernel_adjacency;
/// use grin::tensor::Tensor;
///
/// let d = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
/// let g = gaussian_kernel_adjacency(&d, 1.0, 2.0).unwrap();
/// assert_eq!(g.edges.len(), 2);
/// assert!((g.edges[0].weight - (-1.0f64).exp()).abs() < 1e-15);
/// ```
pub fn gaussian_kernel_adjacency(dist: &Tensor, gamma: f64, delta: f64) -> Result<GraphSpec> {
    let n = square_matrix(dist, "distance matrix")?;
    if !(gamma > 0.0) {
        return Err(GrinError::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    if !(delta >= 0.0) {
        return Err(GrinError::Parameter(format!("delta must be non-negative, got {delta}")));
    }
    for i in 0..n {
        for j in 0..n {
            let d = dist.get(&[i, j]);
            if d.is_nan() || d < 0.0 {
                return Err(GrinError::Validation(format!("invalid distance {d} at ({i}, {j})")));
            }
            if d != dist.get(&[j, i]) {
                return Err(GrinError::Validation(format!(
                    "distance matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let d = dist.get(&[i, j]);
            if i != j && d <= delta {
                edges.push(Edge {
                    source: i,
                    target: j,
                    weight: (-d * d / gamma).exp(),
                });
            }
        }
    }
    GraphSpec::new(n, edges, false)
}

/// Options for [`correntropy_knn_graph`].
#[derive(Clone, Copy, Debug, Default)]
pub struct CorrentropyOptions {
    /// Kernel width; defaults to the standard deviation of all pairwise
    /// sample differences.
    pub sigma: Option<f64>,
    /// Segment length; defaults to the whole series.
    pub segment_len: Option<usize>,
}

/// Segment-averaged correntropy between every pair of columns of `series`
/// (`T x N`). With a mask, only samples observed in both series count.
pub fn correntropy_matrix(
    series: &Tensor,
    mask: Option<&Tensor>,
    opts: CorrentropyOptions,
) -> Result<Tensor> {
    let [t_len, n] = *series.shape() else {
        return Err(GrinError::dim("correntropy", series.shape(), &[0, 0]));
    };
    if let Some(m) = mask {
        if m.shape() != series.shape() {
            return Err(GrinError::dim("correntropy mask", m.shape(), series.shape()));
        }
    }
    let seen = |t: usize, i: usize| mask.map_or(true, |m| m.get(&[t, i]) != 0.0);
    for t in 0..t_len {
        for i in 0..n {
            if seen(t, i) && !series.get(&[t, i]).is_finite() {
                return Err(GrinError::Validation(format!(
                    "non-finite sample at row {t}, series {i}"
                )));
            }
        }
    }
    let seg = opts.segment_len.unwrap_or(t_len);
    if seg == 0 || seg > t_len {
        return Err(GrinError::Parameter(format!(
            "segment length {seg} must be in 1..={t_len}"
        )));
    }
    let sigma = match opts.sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(GrinError::Parameter(format!("sigma must be positive, got {s}"))),
        None => pairwise_difference_std(series, &seen, t_len, n),
    };
    let denom = 2.0 * sigma * sigma;
    let mut sim = Tensor::zeros([n, n]);
    for i in 0..n {
        sim.set(&[i, i], 1.0);
        for j in (i + 1)..n {
            let mut seg_total = 0.0;
            let mut seg_count = 0usize;
            let mut start = 0;
            while start < t_len {
                let end = (start + seg).min(t_len);
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for t in start..end {
                    if seen(t, i) && seen(t, j) {
                        let d = series.get(&[t, i]) - series.get(&[t, j]);
                        acc += (-d * d / denom).exp();
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    seg_total += acc / cnt as f64;
                    seg_count += 1;
                }
                start = end;
            }
            let s = if seg_count > 0 { seg_total / seg_count as f64 } else { 0.0 };
            sim.set(&[i, j], s);
            sim.set(&[j, i], s);
        }
    }
    Ok(sim)
}

fn pairwise_difference_std(
    series: &Tensor,
    seen: &dyn Fn(usize, usize) -> bool,
    t_len: usize,
    n: usize,
) -> f64 {
    let (mut count, mut mean, mut m2) = (0f64, 0f64, 0f64);
    for t in 0..t_len {
        for i in 0..n {
            for j in (i + 1)..n {
                if seen(t, i) && seen(t, j) {
                    let d = series.get(&[t, i]) - series.get(&[t, j]);
                    count += 1.0;
                    let delta = d - mean;
                    mean += delta / count;
                    m2 += delta * (d - mean);
                }
            }
        }
    }
    let std = if count > 1.0 { (m2 / count).sqrt() } else { 0.0 };
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// Directed k-nearest-neighbour graph from a similarity matrix: node `i`
/// links to its `k` most similar other nodes. Ties go to the smaller index.
pub fn knn_from_similarity(sim: &Tensor, k: usize) -> Result<GraphSpec> {
    let n = square_matrix(sim, "similarity matrix")?;
    if k >= n {
        return Err(GrinError::Parameter(format!("k = {k} must be smaller than N = {n}")));
    }
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            sim.get(&[i, b])
                .total_cmp(&sim.get(&[i, a]))
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            edges.push(Edge {
                source: i,
                target: j,
                weight: sim.get(&[i, j]),
            });
        }
    }
    GraphSpec::new(n, edges, true)
}

/// Correntropy similarity followed by a directed k-NN selection.
pub fn correntropy_knn_graph(
    series: &Tensor,
    mask: Option<&Tensor>,
    k: usize,
    opts: CorrentropyOptions,
) -> Result<GraphSpec> {
    let n = series.shape().get(1).copied().unwrap_or(0);
    if k >= n {
        return Err(GrinError::Parameter(format!("k = {k} must be smaller than N = {n}")));
    }
    let sim = correntropy_matrix(series, mask, opts)?;
    knn_from_similarity(&sim, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist_from_points(points: &[(f64, f64)]) -> Tensor {
        let n = points.len();
        let mut d = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                d.set(&[i, j], (dx * dx + dy * dy).sqrt());
            }
        }
        d
    }

    #[test]
    fn kernel_threshold_and_values() {
        let d = Tensor::from_rows(&[
            vec![0.0, 5.0, 5.0],
            vec![5.0, 0.0, 0.0],
            vec![5.0, 0.0, 0.0],
        ])
        .unwrap();
        assert!(gaussian_kernel_adjacency(&d, 1.0, 4.0)
            .unwrap()
            .edges
            .iter()
            .all(|e| (e.source, e.target) == (1, 2) || (e.source, e.target) == (2, 1)));
        let g = gaussian_kernel_adjacency(&d, 1.0, 0.5).unwrap();
        assert_eq!(g.adjacency().get(1, 2), 1.0);
        assert!(gaussian_kernel_adjacency(&d, 1.0, 1.0e-3)
            .unwrap()
            .edges
            .iter()
            .all(|e| e.weight == 1.0));
        let far = gaussian_kernel_adjacency(&d.map(|v| v + 10.0), 1.0, 2.0);
        // off-diagonal zeros became 10, diagonal is no longer zero but is skipped
        assert!(far.unwrap().edges.is_empty());

        let unit = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let w = gaussian_kernel_adjacency(&unit, 1.0, 2.0).unwrap().adjacency().get(0, 1);
        assert!((w - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_bad_matrices() {
        let asym = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert!(matches!(
            gaussian_kernel_adjacency(&asym, 1.0, 1.0),
            Err(GrinError::Validation(_))
        ));
        let neg = Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(gaussian_kernel_adjacency(&neg, 1.0, 1.0).is_err());
        let ok = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            gaussian_kernel_adjacency(&ok, 0.0, 1.0),
            Err(GrinError::Parameter(_))
        ));
    }

    #[test]
    fn transitions_two_node_and_isolated() {
        let g = GraphSpec::new(
            3,
            vec![
                Edge { source: 0, target: 1, weight: 1.0 },
                Edge { source: 1, target: 0, weight: 1.0 },
            ],
            false,
        )
        .unwrap();
        let tm = transition_matrices(&g, 1).unwrap();
        assert_eq!(tm.forward.get(0, 1), 1.0);
        assert_eq!(tm.forward.get(1, 0), 1.0);
        assert_eq!(tm.backward.get(0, 1), 1.0);
        assert_eq!(tm.forward.row(2).count(), 0);
        assert_eq!(tm.backward.row(2).count(), 0);
        assert!(transition_matrices(&g, 0).is_err());
    }

    #[test]
    fn transitions_directed_rows_match_dense_normalisation() {
        let g = GraphSpec::new(
            3,
            vec![
                Edge { source: 0, target: 1, weight: 2.0 },
                Edge { source: 0, target: 2, weight: 3.0 },
                Edge { source: 2, target: 1, weight: 0.5 },
            ],
            true,
        )
        .unwrap();
        let tm = transition_matrices(&g, 2).unwrap();
        let dense = g.adjacency().to_dense();
        for i in 0..3 {
            let out: f64 = (0..3).map(|j| dense.get(&[i, j])).sum();
            let inn: f64 = (0..3).map(|j| dense.get(&[j, i])).sum();
            for j in 0..3 {
                let f = if out > 0.0 { dense.get(&[i, j]) / out } else { 0.0 };
                let b = if inn > 0.0 { dense.get(&[j, i]) / inn } else { 0.0 };
                assert_eq!(tm.forward.get(i, j), f);
                assert_eq!(tm.backward.get(i, j), b);
            }
        }
        let sums = tm.forward.row_sums();
        assert_eq!(sums, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn graph_invariants_rejected() {
        let e = |s, t, w| Edge { source: s, target: t, weight: w };
        assert!(GraphSpec::new(2, vec![e(0, 0, 1.0)], true).is_err());
        assert!(GraphSpec::new(2, vec![e(0, 1, -1.0)], true).is_err());
        assert!(GraphSpec::new(2, vec![e(0, 2, 1.0)], true).is_err());
        assert!(GraphSpec::new(2, vec![e(0, 1, 1.0), e(0, 1, 2.0)], true).is_err());
    }

    #[test]
    fn correntropy_identical_and_ordering() {
        // series 0 and 1 identical, series 2 far away
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|t| {
                let v = (t as f64).sin();
                vec![v, v, v + 50.0]
            })
            .collect();
        let s = Tensor::from_rows(&rows).unwrap();
        let sim = correntropy_matrix(&s, None, CorrentropyOptions::default()).unwrap();
        assert_eq!(sim.get(&[0, 1]), 1.0);
        let g = correntropy_knn_graph(&s, None, 1, CorrentropyOptions::default()).unwrap();
        let targets: Vec<_> = g.sorted_edges().iter().map(|e| (e.source, e.target)).collect();
        assert_eq!(targets, vec![(0, 1), (1, 0), (2, 0)]);
        assert!(matches!(
            correntropy_knn_graph(&s, None, 3, CorrentropyOptions::default()),
            Err(GrinError::Parameter(_))
        ));
    }

    #[test]
    fn correntropy_brute_force_four_series() {
        let rows = vec![
            vec![0.0, 1.0, 0.5, 2.0],
            vec![0.2, 0.8, 0.4, 2.5],
            vec![0.1, 1.2, 0.6, 1.5],
            vec![-0.3, 0.9, 0.2, 2.2],
        ];
        let s = Tensor::from_rows(&rows).unwrap();
        let opts = CorrentropyOptions { sigma: Some(0.7), segment_len: Some(2) };
        let sim = correntropy_matrix(&s, None, opts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let seg = |range: std::ops::Range<usize>| {
                    let len = range.len() as f64;
                    range
                        .map(|t| {
                            let d: f64 = rows[t][i] - rows[t][j];
                            (-d * d / (2.0 * 0.7 * 0.7)).exp()
                        })
                        .sum::<f64>()
                        / len
                };
                let expect = if i == j { 1.0 } else { (seg(0..2) + seg(2..4)) / 2.0 };
                assert_eq!(sim.get(&[i, j]), expect, "({i}, {j})");
            }
        }
    }

    #[test]
    fn correntropy_rejects_nan_unless_masked() {
        let s = Tensor::from_rows(&[vec![0.0, f64::NAN], vec![1.0, 1.0]]).unwrap();
        assert!(correntropy_matrix(&s, None, CorrentropyOptions::default()).is_err());
        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let sim = correntropy_matrix(&s, Some(&m), CorrentropyOptions::default()).unwrap();
        assert_eq!(sim.get(&[0, 1]), 1.0);
    }

    #[test]
    fn edge_csv_round_trip() {
        let g = gaussian_kernel_adjacency(
            &dist_from_points(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.3)]),
            1.0,
            1.2,
        )
        .unwrap();
        let mut buf = Vec::new();
        g.write_edge_csv(&mut buf).unwrap();
        let back = GraphSpec::read_edge_csv(buf.as_slice(), Some(3), false).unwrap();
        assert_eq!(back.sorted_edges(), g.sorted_edges());
        assert_eq!(back.fingerprint(), g.fingerprint());
    }

    #[test]
    fn empty_edge_csv_is_header_only() {
        let mut buf = Vec::new();
        GraphSpec::empty(3).write_edge_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "source,target,weight\n");
    }

    proptest! {
        #[test]
        fn kernel_symmetric_bounded_and_equivariant(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..7),
            delta in 0.0f64..4.0,
            seed in 0u64..1000,
        ) {
            let d = dist_from_points(&pts);
            let g = gaussian_kernel_adjacency(&d, 1.5, delta).unwrap();
            let a = g.adjacency();
            for e in &g.edges {
                prop_assert!(e.weight > 0.0 && e.weight <= 1.0);
                prop_assert_eq!(a.get(e.target, e.source), e.weight);
            }
            // permute the points, rebuild, compare with relabelled edges
            let n = pts.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut permuted = vec![(0.0, 0.0); n];
            for i in 0..n {
                permuted[perm[i]] = pts[i];
            }
            let gp = gaussian_kernel_adjacency(&dist_from_points(&permuted), 1.5, delta).unwrap();
            prop_assert_eq!(gp.sorted_edges(), g.permuted(&perm).sorted_edges());
        }

        #[test]
        fn correntropy_symmetric_and_bounded(
            vals in proptest::collection::vec(-5.0f64..5.0, 12..40),
        ) {
            let t = vals.len() / 4;
            let s = Tensor::new([t, 4], vals[..t * 4].to_vec()).unwrap();
            let sim = correntropy_matrix(&s, None, CorrentropyOptions::default()).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let v = sim.get(&[i, j]);
                    prop_assert!(v > 0.0 && v <= 1.0);
                    prop_assert_eq!(v, sim.get(&[j, i]));
                }
            }
        }
    }
}
