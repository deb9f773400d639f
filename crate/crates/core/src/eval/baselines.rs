use std::ops::Range;

use crate::data::TimeSeriesDataset;
use crate::error::{GrinError, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

/// `[N x d]` means of the training-visible entries in `range`. A node-feature
/// without observations falls back to the mean of that feature over all
/// nodes, and to zero when the feature was never observed.
pub fn node_means(ds: &TimeSeriesDataset, range: Range<usize>) -> Tensor {
    let (n, d) = (ds.n_nodes(), ds.n_features());
    let train = ds.training_mask();
    let mut sum = vec![0.0; n * d];
    let mut count = vec![0usize; n * d];
    for t in range {
        for k in 0..n * d {
            let idx = t * n * d + k;
            if train.data()[idx] == 1.0 {
                sum[k] += ds.values.data()[idx];
                count[k] += 1;
            }
        }
    }
    let global: Vec<f64> = (0..d)
        .map(|f| {
            let s: f64 = (0..n).map(|i| sum[i * d + f]).sum();
            let c: usize = (0..n).map(|i| count[i * d + f]).sum();
            if c > 0 { s / c as f64 } else { 0.0 }
        })
        .collect();
    let data = (0..n * d)
        .map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { global[k % d] })
        .collect();
    Tensor::new([n, d], data).expect("node means")
}

/// Fills every entry outside the training mask with its node-feature mean
/// over the training-visible entries of `train_range`.
pub fn baseline_mean(ds: &TimeSeriesDataset, train_range: Range<usize>) -> Tensor {
    let means = node_means(ds, train_range);
    let train = ds.training_mask();
    let block = means.len();
    let data = ds
        .values
        .data()
        .iter()
        .zip(train.data())
        .enumerate()
        .map(|(k, (&v, &m))| if m == 1.0 { v } else { means.data()[k % block] })
        .collect();
    Tensor::new(ds.values.shape(), data).expect("same shape")
}

/// For every node, up to `k` other nodes ranked by edge weight (heaviest
/// first, ties by index). Undirected graphs count an edge in both directions.
pub fn knn_neighbors(graph: &GraphSpec, k: usize) -> Vec<Vec<usize>> {
    let n = graph.n_nodes;
    let mut weight = vec![vec![None::<f64>; n]; n];
    let mut put = |i: usize, j: usize, w: f64| {
        let slot = &mut weight[i][j];
        *slot = Some(slot.map_or(w, |old: f64| old.max(w)));
    };
    for e in &graph.edges {
        if e.source == e.target {
            continue;
        }
        put(e.source, e.target, e.weight);
        if !graph.directed {
            put(e.target, e.source, e.weight);
        }
    }
    weight
        .into_iter()
        .map(|row| {
            let mut nbrs: Vec<(usize, f64)> = row
                .into_iter()
                .enumerate()
                .filter_map(|(j, w)| w.filter(|w| *w > 0.0).map(|w| (j, w)))
                .collect();
            nbrs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            nbrs.into_iter().take(k).map(|(j, _)| j).collect()
        })
        .collect()
}

/// Fills every entry outside the training mask with the unweighted average
/// of the same feature at the same step over the node's `k` heaviest
/// neighbours that are visible there. Without a visible neighbour the node
/// mean of `train_range` is used.
pub fn baseline_knn(
    ds: &TimeSeriesDataset,
    graph: &GraphSpec,
    k: usize,
    train_range: Range<usize>,
) -> Result<Tensor> {
    if graph.n_nodes != ds.n_nodes() {
        return Err(GrinError::dim("baseline_knn", &[graph.n_nodes], &[ds.n_nodes()]));
    }
    if k == 0 {
        return Err(GrinError::Parameter("k must be positive".into()));
    }
    let nbrs = knn_neighbors(graph, k);
    let means = node_means(ds, train_range);
    let train = ds.training_mask();
    let (n, d) = (ds.n_nodes(), ds.n_features());
    let mut out = ds.values.clone();
    for t in 0..ds.n_steps() {
        for i in 0..n {
            for f in 0..d {
                let idx = (t * n + i) * d + f;
                if train.data()[idx] == 1.0 {
                    continue;
                }
                let (mut s, mut c) = (0.0, 0usize);
                for &j in &nbrs[i] {
                    let jdx = (t * n + j) * d + f;
                    if train.data()[jdx] == 1.0 {
                        s += ds.values.data()[jdx];
                        c += 1;
                    }
                }
                out.data_mut()[idx] = if c > 0 { s / c as f64 } else { means.data()[i * d + f] };
            }
        }
    }
    Ok(out)
}
