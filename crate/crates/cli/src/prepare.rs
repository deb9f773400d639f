//! Turning a [`RunConfig`] into a dataset, a graph and split ranges.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use grin::data::{load_csv_dataset, simulate_particles, EvalMode, Splits, TimeSeriesDataset};
use grin::graph::{correntropy_knn_graph, gaussian_kernel_adjacency, CorrentropyOptions, GraphSpec};
use grin::tensor::Tensor;

use crate::config::{DataSection, DataSource, GraphSection, RunConfig};

/// Dataset with its evaluation mask in place, before any graph is chosen.
pub fn load_dataset(data: &DataSection) -> Result<(TimeSeriesDataset, Option<GraphSpec>)> {
    let (mut ds, graph) = match data.source {
        DataSource::Particles => {
            let sim = simulate_particles(&data.simulation)?;
            (sim.dataset, Some(sim.graph))
        }
        DataSource::Csv => {
            let values = data.values.as_deref().context("data.values is not set")?;
            let (ds, _) = load_csv_dataset(values, data.mask.as_deref(), data.eval_mask.as_deref(), None, false)?;
            (ds, None)
        }
    };
    if let Some(len) = data.episode_len {
        ds = ds.with_episode_len(len).context("data.episode_len")?;
    }
    Ok((ds, graph))
}

/// Dataset, graph and splits as described by `cfg`, with `[mask]` applied.
pub struct Prepared {
    pub ds: TimeSeriesDataset,
    pub graph: GraphSpec,
    pub splits: Splits,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (mut ds, data_graph) = load_dataset(&cfg.data)?;
    if let Some(plan) = &cfg.mask {
        plan.apply(&mut ds, cfg.seed).context("[mask]")?;
    }
    let splits = splits_for(&ds, &cfg.data)?;
    let graph = build_graph(&cfg.graph, &ds, data_graph, &splits)?;
    Ok(Prepared { ds, graph, splits })
}

/// In-sample runs train, validate and test on the whole sequence.
pub fn splits_for(ds: &TimeSeriesDataset, data: &DataSection) -> Result<Splits> {
    let t = ds.n_steps();
    Ok(match data.eval_mode {
        EvalMode::InSample => Splits { train: 0..t, val: 0..t, test: 0..t },
        EvalMode::OutOfSample => Splits::by_fraction(t, ds.episode_len, data.train_fraction, data.val_fraction)
            .context("data.train_fraction / data.val_fraction")?,
    })
}

fn build_graph(
    section: &GraphSection,
    ds: &TimeSeriesDataset,
    data_graph: Option<GraphSpec>,
    splits: &Splits,
) -> Result<GraphSpec> {
    let n = ds.n_nodes();
    let g = match section {
        GraphSection::Data => match data_graph {
            Some(g) => g,
            None => bail!("graph.method = \"data\" needs a simulated dataset; pick edges, gaussian, correntropy_knn or fully_connected"),
        },
        GraphSection::FullyConnected => GraphSpec::fully_connected(n),
        GraphSection::Edges { path, directed } => read_edges(path, Some(n), *directed)?,
        GraphSection::Gaussian { distances, gamma, delta } => {
            let d = read_distance_csv(distances)?;
            if d.shape()[0] != n {
                bail!("{}: {} rows but the dataset has {n} nodes", distances.display(), d.shape()[0]);
            }
            let gamma = gamma.unwrap_or_else(|| default_gamma(&d));
            gaussian_kernel_adjacency(&d, gamma, *delta).context("[graph]")?
        }
        GraphSection::CorrentropyKnn { k, sigma, segment_len, feature } => {
            let f = match feature {
                Some(name) => ds
                    .feature_names
                    .iter()
                    .position(|x| x == name)
                    .with_context(|| format!("graph.feature: no feature named `{name}`"))?,
                None => 0,
            };
            let mask = ds.training_mask();
            let range = splits.train.clone();
            let series = feature_column(&TimeSeriesDataset::slice_steps(&ds.values, range.clone()), f);
            let mask = feature_column(&TimeSeriesDataset::slice_steps(&mask, range), f);
            let opts = CorrentropyOptions { sigma: *sigma, segment_len: *segment_len };
            correntropy_knn_graph(&series, Some(&mask), *k, opts).context("[graph]")?
        }
    };
    if g.n_nodes != n {
        bail!("graph has {} nodes but the dataset has {n}", g.n_nodes);
    }
    Ok(g)
}

/// `[T x N]` slice of feature `f` from a `[T x N x d]` tensor.
pub fn feature_column(t: &Tensor, f: usize) -> Tensor {
    let [steps, n, d] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    let data = t.data().iter().skip(f).step_by(d).copied().collect();
    Tensor::new([steps, n], data).expect("shape matches")
}

pub fn read_edges(path: &Path, n_nodes: Option<usize>, directed: bool) -> Result<GraphSpec> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    GraphSpec::read_edge_csv(file, n_nodes, directed).with_context(|| format!("in {}", path.display()))
}

/// Square distance matrix. An optional first row of node ids is skipped;
/// empty or `inf` cells mean "not connected".
pub fn read_distance_csv(path: &Path) -> Result<Tensor> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        let is_header = i == 0 && rec.iter().any(|c| !c.trim().is_empty() && c.trim().parse::<f64>().is_err());
        if is_header {
            continue;
        }
        let mut row = Vec::with_capacity(rec.len());
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                f64::INFINITY
            } else {
                cell.parse::<f64>().map_err(|_| {
                    anyhow::anyhow!("{} row {}, column {}: `{cell}` is not a number", path.display(), i + 1, j + 1)
                })?
            };
            row.push(v);
        }
        rows.push(row);
    }
    let n = rows.len();
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        bail!("{}: distance matrix must be square, data row {} has {} cells for {n} rows", path.display(), i + 1, row.len());
    }
    Ok(Tensor::new([n, n], rows.concat())?)
}

/// Standard deviation of the finite off-diagonal distances.
pub fn default_gamma(d: &Tensor) -> f64 {
    let n = d.shape()[0];
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d.data()[i * n + j])
        .filter(|v| v.is_finite())
        .collect();
    if vals.is_empty() {
        return 1.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    if var > 0.0 { var.sqrt() } else { 1.0 }
}
