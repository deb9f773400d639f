use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use grin::data::{
    read_values_csv, write_mask_csv, write_values_csv, DatasetManifest, EvalMode, MaskPlan, ParticleSimConfig,
    Scaler, Splits, TimeSeriesDataset,
};
use grin::eval::{baseline_knn, baseline_mean, evaluate, impute_range, masked_metrics, MetricsReport};
use grin::graph::{correntropy_knn_graph, gaussian_kernel_adjacency, CorrentropyOptions, GraphSpec};
use grin::model::{Checkpoint, GrinModel};
use grin::tensor::Tensor;
use grin::train::{load_scaler, train, write_history_csv, EpochRecord, TrainState};
use serde::Serialize;

use crate::config::{DataSection, DataSource, RunConfig};
use crate::plot::{node_svg, NodeTrace};
use crate::prepare::{default_gamma, feature_column, load_dataset, prepare, read_distance_csv, Prepared};

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Global {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl Global {
    fn run_config(&self) -> Result<RunConfig> {
        let path = self.config.as_deref().context("--config is required for this command")?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply_overrides(self.seed, self.deterministic);
        Ok(cfg)
    }

    fn optional_config(&self) -> Result<Option<RunConfig>> {
        self.config.as_ref().map(|_| self.run_config()).transpose()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_toml(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(toml::to_string(value)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Writes the resolved run configuration into `dir`.
fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut w = create(&dir.join("config.toml"))?;
    w.write_all(cfg.to_toml()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Sidecar recording the arguments an output was produced with.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".args.toml");
    out.with_file_name(name)
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

// build-graph

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMethod {
    Gaussian,
    CorrentropyKnn,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildGraphArgs {
    /// Without a method the `[graph]` section of `--config` is used.
    #[arg(long, value_enum)]
    pub method: Option<GraphMethod>,
    /// Square distance matrix CSV (gaussian).
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// Kernel width; defaults to the std of the off-diagonal distances.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Distance threshold (gaussian).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Values table (correntropy-knn).
    #[arg(long)]
    pub values: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Feature used for the similarity; defaults to the first.
    #[arg(long)]
    pub feature: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub segment_len: Option<usize>,
    /// Edge-list CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn build_graph(g: &Global, args: &BuildGraphArgs) -> Result<()> {
    let graph = match args.method {
        None => prepare(&g.run_config()?)?.graph,
        Some(GraphMethod::Gaussian) => {
            let path = args.distances.as_deref().context("--distances is required for gaussian")?;
            let delta = args.delta.context("--delta is required for gaussian")?;
            let d = read_distance_csv(path)?;
            let gamma = args.gamma.unwrap_or_else(|| default_gamma(&d));
            gaussian_kernel_adjacency(&d, gamma, delta).with_context(|| format!("in {}", path.display()))?
        }
        Some(GraphMethod::CorrentropyKnn) => {
            let values = args.values.clone().context("--values is required for correntropy-knn")?;
            let data = DataSection {
                source: DataSource::Csv,
                values: Some(values),
                mask: args.mask.clone(),
                eval_mask: None,
                episode_len: None,
                train_fraction: 0.7,
                val_fraction: 0.1,
                eval_mode: EvalMode::InSample,
                simulation: ParticleSimConfig::default(),
            };
            let (ds, _) = load_dataset(&data)?;
            let f = match &args.feature {
                Some(name) => ds
                    .feature_names
                    .iter()
                    .position(|x| x == name)
                    .with_context(|| format!("--feature: no feature named `{name}`"))?,
                None => 0,
            };
            let series = feature_column(&ds.values, f);
            let mask = feature_column(&ds.observed_mask, f);
            let opts = CorrentropyOptions { sigma: args.sigma, segment_len: args.segment_len };
            correntropy_knn_graph(&series, Some(&mask), args.k, opts)?
        }
    };
    match &args.out {
        Some(out) => {
            let mut w = create(out)?;
            graph.write_edge_csv(&mut w)?;
            w.flush()?;
            if args.method.is_some() {
                write_toml(&sidecar(out), args)?;
            }
            log::info!("wrote {} edges to {}", graph.edges.len(), out.display());
        }
        None => {
            let mut buf = Vec::new();
            graph.write_edge_csv(&mut buf)?;
            emit(String::from_utf8(buf)?.trim_end())?;
        }
    }
    Ok(())
}

// simulate

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Output directory; defaults to `<out_dir>/<name>/data`, or `data`
    /// without a config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_simulations: Option<usize>,
}

#[derive(Serialize)]
struct SimulationSummary {
    n_steps: usize,
    n_nodes: usize,
    n_features: usize,
    /// Share of readings left for training.
    observed_fraction: f64,
    eval_fraction: f64,
    out: PathBuf,
}

pub fn simulate(g: &Global, args: &SimulateArgs) -> Result<()> {
    let (mut sim, out) = match g.optional_config()? {
        Some(cfg) => {
            ensure!(cfg.data.source == DataSource::Particles, "simulate needs data.source = \"particles\"");
            let out = args.out.clone().unwrap_or_else(|| cfg.run_dir().join("data"));
            (cfg.data.simulation, out)
        }
        None => {
            let sim = ParticleSimConfig { seed: g.seed.unwrap_or(0), ..ParticleSimConfig::default() };
            (sim, args.out.clone().unwrap_or_else(|| "data".into()))
        }
    };
    if let Some(n) = args.n_simulations {
        sim.n_simulations = n;
    }
    let p = grin::data::simulate_particles(&sim)?;
    let ds = &p.dataset;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = create(&out.join("values.csv"))?;
    write_values_csv(&mut w, &ds.values, Some(&ds.observed_mask), &ds.node_ids, &ds.feature_names, None)?;
    w.flush()?;
    let mut w = create(&out.join("eval_mask.csv"))?;
    write_mask_csv(&mut w, &ds.eval_mask, &ds.node_ids, &ds.feature_names, None)?;
    w.flush()?;
    let mut w = create(&out.join("adjacency.csv"))?;
    p.graph.write_edge_csv(&mut w)?;
    w.flush()?;
    write_toml(&out.join("simulation.toml"), &sim)?;
    let manifest = DatasetManifest {
        values: "values.csv".into(),
        mask: None,
        eval_mask: Some("eval_mask.csv".into()),
        adjacency: Some("adjacency.csv".into()),
        n_steps: ds.n_steps(),
        n_nodes: ds.n_nodes(),
        n_features: ds.n_features(),
        episode_len: ds.episode_len,
        splits: Splits::standard(ds.n_steps(), ds.episode_len).ok(),
        scaler: None,
        seeds: [("simulation".to_string(), sim.seed)].into(),
    };
    manifest.save(out.join("manifest.json"))?;
    let total = ds.values.len() as f64;
    let eval = ds.eval_mask.sum();
    print_json(&SimulationSummary {
        n_steps: ds.n_steps(),
        n_nodes: ds.n_nodes(),
        n_features: ds.n_features(),
        observed_fraction: ds.training_mask().sum() / total,
        eval_fraction: eval / total,
        out,
    })
}

// make-mask

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Point,
    Block,
    VirtualSensor,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct MakeMaskArgs {
    /// Values table; without it the `[data]` section of `--config` is used.
    #[arg(long)]
    pub values: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub episode_len: Option<usize>,
    /// Without a mode the `[mask]` section of `--config` is used.
    #[arg(long, value_enum)]
    pub mode: Option<MaskMode>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    #[arg(long)]
    pub p_failure: Option<f64>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Comma-separated node ids (virtual-sensor).
    #[arg(long, value_delimiter = ',')]
    pub nodes: Vec<String>,
    /// Evaluation-mask CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(skip)]
    pub seed: u64,
}

#[derive(Serialize)]
struct MaskSummary {
    eval_entries: usize,
    observed_entries: usize,
    eval_fraction_of_observed: f64,
}

impl MakeMaskArgs {
    fn plan(&self) -> Result<Option<MaskPlan>> {
        let Some(mode) = self.mode else { return Ok(None) };
        let need = |v: Option<f64>, flag: &str| v.with_context(|| format!("{flag} is required for this mode"));
        let plan = match mode {
            MaskMode::Point => MaskPlan::Point { rate: need(self.rate, "--rate")? },
            MaskMode::Block => MaskPlan::Block {
                drop_rate: self.drop_rate.unwrap_or(0.0),
                p_failure: need(self.p_failure, "--p-failure")?,
                min_steps: self.min_steps.context("--min-steps is required for block")?,
                max_steps: self.max_steps.context("--max-steps is required for block")?,
            },
            MaskMode::VirtualSensor => MaskPlan::VirtualSensor { nodes: self.nodes.clone() },
        };
        plan.validate()?;
        Ok(Some(plan))
    }
}

pub fn make_mask(g: &Global, args: &MakeMaskArgs) -> Result<()> {
    let cfg = g.optional_config()?;
    let seed = cfg.as_ref().map_or(g.seed.unwrap_or(0), |c| c.seed);
    let (mut ds, _) = match (&args.values, &cfg) {
        (Some(values), _) => {
            let data = DataSection {
                source: DataSource::Csv,
                values: Some(values.clone()),
                mask: args.mask.clone(),
                eval_mask: None,
                episode_len: args.episode_len,
                train_fraction: 0.7,
                val_fraction: 0.1,
                eval_mode: EvalMode::InSample,
                simulation: ParticleSimConfig::default(),
            };
            load_dataset(&data)?
        }
        (None, Some(cfg)) => load_dataset(&cfg.data)?,
        (None, None) => bail!("give --values or --config"),
    };
    let plan = match args.plan()? {
        Some(p) => p,
        None => cfg
            .as_ref()
            .and_then(|c| c.mask.clone())
            .context("give --mode or a config with a [mask] section")?,
    };
    plan.apply(&mut ds, seed)?;
    let mut w = create(&args.out)?;
    write_mask_csv(&mut w, &ds.eval_mask, &ds.node_ids, &ds.feature_names, ds.timestamps.as_deref())?;
    w.flush()?;
    let mut recorded = args.clone();
    recorded.seed = seed;
    write_toml(&sidecar(&args.out), &recorded)?;
    let observed = ds.observed_mask.sum();
    let eval = ds.eval_mask.sum();
    print_json(&MaskSummary {
        eval_entries: eval as usize,
        observed_entries: observed as usize,
        eval_fraction_of_observed: if observed > 0.0 { eval / observed } else { 0.0 },
    })
}

// train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Serialize)]
struct Baselines {
    mean: MetricsReport,
    knn: MetricsReport,
}

#[derive(Serialize)]
struct TrainMetrics {
    name: String,
    variant: &'static str,
    seed: u64,
    splits: Splits,
    epochs_run: usize,
    best_epoch: Option<usize>,
    best_val_mae: Option<f64>,
    stopped_early: bool,
    skipped_steps: usize,
    test: MetricsReport,
    baselines: Baselines,
}

fn test_range(mode: EvalMode, splits: &Splits) -> std::ops::Range<usize> {
    match mode {
        EvalMode::InSample => splits.train.start..splits.test.end,
        EvalMode::OutOfSample => splits.test.clone(),
    }
}

fn slice_metrics(ds: &TimeSeriesDataset, pred: &Tensor, range: std::ops::Range<usize>, mode: EvalMode) -> Result<MetricsReport> {
    let eval = TimeSeriesDataset::slice_steps(&ds.eval_mask, range.clone());
    ensure!(eval.sum() > 0.0, "no evaluation entries in steps {range:?}");
    let mut r = masked_metrics(
        &TimeSeriesDataset::slice_steps(&ds.values, range.clone()),
        &TimeSeriesDataset::slice_steps(pred, range),
        &eval,
        &ds.node_ids,
    )?;
    r.mode = Some(mode);
    Ok(r)
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{} row {}", path.display(), i + 2)))
        .collect()
}

pub fn train_cmd(g: &Global, args: &TrainArgs) -> Result<()> {
    let mut cfg = g.run_config()?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.check()?;
    let Prepared { ds, graph, splits } = prepare(&cfg)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_resolved(&cfg, &dir)?;

    let (mut model, resume) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let model = GrinModel::from_checkpoint(&ckpt, &graph).with_context(|| format!("in {}", path.display()))?;
            let state = TrainState::from_checkpoint(&ckpt, model.params())?
                .with_context(|| format!("{} holds no training state", path.display()))?;
            (model, Some(state))
        }
        None => (GrinModel::new(cfg.model.to_config(ds.n_features()), &graph, cfg.seed)?, None),
    };
    let mut history = match (&resume, dir.join("history.csv")) {
        (Some(state), h) if h.exists() => {
            let mut old = read_history(&h)?;
            old.retain(|r| r.epoch < state.epochs_done);
            old
        }
        _ => Vec::new(),
    };
    log::info!(
        "training {} on {} steps x {} nodes x {} features",
        cfg.model.variant.as_str(),
        ds.n_steps(),
        ds.n_nodes(),
        ds.n_features()
    );
    let outcome = train(&mut model, &ds, &splits, &cfg.train, resume)?;
    history.extend(outcome.history.iter().cloned());

    let mut ckpt = model.checkpoint();
    outcome.state.save_into(&mut ckpt, model.params())?;
    ckpt.save(dir.join("checkpoint.grin"))?;
    let mut w = create(&dir.join("history.csv"))?;
    write_history_csv(&mut w, &history)?;
    w.flush()?;

    let mode = cfg.data.eval_mode;
    let range = test_range(mode, &splits);
    let opts = cfg.eval_options(mode);
    let test = evaluate(&model, &ds, range.clone(), mode, &outcome.state.scaler, &opts)?;
    let k = cfg.eval.knn_k.min(ds.n_nodes().saturating_sub(1)).max(1);
    let baselines = Baselines {
        mean: slice_metrics(&ds, &baseline_mean(&ds, splits.train.clone()), range.clone(), mode)?,
        knn: slice_metrics(&ds, &baseline_knn(&ds, &graph, k, splits.train.clone())?, range, mode)?,
    };
    let metrics = TrainMetrics {
        name: cfg.name.clone(),
        variant: cfg.model.variant.as_str(),
        seed: cfg.seed,
        splits,
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        stopped_early: outcome.stopped_early,
        skipped_steps: outcome.skipped_steps,
        test,
        baselines,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    log::info!(
        "test MAE {:.6} (mean baseline {:.6}, knn baseline {:.6})",
        metrics.test.mae,
        metrics.baselines.mean.mae,
        metrics.baselines.knn.mae
    );
    emit(&dir.display().to_string())?;
    Ok(())
}

// impute

#[derive(Args, Debug)]
pub struct ImputeArgs {
    /// Defaults to `<run dir>/checkpoint.grin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<run dir>/imputed.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-node SVG plots.
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Steps shown per plot, from the start of the series.
    #[arg(long, default_value_t = 200)]
    pub plot_steps: usize,
}

fn load_model(cfg: &RunConfig, path: Option<&Path>, graph: &GraphSpec) -> Result<(GrinModel, Scaler)> {
    let path = path.map_or_else(|| cfg.run_dir().join("checkpoint.grin"), Path::to_path_buf);
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let model = GrinModel::from_checkpoint(&ckpt, graph).with_context(|| format!("in {}", path.display()))?;
    let scaler = load_scaler(&ckpt)?.unwrap_or_else(|| Scaler::identity(model.config().n_features));
    Ok((model, scaler))
}

pub fn impute(g: &Global, args: &ImputeArgs) -> Result<()> {
    let cfg = g.run_config()?;
    let Prepared { ds, graph, .. } = prepare(&cfg)?;
    let (model, scaler) = load_model(&cfg, args.checkpoint.as_deref(), &graph)?;
    let opts = cfg.eval_options(EvalMode::InSample);
    let imputed = impute_range(&model, &ds, 0..ds.n_steps(), &scaler, &opts)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.run_dir().join("imputed.csv"));
    let mut w = create(&out)?;
    write_values_csv(&mut w, &imputed, None, &ds.node_ids, &ds.feature_names, ds.timestamps.as_deref())?;
    w.flush()?;
    write_resolved(&cfg, out.parent().unwrap_or(Path::new(".")))?;
    if let Some(dir) = &args.plots {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let steps = 0..ds.n_steps().min(args.plot_steps.max(1));
        for (i, node) in ds.node_ids.iter().enumerate() {
            let svg = node_svg(
                &NodeTrace {
                    node,
                    features: &ds.feature_names,
                    truth: &ds.values,
                    observed: &ds.observed_mask,
                    eval: &ds.eval_mask,
                    imputed: &imputed,
                    index: i,
                },
                steps.clone(),
            );
            let file: String = node.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
            fs::write(dir.join(format!("node_{i}_{file}.svg")), svg)?;
        }
    }
    emit(&out.display().to_string())?;
    Ok(())
}

// evaluate

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    InSample,
    OutOfSample,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model to evaluate; defaults to `<run dir>/checkpoint.grin`.
    #[arg(long, conflicts_with = "imputed")]
    pub checkpoint: Option<PathBuf>,
    /// Score a complete imputed table instead of a model.
    #[arg(long)]
    pub imputed: Option<PathBuf>,
    /// Overrides `data.eval_mode`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Metrics JSON; defaults to `<run dir>/eval_<mode>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate_cmd(g: &Global, args: &EvaluateArgs) -> Result<()> {
    let mut cfg = g.run_config()?;
    if let Some(m) = args.mode {
        cfg.data.eval_mode = match m {
            ModeArg::InSample => EvalMode::InSample,
            ModeArg::OutOfSample => EvalMode::OutOfSample,
        };
    }
    let mode = cfg.data.eval_mode;
    let Prepared { ds, graph, splits } = prepare(&cfg)?;
    let range = test_range(mode, &splits);
    let report = match &args.imputed {
        Some(path) => {
            let file = path.display().to_string();
            let table = read_values_csv(File::open(path).with_context(|| format!("opening {file}"))?, &file)?;
            ensure!(
                table.node_ids == ds.node_ids && table.feature_names == ds.feature_names,
                "{file}: columns do not match the dataset"
            );
            ensure!(
                table.values.shape() == ds.values.shape(),
                "{file}: {} rows, dataset has {}",
                table.values.shape()[0],
                ds.n_steps()
            );
            if let Some(i) = table
                .present
                .data()
                .iter()
                .zip(ds.eval_mask.data())
                .position(|(&p, &e)| p == 0.0 && e == 1.0)
            {
                let width = ds.n_nodes() * ds.n_features();
                bail!("{file} row {}, column {}: evaluated entry is empty", i / width + 2, i % width + 1);
            }
            slice_metrics(&ds, &table.values, range, mode)?
        }
        None => {
            let (model, scaler) = load_model(&cfg, args.checkpoint.as_deref(), &graph)?;
            evaluate(&model, &ds, range, mode, &scaler, &cfg.eval_options(mode))?
        }
    };
    let name = match mode {
        EvalMode::InSample => "eval_in_sample.json",
        EvalMode::OutOfSample => "eval_out_of_sample.json",
    };
    let out = args.out.clone().unwrap_or_else(|| cfg.run_dir().join(name));
    write_json(&out, &report)?;
    print_json(&report)
}
