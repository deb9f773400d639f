use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grin::data::{EvalMode, MaskPlan, ParticleSimConfig};
use grin::eval::EvalOptions;
use grin::model::{ModelConfig, Variant};
use grin::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// A run configuration file. Sections: `[data]` (with an optional
/// `[data.simulation]`), `[graph]`, `[model]`, `[train]`, `[mask]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Outputs go to `<out_dir>/<name>/`.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Seeds model initialisation, batch sampling and mask sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    pub data: DataSection,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskPlan>,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_name() -> String {
    "run".into()
}

fn default_out_dir() -> PathBuf {
    "runs".into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    Particles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_len: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_eval_mode")]
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub simulation: ParticleSimConfig,
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_eval_mode() -> EvalMode {
    EvalMode::OutOfSample
}

/// Where the graph comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSection {
    /// Fully connected for simulated particles; required edge list for CSV data.
    #[default]
    Data,
    FullyConnected,
    Edges {
        path: PathBuf,
        #[serde(default)]
        directed: bool,
    },
    Gaussian {
        distances: PathBuf,
        /// Defaults to the std of the off-diagonal distances.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
        delta: f64,
    },
    CorrentropyKnn {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        segment_len: Option<usize>,
        /// Feature used for the similarity; defaults to the first.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feature: Option<String>,
    },
}

fn default_k() -> usize {
    10
}

/// Model hyperparameters; the feature count comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub hidden: usize,
    pub encoder_hops: usize,
    pub decoder_hops: usize,
    pub fusion_hidden: usize,
    pub learnable_h0: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            variant: m.variant,
            hidden: m.hidden,
            encoder_hops: m.encoder_hops,
            decoder_hops: m.decoder_hops,
            fusion_hidden: m.fusion_hidden,
            learnable_h0: m.learnable_h0,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, n_features: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            n_features,
            hidden: self.hidden,
            encoder_hops: self.encoder_hops,
            decoder_hops: self.decoder_hops,
            fusion_hidden: self.fusion_hidden,
            learnable_h0: self.learnable_h0,
        }
    }
}

/// Inference windows and baseline settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Defaults to `train.window`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Defaults to 1 in-sample and to the window length out-of-sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Neighbours averaged by the KNN baseline.
    pub knn_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { window: None, stride: None, knn_k: 5 }
    }
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = base.canonicalize().unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.check().with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.out_dir);
        for p in [&mut self.data.values, &mut self.data.mask, &mut self.data.eval_mask]
            .into_iter()
            .flatten()
        {
            absolutize(base, p);
        }
        match &mut self.graph {
            GraphSection::Edges { path, .. } => absolutize(base, path),
            GraphSection::Gaussian { distances, .. } => absolutize(base, distances),
            _ => {}
        }
    }

    /// Consistency checks beyond what the parser enforces.
    pub fn check(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("name: `{}` must be a plain directory name", self.name);
        }
        match self.data.source {
            DataSource::Csv if self.data.values.is_none() => bail!("data.values is required when data.source = \"csv\""),
            DataSource::Particles if self.data.values.is_some() => {
                bail!("data.values must be absent when data.source = \"particles\"")
            }
            _ => {}
        }
        self.data.simulation.validate()?;
        self.model.to_config(1).validate()?;
        self.train.validate()?;
        if let Some(plan) = &self.mask {
            plan.validate()?;
        }
        if self.eval.window == Some(0) || self.eval.stride == Some(0) || self.eval.knn_k == 0 {
            bail!("eval.window, eval.stride and eval.knn_k must be positive");
        }
        Ok(())
    }

    /// Applies command-line overrides and copies the run seed into the
    /// training section.
    pub fn apply_overrides(&mut self, seed: Option<u64>, deterministic: bool) {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.deterministic |= deterministic;
        self.train.seed = self.seed;
        self.train.deterministic = self.deterministic;
        self.data.simulation.seed = self.seed;
    }

    pub fn eval_options(&self, mode: EvalMode) -> EvalOptions {
        let window = self.eval.window.unwrap_or(self.train.window);
        let stride = self.eval.stride.unwrap_or(match mode {
            EvalMode::InSample => 1,
            EvalMode::OutOfSample => window,
        });
        EvalOptions { window, stride, deterministic: self.deterministic }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
