use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GrinModel, ModelConfig};
use crate::error::{GrinError, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GRINCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    n_nodes: usize,
    graph_fingerprint: String,
    epoch: Option<usize>,
    optimizer_step: Option<u64>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Serialized model state.
///
/// Layout: the 8-byte magic `GRINCKPT`, a little-endian `u64` header
/// length, a JSON header with names and shapes, then every tensor's values
/// as little-endian `f64` in header order. Floats never pass through JSON,
/// so a round trip is bit-exact.
///
/// Besides the model parameters the container can carry named extras
/// (optimizer moments, normalisation statistics); names must be unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub n_nodes: usize,
    pub graph_fingerprint: String,
    pub epoch: Option<usize>,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensor(&name).is_some() {
            return Err(GrinError::Contract(format!("duplicate checkpoint entry {name}")));
        }
        self.tensors.push((name, value));
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            n_nodes: self.n_nodes,
            graph_fingerprint: self.graph_fingerprint.clone(),
            epoch: self.epoch,
            optimizer_step: self.optimizer_step,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GrinError::Incompatible("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.version != VERSION {
            return Err(GrinError::Incompatible(format!(
                "checkpoint version {} (expected {VERSION})",
                header.version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(GrinError::Incompatible(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            config: header.config,
            n_nodes: header.n_nodes,
            graph_fingerprint: header.graph_fingerprint,
            epoch: header.epoch,
            optimizer_step: header.optimizer_step,
            tensors,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl GrinModel {
    /// Checkpoint holding the parameters only.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            n_nodes: self.n_nodes(),
            graph_fingerprint: self.fingerprint.clone(),
            epoch: None,
            optimizer_step: None,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        self.checkpoint().to_bytes()
    }

    /// Rebuilds a model from `ckpt`; `graph` must be the graph it was trained on.
    pub fn from_checkpoint(ckpt: &Checkpoint, graph: &GraphSpec) -> Result<Self> {
        if ckpt.n_nodes != graph.n_nodes {
            return Err(GrinError::Incompatible(format!(
                "checkpoint has {} nodes, graph has {}",
                ckpt.n_nodes, graph.n_nodes
            )));
        }
        let fingerprint = graph.fingerprint();
        if ckpt.graph_fingerprint != fingerprint {
            return Err(GrinError::Incompatible(format!(
                "graph fingerprint {} does not match checkpoint {}",
                fingerprint, ckpt.graph_fingerprint
            )));
        }
        let mut model = GrinModel::new(ckpt.config.clone(), graph, 0)?;
        let values = model
            .params
            .iter()
            .map(|(name, _)| {
                ckpt.tensor(name)
                    .cloned()
                    .ok_or_else(|| GrinError::Incompatible(format!("missing parameter {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        model.params.load_values(values)?;
        Ok(model)
    }

    pub fn load_checkpoint(bytes: &[u8], graph: &GraphSpec) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_bytes(bytes)?, graph)
    }
}
