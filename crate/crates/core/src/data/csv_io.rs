use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::TimeSeriesDataset;
use crate::error::{GrinError, Result};
use crate::graph::GraphSpec;
use crate::tensor::Tensor;

/// A wide table: one row per step, one `node:feature` column per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    /// `[T x N x d]`; zero where a cell was empty.
    pub values: Tensor,
    /// 1 where a cell held a number.
    pub present: Tensor,
    pub node_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

fn parse_header(header: &csv::StringRecord, file: &str) -> Result<(bool, Vec<String>, Vec<String>)> {
    let mut cols: Vec<&str> = header.iter().map(str::trim).collect();
    let has_time = cols.first() == Some(&"timestamp");
    if has_time {
        cols.remove(0);
    }
    let offset = usize::from(has_time);
    let mut nodes: Vec<String> = Vec::new();
    let mut features: Vec<String> = Vec::new();
    for (k, col) in cols.iter().enumerate() {
        let loc = || format!("{file} header, column {}", k + offset + 1);
        let (node, feature) = col
            .rsplit_once(':')
            .ok_or_else(|| GrinError::ingest(loc(), format!("`{col}` is not of the form node:feature")))?;
        if nodes.last().map(String::as_str) != Some(node) {
            if nodes.iter().any(|n| n == node) {
                return Err(GrinError::ingest(loc(), format!("columns of node `{node}` are not contiguous")));
            }
            nodes.push(node.to_string());
        }
        let within = k - (nodes.len() - 1) * features.len();
        if nodes.len() == 1 {
            features.push(feature.to_string());
        } else if features.get(within).map(String::as_str) != Some(feature) {
            return Err(GrinError::ingest(
                loc(),
                format!("node `{node}` must list features {features:?} in order"),
            ));
        }
    }
    if cols.is_empty() || cols.len() != nodes.len() * features.len() {
        return Err(GrinError::ingest(
            format!("{file} header"),
            "every node must have the same features",
        ));
    }
    Ok((has_time, nodes, features))
}

/// Reads a values table. Empty cells are missing.
pub fn read_values_csv<R: Read>(reader: R, file: &str) -> Result<CsvTable> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = r.headers()?.clone();
    let (has_time, nodes, features) = parse_header(&header, file)?;
    let width = nodes.len() * features.len();
    let offset = usize::from(has_time);
    let mut values = Vec::new();
    let mut present = Vec::new();
    let mut stamps = Vec::new();
    let mut steps = 0;
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != width + offset {
            return Err(GrinError::ingest(
                format!("{file} row {line}"),
                format!("expected {} cells, found {}", width + offset, rec.len()),
            ));
        }
        if has_time {
            stamps.push(rec[0].to_string());
        }
        for c in 0..width {
            let cell = rec[c + offset].trim();
            if cell.is_empty() {
                values.push(0.0);
                present.push(0.0);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                GrinError::ingest(
                    format!("{file} row {line}, column {} ({})", c + offset + 1, &header[c + offset]),
                    format!("`{cell}` is not a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(GrinError::ingest(
                    format!("{file} row {line}, column {}", c + offset + 1),
                    "non-finite value; leave the cell empty for missing data",
                ));
            }
            values.push(v);
            present.push(1.0);
        }
        steps += 1;
    }
    let shape = [steps, nodes.len(), features.len()];
    Ok(CsvTable {
        values: Tensor::new(shape, values)?,
        present: Tensor::new(shape, present)?,
        node_ids: nodes,
        feature_names: features,
        timestamps: has_time.then_some(stamps),
    })
}

/// Reads a 0/1 mask table whose header must match `like`.
pub fn read_mask_csv<R: Read>(reader: R, file: &str, like: &CsvTable) -> Result<Tensor> {
    let table = read_values_csv(reader, file)?;
    if table.node_ids != like.node_ids || table.feature_names != like.feature_names {
        return Err(GrinError::ingest(
            format!("{file} header"),
            "mask columns differ from the values file",
        ));
    }
    if table.values.shape() != like.values.shape() {
        return Err(GrinError::ingest(
            file.to_string(),
            format!(
                "{} rows, values file has {}",
                table.values.shape()[0],
                like.values.shape()[0]
            ),
        ));
    }
    let d = like.feature_names.len();
    let n = like.node_ids.len();
    let offset = usize::from(table.timestamps.is_some());
    for (i, (&v, &p)) in table.values.data().iter().zip(table.present.data()).enumerate() {
        if p == 0.0 || (v != 0.0 && v != 1.0) {
            return Err(GrinError::ingest(
                format!("{file} row {}, column {}", i / (n * d) + 2, i % (n * d) + offset + 1),
                "mask cells must be 0 or 1",
            ));
        }
    }
    Ok(table.values)
}

fn header(nodes: &[String], features: &[String], time: bool) -> Vec<String> {
    let mut h: Vec<String> = Vec::new();
    if time {
        h.push("timestamp".into());
    }
    for n in nodes {
        for f in features {
            h.push(format!("{n}:{f}"));
        }
    }
    h
}

/// Writes values, leaving cells empty where `mask` is 0 (when given).
pub fn write_values_csv<W: Write>(
    writer: W,
    values: &Tensor,
    mask: Option<&Tensor>,
    node_ids: &[String],
    feature_names: &[String],
    timestamps: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(node_ids, feature_names, timestamps.is_some()))?;
    let width = node_ids.len() * feature_names.len();
    for t in 0..values.shape()[0] {
        let mut rec: Vec<String> = Vec::with_capacity(width + 1);
        if let Some(ts) = timestamps {
            rec.push(ts[t].clone());
        }
        for c in 0..width {
            let k = t * width + c;
            let keep = mask.is_none_or(|m| m.data()[k] == 1.0);
            rec.push(if keep { format!("{:?}", values.data()[k]) } else { String::new() });
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a 0/1 mask table.
pub fn write_mask_csv<W: Write>(
    writer: W,
    mask: &Tensor,
    node_ids: &[String],
    feature_names: &[String],
    timestamps: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(node_ids, feature_names, timestamps.is_some()))?;
    let width = node_ids.len() * feature_names.len();
    for t in 0..mask.shape()[0] {
        let mut rec: Vec<&str> = Vec::with_capacity(width + 1);
        if let Some(ts) = timestamps {
            rec.push(&ts[t]);
        }
        for c in 0..width {
            rec.push(if mask.data()[t * width + c] == 1.0 { "1" } else { "0" });
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| GrinError::ingest(path.display().to_string(), e.to_string()))
}

/// Loads a dataset from a values table, an optional observation mask that
/// overrides the empty-cell inference, an optional evaluation mask and an
/// optional edge list.
pub fn load_csv_dataset(
    values_path: &Path,
    mask_path: Option<&Path>,
    eval_mask_path: Option<&Path>,
    adjacency_path: Option<&Path>,
    directed: bool,
) -> Result<(TimeSeriesDataset, Option<GraphSpec>)> {
    let name = values_path.display().to_string();
    let table = read_values_csv(open(values_path)?, &name)?;
    let observed = match mask_path {
        Some(p) => {
            let file = p.display().to_string();
            let mask = read_mask_csv(open(p)?, &file, &table)?;
            if let Some(i) = mask
                .data()
                .iter()
                .zip(table.present.data())
                .position(|(&m, &p)| m == 1.0 && p == 0.0)
            {
                let width = table.node_ids.len() * table.feature_names.len();
                return Err(GrinError::ingest(
                    format!("{file} row {}, column {}", i / width + 2, i % width + 1),
                    "mask marks an empty values cell as observed",
                ));
            }
            mask
        }
        None => table.present.clone(),
    };
    let mut ds = TimeSeriesDataset::new(table.values, observed)?;
    ds.node_ids = table.node_ids;
    ds.feature_names = table.feature_names;
    ds.timestamps = table.timestamps;
    if let Some(p) = eval_mask_path {
        let file = p.display().to_string();
        let like = CsvTable {
            values: ds.values.clone(),
            present: ds.observed_mask.clone(),
            node_ids: ds.node_ids.clone(),
            feature_names: ds.feature_names.clone(),
            timestamps: None,
        };
        let eval = read_mask_csv(open(p)?, &file, &like)?;
        ds.set_eval_mask(eval)
            .map_err(|e| GrinError::ingest(file, e.to_string()))?;
    }
    let graph = match adjacency_path {
        Some(p) => {
            let g = GraphSpec::read_edge_csv(open(p)?, Some(ds.n_nodes()), directed).map_err(|e| match e {
                GrinError::Ingestion { location, message } => {
                    GrinError::ingest(format!("{}: {location}", p.display()), message)
                }
                other => GrinError::ingest(p.display().to_string(), other.to_string()),
            })?;
            Some(g.with_node_ids(ds.node_ids.clone())?)
        }
        None => None,
    };
    Ok((ds, graph))
}
