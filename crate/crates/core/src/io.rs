//! On-disk formats: models as a JSON manifest plus a binary tensor blob,
//! datasets as delimited text with the label in the last column.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, ModelGraph, NodeId, Param, ParamRole};
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "enprune-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub role: ParamRole,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor's record inside the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub params: Vec<TensorEntry>,
}

/// Topology, attributes and tensor index of a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub output: NodeId,
    pub nodes: Vec<NodeEntry>,
}

/// Serializes `g` into manifest text and blob bytes.
pub fn encode_model(g: &ModelGraph) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(g.len());
    for n in g.nodes() {
        let mut params = Vec::with_capacity(n.params.len());
        for p in &n.params {
            params.push(TensorEntry {
                role: p.role,
                shape: p.value.shape().to_vec(),
                offset: blob.len() as u64,
            });
            p.value.write_blob(&mut blob)?;
        }
        nodes.push(NodeEntry {
            name: n.name.clone(),
            kind: n.kind.clone(),
            inputs: n.inputs.clone(),
            params,
        });
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        output: g.output(),
        nodes,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    Ok((text + "\n", blob))
}

pub fn parse_manifest(text: &str) -> Result<ModelManifest> {
    let m: ModelManifest = serde_json::from_str(text).map_err(|e| Error::Data(format!("bad model manifest: {e}")))?;
    if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
        return Err(Error::Data(format!(
            "unsupported model format '{}' version {}",
            m.format, m.version
        )));
    }
    Ok(m)
}

/// Rebuilds a graph from manifest text and blob bytes; the result is validated.
pub fn decode_model(manifest: &str, blob: &[u8]) -> Result<ModelGraph> {
    let m = parse_manifest(manifest)?;
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for (id, n) in m.nodes.into_iter().enumerate() {
        let mut params = Vec::with_capacity(n.params.len());
        for e in n.params {
            let start = usize::try_from(e.offset)
                .ok()
                .filter(|&s| s <= blob.len())
                .ok_or_else(|| Error::Data(format!("tensor offset {} outside the blob", e.offset)))?;
            let value = Tensor::read_blob(&mut &blob[start..])?;
            if value.shape() != e.shape.as_slice() {
                return Err(Error::Data(format!(
                    "{} of '{}': manifest says {:?}, blob holds {:?}",
                    e.role.name(),
                    n.name,
                    e.shape,
                    value.shape()
                )));
            }
            params.push(Param { role: e.role, value });
        }
        nodes.push(LayerNode {
            id,
            name: n.name,
            kind: n.kind,
            inputs: n.inputs,
            params,
        });
    }
    ModelGraph::new(nodes, m.output).map_err(|e| Error::Data(format!("invalid model: {e}")))
}

/// Blob path belonging to a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (manifest) and its sibling `.bin` blob.
pub fn save_model(g: &ModelGraph, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        return Err(Error::Config(format!("model manifest path {} collides with its blob", path.display())));
    }
    let (text, blob) = encode_model(g)?;
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let blob_file = blob_path(path);
    fs::write(&blob_file, blob).map_err(|e| Error::Io(format!("{}: {e}", blob_file.display())))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let blob_file = blob_path(path);
    let blob = fs::read(&blob_file).map_err(|e| Error::Io(format!("{}: {e}", blob_file.display())))?;
    decode_model(&text, &blob)
}

/// Comment line carrying the per-sample shape and class count.
fn dataset_meta(d: &Dataset) -> String {
    let shape: Vec<String> = d.sample_shape().iter().map(|s| s.to_string()).collect();
    format!("# shape={} classes={}", shape.join("x"), d.classes)
}

fn parse_meta(line: &str) -> Result<(Vec<usize>, usize)> {
    let bad = || Error::Data(format!("bad dataset header '{line}'"));
    let (mut shape, mut classes) = (None, None);
    for field in line.trim_start_matches('#').split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "shape" => {
                shape = Some(
                    v.split('x')
                        .map(|s| s.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            "classes" => classes = Some(v.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    Ok((shape.ok_or_else(bad)?, classes.ok_or_else(bad)?))
}

/// CSV text: a `# shape=.. classes=..` line, a header, then one sample per
/// row with the flattened features followed by the label.
pub fn dataset_to_csv(d: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let dim = d.sample_len();
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for (i, &y) in d.y.iter().enumerate() {
        let mut row: Vec<String> = d.x.data()[i * dim..(i + 1) * dim].iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    let body = String::from_utf8(body).map_err(|e| Error::Data(e.to_string()))?;
    Ok(format!("{}\n{body}", dataset_meta(d)))
}

/// Parses [`dataset_to_csv`] output. Without the shape line, samples are
/// flat vectors and the class count is one more than the largest label.
pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let meta = text.lines().next().filter(|l| l.starts_with('#')).map(parse_meta).transpose()?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut width = None;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {}: {e}", i + 1)))?;
        if rec.len() < 2 {
            return Err(Error::Data(format!("row {} has no features", i + 1)));
        }
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Data(format!("row {} has {} columns, expected {}", i + 1, rec.len(), width.unwrap())));
        }
        for field in rec.iter().take(rec.len() - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {}: bad number '{field}'", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}: non-finite feature", i + 1)));
            }
            xs.push(v);
        }
        let label = &rec[rec.len() - 1];
        ys.push(
            label
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("row {}: bad label '{label}'", i + 1)))?,
        );
    }
    let dim = width.ok_or_else(|| Error::Data("dataset has no rows".into()))? - 1;
    let (shape, classes) = match meta {
        Some((shape, classes)) => (shape, classes),
        None => (vec![dim], ys.iter().max().map_or(0, |m| m + 1)),
    };
    if shape.iter().product::<usize>() != dim {
        return Err(Error::Data(format!("sample shape {shape:?} does not match {dim} feature columns")));
    }
    let mut full = vec![ys.len()];
    full.extend(shape);
    let x = Tensor::new(full, xs).map_err(|e| Error::Data(e.to_string()))?;
    Dataset::new(x, ys, classes).map_err(|e| Error::Data(e.to_string()))
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_csv(d)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    dataset_from_csv(&text)
}
