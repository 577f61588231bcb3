//! `graph.json` plus a binary feature sidecar.
//!
//! Sidecar layout: magic `GREF`, little-endian u64 rows, u64 cols, then
//! rows·cols little-endian f64 values in row-major order. Nothing may follow.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::numkit::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GREF";
const HEADER_LEN: usize = 4 + 8 + 8;
pub const GRAPH_FILE: &str = "graph.json";
const DEFAULT_FEATURES_FILE: &str = "features.bin";

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeId {
    Text(String),
    Number(i64),
}

impl NodeId {
    fn into_string(self) -> String {
        match self {
            NodeId::Text(s) => s,
            NodeId::Number(n) => n.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    nodes: Vec<NodeId>,
    edges: Vec<[usize; 2]>,
    labels: Vec<usize>,
    num_features: usize,
    features_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_names: Option<Vec<String>>,
}

pub fn load_generic_json(dir: &Path) -> Result<Graph> {
    let path = dir.join(GRAPH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: GraphFile = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.line(), e.to_string()))?;

    let n = file.nodes.len();
    let features = read_features_file(&dir.join(&file.features_file))?;
    if features.dim() != (n, file.num_features) {
        return Err(Error::Data(format!(
            "{}: features are {}x{} but graph.json declares {n} nodes and {} features",
            file.features_file,
            features.nrows(),
            features.ncols(),
            file.num_features
        )));
    }
    let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
    if let Some(bad) = edges.iter().position(|&(i, j)| i >= n || j >= n) {
        return Err(Error::Data(format!("edge #{bad} {:?} references an unknown node index", file.edges[bad])));
    }
    let inferred = file.labels.iter().max().map_or(0, |&m| m + 1);
    let num_classes = file.num_classes.unwrap_or(inferred);
    let (graph, cleanup) = Graph::from_edges(features, &edges, file.labels, num_classes)?;
    if cleanup.self_loops > 0 || cleanup.duplicates > 0 {
        log::warn!(
            "{}: dropped {} self-loops and {} duplicate edges",
            path.display(),
            cleanup.self_loops,
            cleanup.duplicates
        );
    }
    let names = file.nodes.into_iter().map(NodeId::into_string).collect();
    let graph = graph.with_names(names)?;
    match file.label_names {
        Some(l) => graph.with_label_names(l),
        None => Ok(graph),
    }
}

/// Writes `graph.json` and `features.bin` into `dir` (created if needed).
/// Each undirected edge is written once as `[i, j]` with `i < j`.
pub fn write_generic_json(graph: &Graph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nodes = match graph.names() {
        Some(names) => names.iter().cloned().map(NodeId::Text).collect(),
        None => (0..graph.num_nodes()).map(|i| NodeId::Text(i.to_string())).collect(),
    };
    let edges = graph.adjacency().iter().filter(|(i, j)| i < j).map(|(i, j)| [i, j]).collect();
    let file = GraphFile {
        nodes,
        edges,
        labels: graph.labels().to_vec(),
        num_features: graph.feature_dim(),
        features_file: DEFAULT_FEATURES_FILE.to_string(),
        num_classes: Some(graph.num_classes()),
        label_names: graph.label_names().map(<[String]>::to_vec),
    };
    let path = dir.join(GRAPH_FILE);
    let text = serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_features_file(graph.features(), &dir.join(DEFAULT_FEATURES_FILE))
}

pub fn write_features_file(m: &Matrix, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing GREF header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| bad(format!("implausible shape {rows}x{cols}")))?;
    if (bytes.len() as u64) < expected {
        return Err(bad(format!("truncated: {} bytes, expected {expected}", bytes.len())));
    }
    if (bytes.len() as u64) > expected {
        return Err(bad(format!("{} bytes of trailing garbage", bytes.len() as u64 - expected)));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Matrix::from_shape_vec((rows as usize, cols as usize), values).expect("length checked against header"))
}
