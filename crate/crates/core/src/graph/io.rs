//! JSON graph files.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "feature_dim": 2,
//!   "nodes": [{"id": 0, "feat": [0.1, 0.2], "label": 3}, ...],
//!   "edges": [{"src": 0, "rel": 0, "dst": 1, "label": 0}, ...],
//!   "relations": {"0": "cites"}
//! }
//! ```
//!
//! `label` is optional on nodes and edges. Node ids must be `0..n` in any
//! order. Floats are written in shortest round-trip form, so save/load is
//! exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Edge, Graph, Node, RelationId};
use crate::error::{Error, Result};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    format_version: u32,
    feature_dim: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    #[serde(default)]
    relations: BTreeMap<RelationId, String>,
}

pub fn load_graph(path: &Path) -> Result<Graph> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_graph(BufReader::new(f))
}

pub fn parse_graph(reader: impl Read) -> Result<Graph> {
    let file: GraphFile = serde_json::from_reader(reader).map_err(|e| Error::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.format_version != GRAPH_FORMAT_VERSION {
        return Err(Error::InvalidGraph(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    Graph::new(file.feature_dim, file.nodes, file.edges, file.relations)
}

pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_graph(g, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_graph(g: &Graph, w: &mut impl Write) -> Result<()> {
    let file = GraphFile {
        format_version: GRAPH_FORMAT_VERSION,
        feature_dim: g.feature_dim(),
        nodes: g.nodes().to_vec(),
        edges: g.edges().to_vec(),
        relations: g.relations().clone(),
    };
    serde_json::to_writer(&mut *w, &file)?;
    w.write_all(b"\n")
        .map_err(|e| Error::io("<graph writer>", e))
}
