//! Graph serialization.
//!
//! Line-oriented text:
//!
//! ```text
//! 3 0
//! node 0 "red node"
//! node 1 "blue node"
//! node 2 "red node"
//! edge 0 1 "strong contrasting link"
//! edge 1 2 "weak contrasting link"
//! ```
//!
//! The header is `N directed_flag`. Quoted strings use JSON escaping.
//! Undirected edges are written once with `i < j`.

use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, Graph};
use crate::{Error, Result};

pub fn write_graph_text(graph: &Graph) -> String {
    let mut out = format!("{} {}\n", graph.num_nodes(), u8::from(graph.is_directed()));
    for (i, t) in graph.node_texts().iter().enumerate() {
        out.push_str(&format!("node {i} {}\n", quote(t)));
    }
    for (i, j) in graph.edges() {
        let d = graph.description(i, j).unwrap_or_default();
        out.push_str(&format!("edge {i} {j} {}\n", quote(d)));
    }
    out
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn read_graph_text(text: &str) -> Result<Graph> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
    let mut it = header.split_whitespace();
    let bad = |line: usize, msg: &str| Error::Parse { line: line + 1, msg: msg.to_string() };
    let n: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(hline, "bad node count"))?;
    let directed = match it.next() {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(bad(hline, "directed flag must be 0 or 1")),
    };
    if n == 0 {
        return Err(bad(hline, "graph must have at least one node"));
    }
    let mut texts: Vec<Option<String>> = vec![None; n];
    let mut edges = Vec::new();
    for (ln, line) in lines {
        let line = line.trim();
        let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(ln, "expected `node` or `edge` record"))?;
        match kind {
            "node" => {
                let (idx, text) = split_index(rest).ok_or_else(|| bad(ln, "malformed node line"))?;
                let text: String = serde_json::from_str(text).map_err(|e| bad(ln, &e.to_string()))?;
                let slot = texts.get_mut(idx).ok_or_else(|| bad(ln, "node index out of range"))?;
                *slot = Some(text);
            }
            "edge" => {
                let (i, rest) = split_index(rest).ok_or_else(|| bad(ln, "malformed edge line"))?;
                let (j, desc) = split_index(rest).ok_or_else(|| bad(ln, "malformed edge line"))?;
                let desc: String = serde_json::from_str(desc).map_err(|e| bad(ln, &e.to_string()))?;
                edges.push((ln, i, j, desc));
            }
            _ => return Err(bad(ln, "expected `node` or `edge` record")),
        }
    }
    let texts = texts
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Graph(format!("node {i} has no text line"))))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(texts, directed)?;
    for (ln, i, j, desc) in edges {
        g.add_edge(i, j, desc).map_err(|e| bad(ln, &e.to_string()))?;
    }
    Ok(g)
}

fn split_index(s: &str) -> Option<(usize, &str)> {
    let s = s.trim_start();
    let (head, tail) = s.split_once(' ')?;
    Some((head.parse().ok()?, tail.trim()))
}

/// JSON payload used inside dataset records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphPayload {
    pub n: usize,
    pub directed: bool,
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_features: Option<FeatureMatrix>,
}

impl From<&Graph> for GraphPayload {
    fn from(g: &Graph) -> Self {
        Self {
            n: g.num_nodes(),
            directed: g.is_directed(),
            nodes: g.node_texts().to_vec(),
            edges: g
                .edges()
                .into_iter()
                .map(|(i, j)| (i, j, g.description(i, j).unwrap_or_default().to_string()))
                .collect(),
            node_features: g.node_features().cloned(),
        }
    }
}

impl TryFrom<GraphPayload> for Graph {
    type Error = Error;

    fn try_from(p: GraphPayload) -> Result<Graph> {
        if p.nodes.len() != p.n {
            return Err(Error::Graph(format!("payload lists {} texts for {} nodes", p.nodes.len(), p.n)));
        }
        let mut g = Graph::new(p.nodes, p.directed)?;
        for (i, j, d) in p.edges {
            g.add_edge(i, j, d)?;
        }
        if let Some(x) = p.node_features {
            g.set_node_features(x)?;
        }
        Ok(g)
    }
}
