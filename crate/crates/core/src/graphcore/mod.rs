//! Attributed graphs, unweighted shortest paths and k-hop subgraph sampling.

mod generate;
mod io;
mod paths;

pub mod canon;

pub use canon::canonical_order;
pub use generate::{gen_synthetic, GeneratorConfig, Label, SyntheticInstance, CLASS_NAMES};
pub use io::{GraphPayload, read_graph_text, write_graph_text};
pub use paths::{bfs_all_pairs, shortest_path_edge_weights, shortest_path_edges, ShortestPathTable};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major real matrix used for optional node / edge features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Graph(format!(
                "feature matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Attributed graph with a dense adjacency matrix.
///
/// Undirected graphs store every edge in both orientations, including its
/// description, so `description(i, j)` works regardless of traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    directed: bool,
    adjacency: Vec<bool>,
    node_texts: Vec<String>,
    edge_descriptions: BTreeMap<(usize, usize), String>,
    node_features: Option<FeatureMatrix>,
    edge_features: Option<FeatureMatrix>,
}

impl Graph {
    pub fn new(node_texts: Vec<String>, directed: bool) -> Result<Self> {
        let n = node_texts.len();
        if n == 0 {
            return Err(Error::Graph("graph must have at least one node".into()));
        }
        Ok(Self {
            num_nodes: n,
            directed,
            adjacency: vec![false; n * n],
            node_texts,
            edge_descriptions: BTreeMap::new(),
            node_features: None,
            edge_features: None,
        })
    }

    /// Graph with `n` nodes labelled `"node"` and no edges.
    pub fn unlabeled(n: usize, directed: bool) -> Result<Self> {
        Self::new(vec!["node".to_string(); n], directed)
    }

    /// Builds an undirected graph from an edge list, every edge described as `"edge"`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::unlabeled(n, false)?;
        for &(i, j) in edges {
            g.add_edge(i, j, "edge")?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, i: usize, j: usize, description: impl Into<String>) -> Result<()> {
        let n = self.num_nodes;
        if i >= n || j >= n {
            return Err(Error::Graph(format!("edge ({i},{j}) out of range for {n} nodes")));
        }
        if i == j {
            return Err(Error::Graph(format!("self-loop at node {i}")));
        }
        let desc = description.into();
        self.adjacency[i * n + j] = true;
        self.edge_descriptions.insert((i, j), desc.clone());
        if !self.directed {
            self.adjacency[j * n + i] = true;
            self.edge_descriptions.insert((j, i), desc);
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.num_nodes + j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn node_text(&self, i: usize) -> &str {
        &self.node_texts[i]
    }

    pub fn set_node_text(&mut self, i: usize, text: impl Into<String>) {
        self.node_texts[i] = text.into();
    }

    pub fn node_texts(&self) -> &[String] {
        &self.node_texts
    }

    pub fn description(&self, i: usize, j: usize) -> Option<&str> {
        self.edge_descriptions.get(&(i, j)).map(String::as_str)
    }

    /// Out-neighbours in ascending id order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.num_nodes;
        (0..n).filter(move |&j| self.adjacency[i * n + j])
    }

    /// Neighbours ignoring direction.
    pub fn undirected_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.num_nodes;
        (0..n).filter(move |&j| self.adjacency[i * n + j] || self.adjacency[j * n + i])
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Edge list; undirected edges appear once as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[i * n + j] && (self.directed || i < j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        let arcs = self.adjacency.iter().filter(|&&a| a).count();
        if self.directed {
            arcs
        } else {
            arcs / 2
        }
    }

    pub fn node_features(&self) -> Option<&FeatureMatrix> {
        self.node_features.as_ref()
    }

    pub fn set_node_features(&mut self, x: FeatureMatrix) -> Result<()> {
        if x.rows != self.num_nodes {
            return Err(Error::Graph(format!(
                "node features have {} rows for {} nodes",
                x.rows, self.num_nodes
            )));
        }
        self.node_features = Some(x);
        Ok(())
    }

    pub fn edge_features(&self) -> Option<&FeatureMatrix> {
        self.edge_features.as_ref()
    }

    /// Edge features are row-aligned with [`Graph::edges`].
    pub fn set_edge_features(&mut self, e: FeatureMatrix) -> Result<()> {
        if e.rows != self.edge_count() {
            return Err(Error::Graph(format!(
                "edge features have {} rows for {} edges",
                e.rows,
                self.edge_count()
            )));
        }
        self.edge_features = Some(e);
        Ok(())
    }

    /// Number of weakly connected components.
    pub fn component_count(&self) -> usize {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        let mut count = 0;
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([s]);
            seen[s] = true;
            while let Some(u) = queue.pop_front() {
                for v in self.undirected_neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        count
    }

    /// Relabels nodes: old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        check_permutation(perm, self.num_nodes)?;
        let n = self.num_nodes;
        let mut texts = vec![String::new(); n];
        for (i, t) in self.node_texts.iter().enumerate() {
            texts[perm[i]] = t.clone();
        }
        let mut g = Graph::new(texts, self.directed)?;
        for (&(i, j), d) in &self.edge_descriptions {
            g.adjacency[perm[i] * n + perm[j]] = true;
            g.edge_descriptions.insert((perm[i], perm[j]), d.clone());
        }
        if let Some(x) = &self.node_features {
            let mut data = vec![0.0; x.data.len()];
            for i in 0..n {
                data[perm[i] * x.cols..(perm[i] + 1) * x.cols].copy_from_slice(x.row(i));
            }
            g.node_features = Some(FeatureMatrix::new(n, x.cols, data)?);
        }
        if let Some(e) = &self.edge_features {
            let old_edges = self.edges();
            let new_edges = g.edges();
            let mut data = vec![0.0; e.data.len()];
            for (k, &(i, j)) in old_edges.iter().enumerate() {
                let (a, b) = (perm[i], perm[j]);
                let key = if self.directed || a < b { (a, b) } else { (b, a) };
                let row = new_edges.iter().position(|&x| x == key).expect("edge survives relabeling");
                data[row * e.cols..(row + 1) * e.cols].copy_from_slice(e.row(k));
            }
            g.edge_features = Some(FeatureMatrix::new(e.rows, e.cols, data)?);
        }
        Ok(g)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Invalid(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Invalid(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Query center of a task: a node, an ordered node pair, or the whole graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Center {
    Node(usize),
    Pair(usize, usize),
    Whole,
}

impl Center {
    fn map(self, f: impl Fn(usize) -> usize) -> Center {
        match self {
            Center::Node(i) => Center::Node(f(i)),
            Center::Pair(i, j) => Center::Pair(f(i), f(j)),
            Center::Whole => Center::Whole,
        }
    }
}

/// Induced k-hop subgraph around a center, in local indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSample {
    /// Original node ids; local node `a` is `nodes[a]` in the parent graph.
    pub nodes: Vec<usize>,
    pub directed: bool,
    /// Induced `n x n` adjacency in local indexing.
    pub adjacency: Vec<bool>,
    pub spd: ShortestPathTable,
    /// Center in local indices.
    pub center: Center,
    pub hop_radius: usize,
}

impl SubgraphSample {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.nodes.len() + b]
    }

    pub fn degree(&self, a: usize) -> usize {
        let n = self.nodes.len();
        (0..n).filter(|&b| self.adjacency[a * n + b]).count()
    }

    /// Attributed graph over the sampled nodes, local indexing.
    pub fn induced_graph(&self, parent: &Graph) -> Result<Graph> {
        let texts = self.nodes.iter().map(|&v| parent.node_text(v).to_string()).collect();
        let mut g = Graph::new(texts, self.directed)?;
        let n = self.nodes.len();
        for a in 0..n {
            for b in 0..n {
                if self.adjacency[a * n + b] && (self.directed || a < b) {
                    let desc = parent
                        .description(self.nodes[a], self.nodes[b])
                        .unwrap_or_default()
                        .to_string();
                    g.add_edge(a, b, desc)?;
                }
            }
        }
        if let Some(x) = parent.node_features() {
            let data = self.nodes.iter().flat_map(|&v| x.row(v).iter().copied()).collect();
            g.set_node_features(FeatureMatrix::new(n, x.cols, data)?)?;
        }
        Ok(g)
    }

    /// Edge set in original node ids, sorted; undirected edges as `(min, max)`.
    pub fn canonical_edge_set(&self) -> Vec<(usize, usize)> {
        let n = self.nodes.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if self.adjacency[a * n + b] {
                    let (u, v) = (self.nodes[a], self.nodes[b]);
                    if self.directed {
                        out.push((u, v));
                    } else if u < v {
                        out.push((u, v));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Reorders the sample: local node `a` moves to position `perm[a]`.
    /// Original ids travel with their nodes.
    pub fn permuted(&self, perm: &[usize]) -> Result<SubgraphSample> {
        let n = self.nodes.len();
        check_permutation(perm, n)?;
        let mut nodes = vec![0; n];
        let mut adjacency = vec![false; n * n];
        let mut dist = vec![0; n * n];
        for a in 0..n {
            nodes[perm[a]] = self.nodes[a];
            for b in 0..n {
                adjacency[perm[a] * n + perm[b]] = self.adjacency[a * n + b];
                dist[perm[a] * n + perm[b]] = self.spd.get(a, b);
            }
        }
        Ok(SubgraphSample {
            nodes,
            directed: self.directed,
            adjacency,
            spd: ShortestPathTable::from_raw(n, dist),
            center: self.center.map(|a| perm[a]),
            hop_radius: self.hop_radius,
        })
    }
}

/// Extracts the induced subgraph of all nodes within `hop_radius` of the
/// center (union over both endpoints for a pair; direction ignored).
///
/// When more than `max_nodes` nodes qualify, nodes are kept by ascending BFS
/// layer and then ascending node id; the retained list is stored in that
/// order. A whole-graph center keeps every node in id order.
pub fn extract_khop(graph: &Graph, center: Center, hop_radius: usize, max_nodes: usize) -> Result<SubgraphSample> {
    let n = graph.num_nodes();
    let sources: Vec<usize> = match center {
        Center::Node(i) => vec![i],
        Center::Pair(i, j) => {
            if i == j {
                return Err(Error::Invalid(format!("pair center needs distinct nodes, got ({i},{j})")));
            }
            vec![i, j]
        }
        Center::Whole => Vec::new(),
    };
    if let Some(&bad) = sources.iter().find(|&&s| s >= n) {
        return Err(Error::Invalid(format!("center node {bad} out of range for {n} nodes")));
    }

    let nodes: Vec<usize> = if center == Center::Whole {
        (0..n).collect()
    } else {
        if max_nodes < sources.len() {
            return Err(Error::Invalid(format!("max_nodes {max_nodes} cannot hold the center")));
        }
        let mut layer = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for &s in &sources {
            layer[s] = 0;
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            if layer[u] == hop_radius {
                continue;
            }
            for v in graph.undirected_neighbors(u) {
                if layer[v] == usize::MAX {
                    layer[v] = layer[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let mut kept: Vec<usize> = (0..n).filter(|&v| layer[v] != usize::MAX).collect();
        kept.sort_by_key(|&v| (layer[v], v));
        kept.truncate(max_nodes);
        kept
    };

    let k = nodes.len();
    let mut adjacency = vec![false; k * k];
    for a in 0..k {
        for b in 0..k {
            adjacency[a * k + b] = graph.has_edge(nodes[a], nodes[b]);
        }
    }
    let spd = paths::bfs_dense(k, &adjacency);
    let local = |v: usize| nodes.iter().position(|&x| x == v).expect("center retained");
    let center = center.map(local);
    Ok(SubgraphSample { nodes, directed: graph.is_directed(), adjacency, spd, center, hop_radius })
}
