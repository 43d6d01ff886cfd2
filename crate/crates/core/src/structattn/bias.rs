use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graphcore::{shortest_path_edge_weights, Graph, ShortestPathTable, SubgraphSample};
use crate::numerics::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::tasktext::TextEmbedder;
use crate::Result;

/// Largest distinct distance bucket; longer distances share it.
pub const MAX_DIST_BUCKET: usize = 8;

/// Table row for a hop distance: distances clamp at `max`, unreachable
/// pairs use the extra row `max + 1`.
pub fn bucket(dist: u32, max: usize) -> usize {
    if dist == ShortestPathTable::UNREACHABLE {
        max + 1
    } else {
        (dist as usize).min(max)
    }
}

/// Two-layer perceptron from an edge-description embedding to one bias per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasTables {
    /// `[max_dist_bucket + 2, heads]`
    pub distance_table: ParamId,
    pub edge_mlp: EdgeMlp,
    pub heads: usize,
    pub max_dist_bucket: usize,
}

fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape")
}

impl BiasTables {
    /// Distance table starts at zero; the perceptron uses scaled normal
    /// weights and zero biases.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        d_h: usize,
        d_mlp: usize,
        heads: usize,
        max_dist_bucket: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let distance_table =
            store.add("bias.distance_table", Tensor::zeros(&[max_dist_bucket + 2, heads]), ParamGroup::DistanceTable, true);
        let w1 = store.add(
            "bias.edge_mlp.w1",
            normal_tensor(rng, &[d_h, d_mlp], 1.0 / (d_h as f64).sqrt()),
            ParamGroup::EdgeMlp,
            true,
        );
        let b1 = store.add("bias.edge_mlp.b1", Tensor::zeros(&[d_mlp]), ParamGroup::EdgeMlp, true);
        let w2 = store.add(
            "bias.edge_mlp.w2",
            normal_tensor(rng, &[d_mlp, heads], 1.0 / (d_mlp as f64).sqrt()),
            ParamGroup::EdgeMlp,
            true,
        );
        let b2 = store.add("bias.edge_mlp.b2", Tensor::zeros(&[heads]), ParamGroup::EdgeMlp, true);
        Self { distance_table, edge_mlp: EdgeMlp { w1, b1, w2, b2 }, heads, max_dist_bucket }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let e = self.edge_mlp;
        vec![self.distance_table, e.w1, e.b1, e.w2, e.b2]
    }
}

/// `[n*n, heads]` distance bias: row `i*n + j` is the table row for `dist(i, j)`.
pub fn distance_bias<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    spd: &ShortestPathTable,
    tables: &BiasTables,
) -> Result<Var> {
    let table = tape.param(store, tables.distance_table);
    let rows: Vec<usize> = spd.as_slice().iter().map(|&d| bucket(d, tables.max_dist_bucket)).collect();
    tape.gather_rows(table, &rows)
}

pub fn edge_mlp_forward<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, mlp: &EdgeMlp, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) =
        (tape.param(store, mlp.w1), tape.param(store, mlp.b1), tape.param(store, mlp.w2), tape.param(store, mlp.b2));
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2)?;
    tape.add(o, b2)
}

/// Distinct edges of the sample (undirected edges once, as `(min, max)`)
/// and the `[n*n, edges]` matrix whose row `i*n + j` holds each edge's
/// weight in the shortest-path average from `i` to `j`. Rows for `i == j`
/// and unreachable pairs are zero.
pub fn path_weight_matrix(sample: &SubgraphSample) -> (Vec<(usize, usize)>, Vec<f64>) {
    let n = sample.len();
    let key = |a: usize, b: usize| if sample.directed { (a, b) } else { (a.min(b), a.max(b)) };
    let mut index = BTreeMap::new();
    for a in 0..n {
        for b in 0..n {
            if sample.adjacency[a * n + b] {
                let k = key(a, b);
                let next = index.len();
                index.entry(k).or_insert(next);
            }
        }
    }
    let mut edges = vec![(0, 0); index.len()];
    for (&k, &i) in &index {
        edges[i] = k;
    }
    let e = edges.len();
    let mut p = vec![0.0; n * n * e];
    for i in 0..n {
        for j in 0..n {
            for ((a, b), w) in shortest_path_edge_weights(n, &sample.adjacency, &sample.spd, i, j) {
                p[(i * n + j) * e + index[&key(a, b)]] += w;
            }
        }
    }
    (edges, p)
}

/// `[n*n, heads]` edge bias: the shortest-path average of the perceptron
/// applied to each edge's description embedding. `graph` is the sample's
/// induced graph in local indexing.
pub fn edge_bias<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    sample: &SubgraphSample,
    graph: &Graph,
    embedder: &TextEmbedder,
    tables: &BiasTables,
) -> Result<Var> {
    let n = sample.len();
    let (edges, weights) = path_weight_matrix(sample);
    if edges.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[n * n, tables.heads])));
    }
    let d = embedder.dim();
    let mut emb = Vec::with_capacity(edges.len() * d);
    for &(a, b) in &edges {
        let text = graph.description(a, b).unwrap_or_default();
        emb.extend(embedder.embed_text(text).into_iter().map(T::of));
    }
    let x = tape.constant(Tensor::new(vec![edges.len(), d], emb)?);
    let out = edge_mlp_forward(tape, store, &tables.edge_mlp, x)?;
    let p = tape.constant(Tensor::new(vec![n * n, edges.len()], weights.into_iter().map(T::of).collect())?);
    tape.matmul(p, out)
}

/// Splits a `[n*n, heads]` bias into per-head `[total, total]` matrices
/// that are zero outside the graph-graph block.
pub fn graph_head_biases<T: Real>(tape: &mut Tape<T>, bias: Var, n: usize, total: usize) -> Result<Vec<Var>> {
    let heads = tape.shape(bias)[1];
    (0..heads)
        .map(|h| {
            let col = tape.slice_cols(bias, h, 1)?;
            let sq = tape.reshape(col, &[n, n])?;
            tape.pad_top_left(sq, total)
        })
        .collect()
}
