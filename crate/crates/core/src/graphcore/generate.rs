//! Synthetic labelled graphs for every task family.
//!
//! Graphs are homophilous random graphs: each node gets a colour, and an edge
//! between two nodes appears with probability `edge_prob * (1 + homophily)`
//! when their colours match and `edge_prob * (1 - homophily)` otherwise. Node
//! texts name the colour; edge descriptions name a random strength and whether
//! the endpoint colours agree.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bfs_all_pairs, Center, FeatureMatrix, Graph};
use crate::family::{CenterKind, TaskFamily};
use crate::seed::rng_for;
use crate::{Error, Result};

pub const CLASS_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];

const STRENGTHS: [&str; 2] = ["strong", "weak"];
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub edge_prob: f64,
    #[serde(default = "default_homophily")]
    pub homophily: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub num_instances: usize,
}

fn default_homophily() -> f64 {
    0.5
}

fn default_classes() -> usize {
    3
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_nodes: 5,
            max_nodes: 9,
            edge_prob: 0.3,
            homophily: default_homophily(),
            num_classes: default_classes(),
            num_instances: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, family: TaskFamily) -> Result<()> {
        if self.min_nodes == 0 {
            return Err(Error::Generator("min_nodes = 0 produces empty graphs".into()));
        }
        if self.min_nodes > self.max_nodes {
            return Err(Error::Generator(format!(
                "min_nodes {} exceeds max_nodes {}",
                self.min_nodes, self.max_nodes
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) || !(0.0..=1.0).contains(&self.homophily) {
            return Err(Error::Generator("edge_prob and homophily must lie in [0, 1]".into()));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::Generator(format!(
                "num_classes must be in 1..={}",
                CLASS_NAMES.len()
            )));
        }
        if family.center_kind() == CenterKind::Pair && self.min_nodes < 2 {
            return Err(Error::Generator(format!("{family} needs at least two nodes per graph")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Binary(bool),
    Class(usize),
    Count(u32),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Binary(b) => f64::from(u8::from(b)),
            Label::Class(c) => c as f64,
            Label::Count(k) => f64::from(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub graph: Graph,
    pub center: Center,
    pub label: Label,
}

/// Generates `params.num_instances` labelled instances. Instance `k` draws
/// from its own stream seeded by `seed + k`, so the output is identical
/// whether instances are generated in one call or partitioned.
pub fn gen_synthetic(family: TaskFamily, params: &GeneratorConfig, seed: u64) -> Result<Vec<SyntheticInstance>> {
    params.validate(family)?;
    (0..params.num_instances)
        .map(|k| {
            let mut rng = rng_for(seed.wrapping_add(k as u64), family.tag());
            gen_one(family, params, k, &mut rng)
        })
        .collect()
}

fn random_graph(params: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Graph, Vec<usize>) {
    let n = rng.random_range(params.min_nodes..=params.max_nodes);
    let colors: Vec<usize> = (0..n).map(|_| rng.random_range(0..params.num_classes)).collect();
    let texts = colors.iter().map(|&c| format!("{} node", CLASS_NAMES[c])).collect();
    let mut g = Graph::new(texts, false).expect("n >= 1");
    let p_same = (params.edge_prob * (1.0 + params.homophily)).min(1.0);
    let p_diff = params.edge_prob * (1.0 - params.homophily);
    for i in 0..n {
        for j in i + 1..n {
            let same = colors[i] == colors[j];
            if rng.random_bool(if same { p_same } else { p_diff }) {
                let strength = STRENGTHS[rng.random_range(0..STRENGTHS.len())];
                let kind = if same { "similar" } else { "contrasting" };
                g.add_edge(i, j, format!("{strength} {kind} link")).expect("valid edge");
            }
        }
    }
    let mut onehot = vec![0.0; n * params.num_classes];
    for (i, &c) in colors.iter().enumerate() {
        onehot[i * params.num_classes + c] = 1.0;
    }
    g.set_node_features(FeatureMatrix::new(n, params.num_classes, onehot).expect("shape"))
        .expect("rows match");
    (g, colors)
}

/// Majority colour over the closed neighbourhood; ties go to the lowest class index.
pub(crate) fn neighborhood_majority(g: &Graph, colors: &[usize], center: usize, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    counts[colors[center]] += 1;
    for v in g.neighbors(center) {
        counts[colors[v]] += 1;
    }
    let best = *counts.iter().max().expect("classes >= 1");
    counts.iter().position(|&c| c == best).expect("max exists")
}

pub(crate) fn common_neighbors(g: &Graph, u: usize, v: usize) -> u32 {
    g.neighbors(u).filter(|&w| g.has_edge(v, w)).count() as u32
}

pub(crate) fn cycle_rank(g: &Graph) -> u32 {
    (g.edge_count() + g.component_count() - g.num_nodes()) as u32
}

pub(crate) fn has_triangle(g: &Graph) -> bool {
    let n = g.num_nodes();
    (0..n).any(|a| {
        g.neighbors(a)
            .filter(|&b| b > a)
            .any(|b| g.neighbors(b).filter(|&c| c > b).any(|c| g.has_edge(a, c)))
    })
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v))).collect()
}

fn gen_one(family: TaskFamily, params: &GeneratorConfig, k: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticInstance> {
    // balanced binary families alternate the requested label
    let want = k % 2 == 0;
    for _ in 0..MAX_REDRAWS {
        let (g, colors) = random_graph(params, rng);
        let n = g.num_nodes();
        let picked = match family {
            TaskFamily::NodeCls => {
                let c = rng.random_range(0..n);
                Some((Center::Node(c), Label::Class(neighborhood_majority(&g, &colors, c, params.num_classes))))
            }
            TaskFamily::Conn => {
                let spd = bfs_all_pairs(&g);
                let pool: Vec<_> = all_pairs(n).into_iter().filter(|&(u, v)| spd.reachable(u, v) == want).collect();
                pool.choose(rng).map(|&(u, v)| (Center::Pair(u, v), Label::Binary(want)))
            }
            TaskFamily::Spd => {
                let spd = bfs_all_pairs(&g);
                let pool: Vec<_> = all_pairs(n).into_iter().filter(|&(u, v)| spd.reachable(u, v)).collect();
                pool.choose(rng).map(|&(u, v)| (Center::Pair(u, v), Label::Count(spd.get(u, v))))
            }
            TaskFamily::Cn => {
                let pairs = all_pairs(n);
                let &(u, v) = pairs.choose(rng).expect("n >= 2");
                Some((Center::Pair(u, v), Label::Count(common_neighbors(&g, u, v))))
            }
            TaskFamily::LinkPred => {
                let pool: Vec<_> = all_pairs(n).into_iter().filter(|&(u, v)| g.has_edge(u, v) == want).collect();
                pool.choose(rng).map(|&(u, v)| (Center::Pair(u, v), Label::Binary(want)))
            }
            TaskFamily::GraphCls => {
                let tri = has_triangle(&g);
                (tri == want).then_some((Center::Whole, Label::Binary(tri)))
            }
            TaskFamily::GraphReg => Some((Center::Whole, Label::Count(g.edge_count() as u32))),
            TaskFamily::Cycle => Some((Center::Whole, Label::Count(cycle_rank(&g)))),
        };
        if let Some((center, label)) = picked {
            return Ok(SyntheticInstance { graph: g, center, label });
        }
    }
    Err(Error::Generator(format!(
        "{family}: no valid instance after {MAX_REDRAWS} draws; adjust edge_prob or node counts"
    )))
}
