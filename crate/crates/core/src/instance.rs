//! A labelled task instance: the subgraph sample seen by the encoder plus
//! every token sequence the losses need.

use serde::{Deserialize, Serialize};

use crate::family::{AnswerKind, CenterKind};
use crate::graphcore::{extract_khop, Center, Graph, Label, SubgraphSample, CLASS_NAMES};
use crate::tasktext::{DetailFields, TaskText};
use crate::{Error, Result, TaskFamily};

/// Word prepended to the text of query nodes so the encoder can tell which
/// node or pair a question is about.
pub const QUERY_MARKER: &str = "query";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub hop_radius: usize,
    pub max_nodes: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { hop_radius: 2, max_nodes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub family: TaskFamily,
    pub sample: SubgraphSample,
    /// Induced subgraph in local indexing; query nodes carry the marker.
    pub graph: Graph,
    pub label: Label,
    pub num_classes: usize,
    pub detail: DetailFields,
    pub detail_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    pub reconstruction_tokens: Vec<u32>,
    pub numeric_target: Option<f64>,
}

impl TaskInstance {
    pub fn new(
        text: &TaskText,
        family: TaskFamily,
        parent: &Graph,
        center: Center,
        label: Label,
        sampling: SamplingConfig,
        num_classes: usize,
    ) -> Result<Self> {
        let sample = extract_khop(parent, center, sampling.hop_radius, sampling.max_nodes)?;
        let mut graph = sample.induced_graph(parent)?;
        let mut detail = DetailFields { node_count: Some(sample.len()), ..Default::default() };
        match (family.center_kind(), sample.center) {
            (CenterKind::Node, Center::Node(a)) => {
                detail.center_text = Some(graph.node_text(a).to_string());
                mark(&mut graph, a);
            }
            (CenterKind::Pair, Center::Pair(a, b)) => {
                detail.first_text = Some(graph.node_text(a).to_string());
                detail.second_text = Some(graph.node_text(b).to_string());
                mark(&mut graph, a);
                mark(&mut graph, b);
            }
            (CenterKind::Whole, Center::Whole) => {}
            (kind, c) => return Err(Error::Invalid(format!("{family} expects a {kind:?} center, got {c:?}"))),
        }
        if family.answer_kind() == AnswerKind::Class {
            if num_classes == 0 || num_classes > CLASS_NAMES.len() {
                return Err(Error::Invalid(format!("num_classes {num_classes} out of range")));
            }
            detail.candidate_labels = Some(CLASS_NAMES[..num_classes].iter().map(|s| s.to_string()).collect());
        }
        let target_tokens = target_tokens(text, family, label, num_classes)?;
        let numeric_target = family.is_regression().then(|| label.as_f64());
        let detail_tokens = text.render_detail_fields(family, &detail)?;
        let reconstruction_tokens = text.render_graph_description(&sample);
        Ok(Self {
            family,
            sample,
            graph,
            label,
            num_classes,
            detail,
            detail_tokens,
            target_tokens,
            reconstruction_tokens,
            numeric_target,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.sample.len()
    }

    /// Same instance with local node `a` moved to position `perm[a]`. Token
    /// sequences are unchanged because none of them depend on node order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self { sample: self.sample.permuted(perm)?, graph: self.graph.permuted(perm)?, ..self.clone() })
    }

    /// Binary label, if the family has one.
    pub fn binary_label(&self) -> Option<bool> {
        match self.label {
            Label::Binary(b) => Some(b),
            _ => None,
        }
    }
}

fn mark(graph: &mut Graph, a: usize) {
    let t = format!("{QUERY_MARKER} {}", graph.node_text(a));
    graph.set_node_text(a, t);
}

/// Answer tokens for a label, terminated by EOS.
pub fn target_tokens(text: &TaskText, family: TaskFamily, label: Label, num_classes: usize) -> Result<Vec<u32>> {
    let v = &text.vocab;
    let mut out = match (family.answer_kind(), label) {
        (AnswerKind::Binary, Label::Binary(b)) => vec![if b { v.yes() } else { v.no() }],
        (AnswerKind::Class, Label::Class(c)) if c < num_classes => vec![v.id(CLASS_NAMES[c])?],
        (AnswerKind::Number, Label::Count(k)) => v.number(u64::from(k)),
        (_, l) => return Err(Error::Invalid(format!("label {l:?} does not fit {family}"))),
    };
    out.push(v.eos());
    Ok(out)
}

/// Every answer string a family can produce, for decoder pretraining.
pub fn legal_answers(text: &TaskText, family: TaskFamily, num_classes: usize, max_count: u32) -> Vec<Vec<u32>> {
    let labels: Vec<Label> = match family.answer_kind() {
        AnswerKind::Binary => vec![Label::Binary(true), Label::Binary(false)],
        AnswerKind::Class => (0..num_classes).map(Label::Class).collect(),
        AnswerKind::Number => (0..=max_count).map(Label::Count).collect(),
    };
    labels.into_iter().filter_map(|l| target_tokens(text, family, l, num_classes).ok()).collect()
}
