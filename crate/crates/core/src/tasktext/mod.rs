//! Closed vocabulary, prompt templates, the text-embedding stand-in and the
//! canonical graph description used as reconstruction target.

mod embed;
mod vocab;

pub use embed::{EmbedderConfig, TextEmbedder};
pub use vocab::{tokenize, Vocab, BOS, EOS, NO, PAD, SEP, SPECIALS, YES};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::family::CenterKind;
use crate::graphcore::{canonical_order, canon::relabelled_edges, SubgraphSample};
use crate::instance::TaskInstance;
use crate::{Error, Result, TaskFamily};

/// Template file shipped with the crate.
pub const DEFAULT_TEMPLATES: &str = include_str!("templates.toml");


#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub desc: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    /// Task-agnostic description used when task awareness is ablated.
    pub generic_desc: String,
    pub families: BTreeMap<TaskFamily, PromptTemplate>,
}

impl TemplateSet {
    pub fn parse(text: &str) -> Result<Self> {
        let set: TemplateSet = toml::from_str(text).map_err(|e| Error::Config(format!("templates: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("templates serialize")
    }

    fn validate(&self) -> Result<()> {
        if self.generic_desc.trim().is_empty() {
            return Err(Error::Config("templates: empty generic_desc".into()));
        }
        for (family, t) in &self.families {
            if t.desc.trim().is_empty() {
                return Err(Error::Config(format!("templates: empty desc for {family}")));
            }
            for slot in slot_names(&t.detail)? {
                let fits = match slot.as_str() {
                    "center_text" => family.center_kind() == CenterKind::Node,
                    "first_text" | "second_text" => family.center_kind() == CenterKind::Pair,
                    "candidate_labels" | "node_count" => true,
                    other => return Err(Error::Config(format!("templates: unknown slot {{{other}}} for {family}"))),
                };
                if !fits {
                    return Err(Error::Config(format!("templates: slot {{{slot}}} cannot be filled for {family}")));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, family: TaskFamily) -> Result<&PromptTemplate> {
        self.families.get(&family).ok_or_else(|| Error::UnknownFamily(family.to_string()))
    }

    /// Every template string, for vocabulary construction.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.generic_desc.as_str())
            .chain(self.families.values().flat_map(|t| [t.desc.as_str(), t.detail.as_str()]))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

fn slot_names(pattern: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("templates: unclosed slot in {pattern:?}")))?;
        out.push(rest[open + 1..open + close].to_string());
        rest = &rest[open + close + 1..];
    }
    Ok(out)
}

/// Instance-level values available to detail templates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetailFields {
    pub center_text: Option<String>,
    pub first_text: Option<String>,
    pub second_text: Option<String>,
    pub candidate_labels: Option<Vec<String>>,
    pub node_count: Option<usize>,
}

impl DetailFields {
    fn value(&self, slot: &str) -> Option<String> {
        match slot {
            "center_text" => self.center_text.clone(),
            "first_text" => self.first_text.clone(),
            "second_text" => self.second_text.clone(),
            "candidate_labels" => self.candidate_labels.as_ref().map(|l| l.join(", ")),
            "node_count" => self.node_count.map(|n| n.to_string()),
            _ => None,
        }
    }
}

/// Vocabulary plus templates: everything needed to turn tasks into token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskText {
    pub vocab: Vocab,
    pub templates: TemplateSet,
}

impl Default for TaskText {
    fn default() -> Self {
        Self::new(TemplateSet::default())
    }
}

impl TaskText {
    /// Builds the vocabulary from the template texts.
    pub fn new(templates: TemplateSet) -> Self {
        let vocab = Vocab::build(templates.texts());
        Self { vocab, templates }
    }

    /// Uses an existing vocabulary; every template word must be in it.
    pub fn with_vocab(vocab: Vocab, templates: TemplateSet) -> Result<Self> {
        for t in templates.texts() {
            vocab.encode(t)?;
        }
        Ok(Self { vocab, templates })
    }

    pub fn render_desc(&self, family: TaskFamily) -> Result<Vec<u32>> {
        self.vocab.encode_eos(&self.templates.get(family)?.desc)
    }

    pub fn render_generic_desc(&self) -> Result<Vec<u32>> {
        self.vocab.encode_eos(&self.templates.generic_desc)
    }

    pub fn render_detail(&self, instance: &TaskInstance) -> Result<Vec<u32>> {
        self.render_detail_fields(instance.family, &instance.detail)
    }

    pub fn render_detail_fields(&self, family: TaskFamily, fields: &DetailFields) -> Result<Vec<u32>> {
        let pattern = &self.templates.get(family)?.detail;
        let mut text = String::with_capacity(pattern.len() + 32);
        let mut rest = pattern.as_str();
        while let Some(open) = rest.find('{') {
            let close = open + rest[open..].find('}').expect("validated template");
            let slot = &rest[open + 1..close];
            let value = fields
                .value(slot)
                .ok_or_else(|| Error::MissingSlot { family: family.to_string(), slot: slot.to_string() })?;
            text.push_str(&rest[..open]);
            text.push_str(&value);
            rest = &rest[close + 1..];
        }
        text.push_str(rest);
        self.vocab.encode_eos(&text)
    }

    /// Canonical serialization `N nodes ; degrees ... ; edges ( a , b ) ...`
    /// of the sample's structure, identical for every relabelling.
    pub fn render_graph_description(&self, sample: &SubgraphSample) -> Vec<u32> {
        let v = &self.vocab;
        let tok = |s: &str| v.id(s).expect("structural token");
        let n = sample.len();
        let order = canonical_order(n, &sample.adjacency);
        let edges = relabelled_edges(n, &sample.adjacency, &order);
        let mut degree = vec![0u64; n];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut out = v.number(n as u64);
        out.push(tok("nodes"));
        out.push(tok(";"));
        out.push(tok("degrees"));
        for d in degree {
            out.extend(v.number(d));
        }
        out.push(tok(";"));
        out.push(tok("edges"));
        if edges.is_empty() {
            out.push(tok("none"));
        }
        for (a, b) in edges {
            out.push(tok("("));
            out.extend(v.number(a as u64));
            out.push(tok(","));
            out.extend(v.number(b as u64));
            out.push(tok(")"));
        }
        out.push(v.eos());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphcore::{extract_khop, Center, Graph};

    fn text() -> TaskText {
        TaskText::default()
    }

    fn sample_of(n: usize, edges: &[(usize, usize)]) -> SubgraphSample {
        let g = Graph::from_edges(n, edges).unwrap();
        extract_khop(&g, Center::Whole, 0, n).unwrap()
    }

    fn words(t: &TaskText, ids: &[u32]) -> String {
        t.vocab.decode(ids).join(" ")
    }

    #[test]
    fn descriptions_are_fixed_per_family() {
        let t = text();
        let nc = t.render_desc(TaskFamily::NodeCls).unwrap();
        assert!(words(&t, &nc).contains("most likely category"));
        let gr = t.render_desc(TaskFamily::GraphReg).unwrap();
        assert!(words(&t, &gr).starts_with("predict the continuous numerical value"));
        assert_eq!(nc, t.render_desc(TaskFamily::NodeCls).unwrap());
        for f in TaskFamily::ALL {
            let d = t.render_desc(f).unwrap();
            assert_eq!(*d.last().unwrap(), t.vocab.eos());
            assert!(d.len() >= 16, "{f} desc has {} tokens", d.len());
        }
    }

    #[test]
    fn missing_family_is_an_error() {
        let mut set = TemplateSet::default();
        set.families.remove(&TaskFamily::Cycle);
        let t = TaskText::new(set);
        assert!(matches!(t.render_desc(TaskFamily::Cycle), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn detail_fill_and_missing_slot() {
        let t = text();
        let fields = DetailFields {
            first_text: Some("red node".into()),
            second_text: Some("blue node".into()),
            ..Default::default()
        };
        let ids = t.render_detail_fields(TaskFamily::LinkPred, &fields).unwrap();
        let w = words(&t, &ids);
        assert!(w.contains("red node") && w.contains("blue node") && w.contains("<yes> or <no>"), "{w}");
        let err = t.render_detail_fields(TaskFamily::NodeCls, &fields).unwrap_err();
        assert!(matches!(err, Error::MissingSlot { ref slot, .. } if slot == "center_text"));
    }

    #[test]
    fn node_cls_lists_all_candidates() {
        let t = text();
        let fields = DetailFields {
            center_text: Some("green node".into()),
            candidate_labels: Some(vec!["red".into(), "green".into(), "blue".into()]),
            ..Default::default()
        };
        let ids = t.render_detail_fields(TaskFamily::NodeCls, &fields).unwrap();
        for c in ["red", "green", "blue"] {
            assert!(ids.contains(&t.vocab.id(c).unwrap()));
        }
    }

    #[test]
    fn bad_templates_are_rejected() {
        let src = DEFAULT_TEMPLATES.replace("{center_text}", "{first_text}");
        assert!(TemplateSet::parse(&src).is_err());
        let src = DEFAULT_TEMPLATES.replace("{node_count}", "{mystery}");
        assert!(TemplateSet::parse(&src).is_err());
        let src = format!("{DEFAULT_TEMPLATES}\nextra = 1\n");
        assert!(TemplateSet::parse(&src).is_err());
    }

    #[test]
    fn template_toml_round_trip() {
        let set = TemplateSet::default();
        assert_eq!(TemplateSet::parse(&set.to_toml()).unwrap(), set);
    }

    #[test]
    fn triangle_description() {
        let t = text();
        let d = t.render_graph_description(&sample_of(3, &[(0, 1), (1, 2), (0, 2)]));
        assert_eq!(words(&t, &d), "3 nodes ; degrees 2 2 2 ; edges ( 0 , 1 ) ( 0 , 2 ) ( 1 , 2 ) <eos>");
    }

    #[test]
    fn single_node_description() {
        let t = text();
        let d = t.render_graph_description(&sample_of(1, &[]));
        assert_eq!(words(&t, &d), "1 nodes ; degrees 0 ; edges none <eos>");
    }

    #[test]
    fn path_orientation_does_not_matter() {
        let t = text();
        let a = t.render_graph_description(&sample_of(3, &[(0, 1), (1, 2)]));
        let b = t.render_graph_description(&sample_of(3, &[(2, 1), (1, 0)]));
        assert_eq!(a, b);
        assert_eq!(words(&t, &a), "3 nodes ; degrees 2 1 1 ; edges ( 0 , 1 ) ( 0 , 2 ) <eos>");
    }

    #[test]
    fn multi_digit_counts() {
        let t = text();
        let d = t.render_graph_description(&sample_of(12, &[]));
        assert!(words(&t, &d).starts_with("1 2 nodes"));
    }
}
