//! JSON-lines dataset records and the 8:1:1 split.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graphcore::{Center, Graph, GraphPayload, Label, SyntheticInstance};
use crate::instance::{SamplingConfig, TaskInstance};
use crate::tasktext::TaskText;
use crate::{Error, Result, TaskFamily};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub family: TaskFamily,
    pub num_classes: usize,
    pub center: Center,
    pub label: Label,
    pub graph: GraphPayload,
}

impl DatasetRecord {
    pub fn from_synthetic(family: TaskFamily, num_classes: usize, s: &SyntheticInstance) -> Self {
        Self { family, num_classes, center: s.center, label: s.label, graph: GraphPayload::from(&s.graph) }
    }

    pub fn to_instance(&self, text: &TaskText, sampling: SamplingConfig) -> Result<TaskInstance> {
        let g = Graph::try_from(self.graph.clone())?;
        TaskInstance::new(text, self.family, &g, self.center, self.label, sampling, self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Shifted-distribution held-out set.
    Xdomain,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Xdomain => "xdomain",
        }
    }
}

pub fn file_name(family: TaskFamily, split: Split) -> String {
    format!("{}.{}.jsonl", family.tag(), split.tag())
}

/// Sizes of an 8:1:1 train/val/test split; the remainder goes to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// Splits in order: the first 80% train, then val, then test.
pub fn split_811<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (tr, va, _) = split_sizes(items.len());
    (items[..tr].to_vec(), items[tr..tr + va].to_vec(), items[tr + va..].to_vec())
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

pub fn to_instances(records: &[DatasetRecord], text: &TaskText, sampling: SamplingConfig) -> Result<Vec<TaskInstance>> {
    records.iter().map(|r| r.to_instance(text, sampling)).collect()
}
