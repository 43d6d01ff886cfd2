use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Task families: the four general graph-learning families plus the four
/// graph-understanding probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskFamily {
    #[serde(rename = "node-cls")]
    NodeCls,
    #[serde(rename = "link-pred")]
    LinkPred,
    #[serde(rename = "graph-cls")]
    GraphCls,
    #[serde(rename = "graph-reg")]
    GraphReg,
    #[serde(rename = "CONN")]
    Conn,
    #[serde(rename = "SPD")]
    Spd,
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "CYCLE")]
    Cycle,
}

/// What kind of query center a family needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterKind {
    Node,
    Pair,
    Whole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerKind {
    Binary,
    Class,
    Number,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 8] = [
        TaskFamily::NodeCls,
        TaskFamily::LinkPred,
        TaskFamily::GraphCls,
        TaskFamily::GraphReg,
        TaskFamily::Conn,
        TaskFamily::Spd,
        TaskFamily::Cn,
        TaskFamily::Cycle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TaskFamily::NodeCls => "node-cls",
            TaskFamily::LinkPred => "link-pred",
            TaskFamily::GraphCls => "graph-cls",
            TaskFamily::GraphReg => "graph-reg",
            TaskFamily::Conn => "CONN",
            TaskFamily::Spd => "SPD",
            TaskFamily::Cn => "CN",
            TaskFamily::Cycle => "CYCLE",
        }
    }

    pub fn center_kind(self) -> CenterKind {
        match self {
            TaskFamily::NodeCls => CenterKind::Node,
            TaskFamily::LinkPred | TaskFamily::Conn | TaskFamily::Spd | TaskFamily::Cn => {
                CenterKind::Pair
            }
            TaskFamily::GraphCls | TaskFamily::GraphReg | TaskFamily::Cycle => CenterKind::Whole,
        }
    }

    pub fn answer_kind(self) -> AnswerKind {
        match self {
            TaskFamily::NodeCls => AnswerKind::Class,
            TaskFamily::LinkPred | TaskFamily::GraphCls | TaskFamily::Conn => AnswerKind::Binary,
            TaskFamily::GraphReg | TaskFamily::Spd | TaskFamily::Cn | TaskFamily::Cycle => {
                AnswerKind::Number
            }
        }
    }

    pub fn is_regression(self) -> bool {
        self.answer_kind() == AnswerKind::Number
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskFamily::ALL
            .iter()
            .copied()
            .find(|f| f.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}
