//! Answer parsing, metrics and the zero-shot evaluation protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{generate, score_binary};
use crate::family::AnswerKind;
use crate::graphcore::{Label, CLASS_NAMES};
use crate::instance::TaskInstance;
use crate::model::{Conditioning, Model};
use crate::tasktext::Vocab;
use crate::{Error, Real, Result, TaskFamily};

/// Longest answer generated for label and numeric families.
pub const MAX_LABEL_TOKENS: usize = 2;
pub const MAX_NUMBER_TOKENS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parsed {
    Binary(bool),
    Class(usize),
    Number(f64),
    Illegal,
}

impl Parsed {
    pub fn is_legal(self) -> bool {
        self != Parsed::Illegal
    }
}

/// Classification answers must start with a candidate label; numeric answers
/// are the leading run of digit, sign and point tokens read as a decimal.
pub fn parse_answer(tokens: &[u32], family: TaskFamily, vocab: &Vocab, num_classes: usize) -> Parsed {
    let Some(&first) = tokens.first() else {
        return Parsed::Illegal;
    };
    match family.answer_kind() {
        AnswerKind::Binary if first == vocab.yes() => Parsed::Binary(true),
        AnswerKind::Binary if first == vocab.no() => Parsed::Binary(false),
        AnswerKind::Binary => Parsed::Illegal,
        AnswerKind::Class => {
            let tok = vocab.token(first).unwrap_or_default();
            CLASS_NAMES[..num_classes.min(CLASS_NAMES.len())]
                .iter()
                .position(|&c| c == tok)
                .map_or(Parsed::Illegal, Parsed::Class)
        }
        AnswerKind::Number => {
            let run: String = tokens
                .iter()
                .map_while(|&t| vocab.token(t).filter(|s| matches!(*s, "." | "-") || s.chars().all(|c| c.is_ascii_digit())))
                .collect();
            match run.parse::<f64>() {
                Ok(v) if !run.is_empty() && v.is_finite() => Parsed::Number(v),
                _ => Parsed::Illegal,
            }
        }
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares its mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mean_rank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid("MAE needs equal, nonempty inputs".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn normalized_mae(mae: f64, mae_min: f64, mae_max: f64) -> Result<f64> {
    if !(mae_max > mae_min) {
        return Err(Error::Invalid(format!("degenerate MAE range [{mae_min}, {mae_max}]")));
    }
    if !(mae_min..=mae_max).contains(&mae) {
        return Err(Error::Invalid(format!("MAE {mae} outside [{mae_min}, {mae_max}]")));
    }
    Ok(1.0 - (mae - mae_min) / (mae_max - mae_min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub generated: Vec<u32>,
    pub generated_text: String,
    pub parsed: Parsed,
    pub legal: bool,
    pub target: f64,
    /// `P(yes)` for binary families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn legality_rate(records: &[InstanceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("no records".into()));
    }
    Ok(records.iter().filter(|r| r.parsed.is_legal()).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auc,
    Mae,
}

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
            Metric::Mae => "mae",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Mae
    }
}

/// Primary metric per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub primary: BTreeMap<TaskFamily, Metric>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        use TaskFamily::*;
        Self {
            primary: [
                (NodeCls, Metric::Accuracy),
                (Conn, Metric::Accuracy),
                (LinkPred, Metric::Auc),
                (GraphCls, Metric::Auc),
                (Spd, Metric::Mae),
                (Cn, Metric::Mae),
                (Cycle, Metric::Mae),
                (GraphReg, Metric::Mae),
            ]
            .into(),
        }
    }
}

impl MetricSpec {
    pub fn metric(&self, family: TaskFamily) -> Result<Metric> {
        self.primary.get(&family).copied().ok_or_else(|| Error::Invalid(format!("no metric for {family}")))
    }
}

/// A held-out dataset. `train_mean` is the training-set mean target, used to
/// impute illegal numeric answers and as the regression baseline.
#[derive(Debug, Clone)]
pub struct EvalDataset {
    pub name: String,
    pub family: TaskFamily,
    pub instances: Vec<TaskInstance>,
    pub train_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub family: TaskFamily,
    pub conditioning: Conditioning,
    pub metric: Metric,
    pub value: f64,
    /// Majority-class accuracy, 0.5 AUC, or MAE of the training mean.
    pub baseline: f64,
    pub legality_rate: f64,
    pub count: usize,
    /// Secondary metrics (e.g. AUC next to accuracy for binary families).
    pub extra: BTreeMap<String, f64>,
}

impl DatasetResult {
    /// Improvement over the baseline: metric minus baseline for accuracy and
    /// AUC, relative MAE reduction for regression.
    pub fn margin(&self) -> f64 {
        match self.metric {
            Metric::Mae if self.baseline > 0.0 => (self.baseline - self.value) / self.baseline,
            Metric::Mae => -self.value,
            _ => self.value - self.baseline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub results: Vec<DatasetResult>,
    /// Per-instance records keyed by `dataset/conditioning`.
    pub records: BTreeMap<String, Vec<InstanceRecord>>,
}

impl EvalReport {
    /// Mean margin over every dataset evaluated under `cond`.
    pub fn aggregate(&self, cond: Conditioning) -> Option<f64> {
        let m: Vec<f64> = self.results.iter().filter(|r| r.conditioning == cond).map(DatasetResult::margin).collect();
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }

    pub fn result(&self, dataset: &str, cond: Conditioning) -> Option<&DatasetResult> {
        self.results.iter().find(|r| r.dataset == dataset && r.conditioning == cond)
    }

    /// Flat `dataset,conditioning,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,conditioning,metric,value\n");
        for r in &self.results {
            let cond = serde_json::to_value(r.conditioning).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let mut row = |metric: &str, v: f64| out.push_str(&format!("{},{cond},{metric},{v}\n", r.dataset));
            row(r.metric.tag(), r.value);
            row("baseline", r.baseline);
            row("legality_rate", r.legality_rate);
            for (k, v) in &r.extra {
                row(k, *v);
            }
        }
        out
    }
}

fn majority_fraction(targets: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for t in targets {
        *counts.entry(t.to_bits()).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / targets.len().max(1) as f64
}

fn evaluate_dataset<T: Real>(
    model: &Model<T>,
    ds: &EvalDataset,
    metric: Metric,
    cond: Conditioning,
) -> Result<(DatasetResult, Vec<InstanceRecord>)> {
    if ds.instances.is_empty() {
        return Err(Error::Invalid(format!("held-out set {} is empty", ds.name)));
    }
    let vocab = &model.text.vocab;
    let kind = ds.family.answer_kind();
    let max_len = if kind == AnswerKind::Number { MAX_NUMBER_TOKENS } else { MAX_LABEL_TOKENS };
    let mut records = Vec::with_capacity(ds.instances.len());
    for (index, inst) in ds.instances.iter().enumerate() {
        if inst.family != ds.family {
            return Err(Error::Invalid(format!("{} holds a {} instance", ds.name, inst.family)));
        }
        let h = model.h_a(inst, cond)?;
        let generated = generate(&model.store, &model.decoder, model.specials, &h, &inst.detail_tokens, max_len)?;
        let parsed = parse_answer(&generated, ds.family, vocab, inst.num_classes);
        let score = match kind {
            AnswerKind::Binary => Some(score_binary(&model.store, &model.decoder, model.specials, &h, &inst.detail_tokens)?),
            _ => None,
        };
        records.push(InstanceRecord {
            index,
            generated_text: vocab.decode(&generated).join(" "),
            generated,
            parsed,
            legal: parsed.is_legal(),
            target: inst.label.as_f64(),
            score,
        });
    }
    let targets: Vec<f64> = records.iter().map(|r| r.target).collect();
    let correct = |r: &InstanceRecord| match (r.parsed, ds.instances[r.index].label) {
        (Parsed::Binary(a), Label::Binary(b)) => a == b,
        (Parsed::Class(a), Label::Class(b)) => a == b,
        _ => false,
    };
    let accuracy = records.iter().filter(|r| correct(r)).count() as f64 / records.len() as f64;
    let mut extra = BTreeMap::new();
    let binary_auc = if kind == AnswerKind::Binary {
        let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
        // illegal answers take the worst possible rank for their label
        let scores: Vec<f64> = records
            .iter()
            .zip(&labels)
            .map(|(r, &l)| match (r.legal, l) {
                (true, _) => r.score.unwrap_or(0.5),
                (false, true) => f64::NEG_INFINITY,
                (false, false) => f64::INFINITY,
            })
            .collect();
        auc(&scores, &labels).ok()
    } else {
        None
    };
    let (value, baseline) = match metric {
        Metric::Accuracy => {
            if let Some(a) = binary_auc {
                extra.insert("auc".into(), a);
            }
            (accuracy, majority_fraction(&targets))
        }
        Metric::Auc => {
            extra.insert("accuracy".into(), accuracy);
            let a = binary_auc.ok_or_else(|| Error::Invalid(format!("{}: AUC needs both classes", ds.name)))?;
            (a, 0.5)
        }
        Metric::Mae => {
            let mean = ds
                .train_mean
                .ok_or_else(|| Error::Invalid(format!("{}: regression needs a training mean", ds.name)))?;
            let pred: Vec<f64> = records
                .iter()
                .map(|r| match r.parsed {
                    Parsed::Number(v) => v,
                    _ => mean,
                })
                .collect();
            (mae(&pred, &targets)?, mae(&vec![mean; targets.len()], &targets)?)
        }
    };
    let result = DatasetResult {
        dataset: ds.name.clone(),
        family: ds.family,
        conditioning: cond,
        metric,
        value,
        baseline,
        legality_rate: legality_rate(&records)?,
        count: records.len(),
        extra,
    };
    Ok((result, records))
}

/// Evaluates every held-out dataset under each conditioning, without
/// touching parameters.
pub fn zero_shot_eval<T: Real>(
    model: &Model<T>,
    datasets: &[EvalDataset],
    spec: &MetricSpec,
    conditionings: &[Conditioning],
    suite: &str,
    seed: u64,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(Error::Invalid("no held-out datasets".into()));
    }
    let mut results = Vec::new();
    let mut records = BTreeMap::new();
    for &cond in conditionings {
        for ds in datasets {
            let (r, recs) = evaluate_dataset(model, ds, spec.metric(ds.family)?, cond)?;
            log::info!("{} [{:?}]: {} = {:.4} (baseline {:.4})", ds.name, cond, r.metric.tag(), r.value, r.baseline);
            let key = format!("{}/{}", ds.name, serde_json::to_value(cond)?.as_str().unwrap_or_default());
            records.insert(key, recs);
            results.push(r);
        }
    }
    Ok(EvalReport { suite: suite.to_string(), seed, config, results, records })
}
