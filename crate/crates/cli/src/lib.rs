//! Batch commands behind the `graphtext` binary. Each command reads a TOML
//! run config, writes its artifacts plus a `manifest.json` into an output
//! directory, and is byte-for-byte reproducible for a fixed seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use graphtext_core::checkpoint::{Checkpoint, SECTION_DECODER};
use graphtext_core::dataset::{self, DatasetRecord, Split};
use graphtext_core::decoder::{pretrain_corpus, pretrain_decoder, Decoder, PretrainConfig};
use graphtext_core::evalharness::{zero_shot_eval, EvalDataset, EvalReport, MetricSpec};
use graphtext_core::graphcore::{gen_synthetic, GeneratorConfig, Graph};
use graphtext_core::instance::TaskInstance;
use graphtext_core::model::{Conditioning, Model, ModelConfig};
use graphtext_core::numerics::ParamStore;
use graphtext_core::seed::derive_seed;
use graphtext_core::tasktext::TaskText;
use graphtext_core::trainer::{curve_csv, train, Precision, TrainConfig, TrainReport, TrainState};
use graphtext_core::{Real, TaskFamily};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const DECODER_CKPT: &str = "decoder.gtck";
pub const ENCODER_CKPT: &str = "encoder.gtck";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
/// Shown in merged reports where a run lacks a metric.
pub const MISSING: &str = "-";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad config, flags or inputs; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<graphtext_core::Error> for CliError {
    fn from(e: graphtext_core::Error) -> Self {
        use graphtext_core::Error as E;
        match e {
            E::Config(_) | E::Generator(_) | E::UnknownFamily(_) | E::Parse { .. } | E::Checkpoint(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

/// Graph distribution without the instance count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDistribution {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub edge_prob: f64,
    pub homophily: f64,
    pub num_classes: usize,
}

impl GraphDistribution {
    pub fn generator(&self, num_instances: usize) -> GeneratorConfig {
        GeneratorConfig {
            min_nodes: self.min_nodes,
            max_nodes: self.max_nodes,
            edge_prob: self.edge_prob,
            homophily: self.homophily,
            num_classes: self.num_classes,
            num_instances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Families used for tuning; evaluated in-domain and cross-domain.
    pub train_families: Vec<TaskFamily>,
    /// Families never tuned on; evaluated cross-task.
    #[serde(default)]
    pub heldout_families: Vec<TaskFamily>,
    pub instances_per_family: usize,
    pub graphs: GraphDistribution,
    /// Shifted distribution for the cross-domain suite.
    pub xdomain: GraphDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// `train.seed` is always replaced by the top-level seed.
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = |m: String| Err(CliError::Validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return v(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.data.train_families.is_empty() {
            return v("data.train_families is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in self.data.train_families.iter().chain(&self.data.heldout_families) {
            if !seen.insert(*f) {
                return v(format!("family {f} listed twice"));
            }
        }
        if self.data.instances_per_family < 10 {
            return v("data.instances_per_family must be at least 10 so every split is nonempty".into());
        }
        for (name, d) in [("graphs", &self.data.graphs), ("xdomain", &self.data.xdomain)] {
            for &f in &seen {
                d.generator(1).validate(f).map_err(|e| CliError::Validation(format!("data.{name}: {e}")))?;
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(mix) = &self.train.mixture {
            if let Some(f) = mix.keys().find(|f| !self.data.train_families.contains(f)) {
                return v(format!("train.mixture names {f}, which is not a training family"));
            }
        }
        if self.pretrain.steps > 0 && !(self.pretrain.lr > 0.0) {
            return v("pretrain.lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pretrain.hinted_fraction) {
            return v("pretrain.hinted_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Copy with the seed override applied everywhere.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self
    }

    pub fn all_families(&self) -> Vec<TaskFamily> {
        self.data.train_families.iter().chain(&self.data.heldout_families).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    /// Output file name to sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err("reading", path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err("writing", path, e))
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out.display())))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Option<&Path>,
    seed: u64,
    inputs: BTreeMap<String, String>,
    files: &[String],
) -> CliResult<RunManifest> {
    let mut outputs = BTreeMap::new();
    for f in files {
        outputs.insert(f.clone(), sha256_file(&out.join(f))?);
    }
    let m = RunManifest {
        command: command.into(),
        config: config.map(|p| p.display().to_string()),
        seed,
        inputs,
        outputs,
    };
    let json = serde_json::to_vec_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join(MANIFEST), &json)?;
    Ok(m)
}

fn to_json<S: Serialize>(v: &S) -> CliResult<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Writes `<family>.{train,val,test,xdomain}.jsonl` for every configured
/// family. Train/val/test split 8:1:1; the shifted set matches the test size.
pub fn cmd_gen_data(cfg: &RunConfig, config_path: Option<&Path>, out: &Path) -> CliResult<RunManifest> {
    cfg.validate()?;
    prepare_out(out)?;
    let mut files = Vec::new();
    for family in cfg.all_families() {
        let n = cfg.data.instances_per_family;
        let classes = cfg.data.graphs.num_classes;
        let records: Vec<DatasetRecord> =
            gen_synthetic(family, &cfg.data.graphs.generator(n), derive_seed(cfg.seed, &format!("data/{family}")))?
                .iter()
                .map(|s| DatasetRecord::from_synthetic(family, classes, s))
                .collect();
        let (train, val, test) = dataset::split_811(&records);
        let shifted: Vec<DatasetRecord> = gen_synthetic(
            family,
            &cfg.data.xdomain.generator(test.len()),
            derive_seed(cfg.seed, &format!("data-xdomain/{family}")),
        )?
        .iter()
        .map(|s| DatasetRecord::from_synthetic(family, cfg.data.xdomain.num_classes, s))
        .collect();
        for (split, recs) in [(Split::Train, train), (Split::Val, val), (Split::Test, test), (Split::Xdomain, shifted)] {
            let name = dataset::file_name(family, split);
            dataset::write_jsonl(&out.join(&name), &recs)?;
            files.push(name);
        }
        log::info!("{family}: {n} instances written");
    }
    write_manifest(out, "gen-data", config_path, cfg.seed, BTreeMap::new(), &files)
}

fn read_split(data: &Path, family: TaskFamily, split: Split) -> CliResult<Vec<DatasetRecord>> {
    let path = data.join(dataset::file_name(family, split));
    if !path.is_file() {
        return Err(CliError::Validation(format!("missing dataset file {}", path.display())));
    }
    Ok(dataset::read_jsonl(&path)?)
}

fn check_data_dir(data: &Path) -> CliResult<()> {
    if !data.is_dir() {
        return Err(CliError::Validation(format!("data directory {} does not exist", data.display())));
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub corpus_sequences: usize,
    pub report: graphtext_core::decoder::PretrainReport,
}

fn pretrain_typed<T: Real>(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<PretrainSummary> {
    let mut graphs = Vec::new();
    for &f in &cfg.data.train_families {
        for r in read_split(data, f, Split::Train)? {
            graphs.push(Graph::try_from(r.graph)?);
        }
    }
    let text = TaskText::default();
    let corpus = pretrain_corpus(
        &text,
        &graphs,
        &cfg.all_families(),
        cfg.data.graphs.num_classes,
        cfg.model.sampling,
        &cfg.pretrain,
        cfg.seed,
    )?;
    let mut store = ParamStore::<T>::new();
    let decoder = Decoder::init(&mut store, cfg.model.decoder, text.vocab.len(), cfg.seed)?;
    let report = pretrain_decoder(&mut store, &decoder, &corpus, text.vocab.bos(), &cfg.pretrain, cfg.seed)?;
    log::info!(
        "decoder perplexity {:.2} -> {:.2} (vocabulary {})",
        report.initial_perplexity,
        report.heldout_perplexity,
        report.vocab_size
    );
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "decoder",
        "seed": cfg.seed,
        "decoder": cfg.model.decoder,
        "vocab_size": text.vocab.len(),
        "heldout_perplexity": report.heldout_perplexity,
    }));
    ck.add_params(SECTION_DECODER, &store, &decoder.params());
    ck.save(&out.join(DECODER_CKPT))?;
    Ok(PretrainSummary { corpus_sequences: corpus.len(), report })
}

/// Pretrains and freezes the decoder on answer strings and graph
/// descriptions drawn from the training graphs in `data`.
pub fn cmd_pretrain_decoder(cfg: &RunConfig, config_path: Option<&Path>, data: &Path, out: &Path) -> CliResult<RunManifest> {
    cfg.validate()?;
    check_data_dir(data)?;
    prepare_out(out)?;
    let summary = match cfg.train.precision {
        Precision::F64 => pretrain_typed::<f64>(cfg, data, out)?,
        Precision::F32 => pretrain_typed::<f32>(cfg, data, out)?,
    };
    write_file(&out.join("pretrain_report.json"), &to_json(&summary)?)?;
    let r = &summary.report;
    let log = format!(
        "initial_perplexity {}\nheldout_perplexity {}\nvocab_size {}\n",
        r.initial_perplexity, r.heldout_perplexity, r.vocab_size
    );
    write_file(&out.join("perplexity.log"), log.as_bytes())?;
    let inputs = [("data".to_string(), data.display().to_string())].into();
    let files = [DECODER_CKPT, "pretrain_report.json", "perplexity.log"].map(String::from);
    write_manifest(out, "pretrain-decoder", config_path, cfg.seed, inputs, &files)
}

fn load_instances(
    text: &TaskText,
    cfg: &RunConfig,
    data: &Path,
    family: TaskFamily,
    split: Split,
) -> CliResult<Vec<TaskInstance>> {
    Ok(dataset::to_instances(&read_split(data, family, split)?, text, cfg.model.sampling)?)
}

pub fn encoder_metadata(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({
        "kind": "encoder",
        "seed": cfg.seed,
        "model": cfg.model,
        "train": cfg.train,
    })
}

fn checkpoint_name(step: usize) -> String {
    format!("checkpoint-{step:06}.gtck")
}

fn train_typed<T: Real>(
    cfg: &RunConfig,
    data: &Path,
    decoder_ckpt: &Checkpoint,
    resume: Option<&Checkpoint>,
    out: &Path,
) -> CliResult<(TrainReport, Vec<String>)> {
    let mut model = Model::<T>::new(cfg.model, cfg.seed)?;
    model.load_decoder(decoder_ckpt)?;
    let mut datasets = BTreeMap::new();
    for &f in &cfg.data.train_families {
        datasets.insert(f, load_instances(&model.text, cfg, data, f, Split::Train)?);
    }
    let state = match resume {
        Some(ck) => {
            if ck.metadata.get("model") != Some(&serde_json::to_value(cfg.model).map_err(|e| CliError::Runtime(e.to_string()))?) {
                return Err(CliError::Validation("resume checkpoint was written with a different model config".into()));
            }
            model.load_encoder(ck)?;
            Some(TrainState::from_checkpoint(ck, &model)?)
        }
        None => None,
    };
    let mut written = Vec::new();
    let steps = cfg.train.steps;
    let report = train(&mut model, &datasets, &cfg.train, state, |m, s| {
        let mut ck = Checkpoint::new(encoder_metadata(cfg));
        m.add_to_checkpoint(&mut ck);
        s.add_to_checkpoint(&mut ck)?;
        let name = if s.step == steps { ENCODER_CKPT.to_string() } else { checkpoint_name(s.step) };
        ck.save(&out.join(&name))?;
        written.push(name);
        Ok(())
    })?;
    Ok((report, written))
}

/// Tunes the encoder's trainable subset against the frozen decoder. With
/// `resume`, continues from an intermediate checkpoint of the same run.
pub fn cmd_train(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    data: &Path,
    decoder: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> CliResult<RunManifest> {
    cfg.validate()?;
    check_data_dir(data)?;
    let dec = load_checkpoint(decoder)?;
    let res = resume.map(load_checkpoint).transpose()?;
    prepare_out(out)?;
    let (report, mut files) = match cfg.train.precision {
        Precision::F64 => train_typed::<f64>(cfg, data, &dec, res.as_ref(), out)?,
        Precision::F32 => train_typed::<f32>(cfg, data, &dec, res.as_ref(), out)?,
    };
    log::info!(
        "probe L_total {:.4} -> {:.4} ({:.1}% lower)",
        report.initial_probe_loss,
        report.final_smoothed_probe_loss,
        100.0 * report.probe_reduction
    );
    write_file(&out.join("train_report.json"), &to_json(&report)?)?;
    write_file(&out.join("loss.csv"), curve_csv(&report.curve).as_bytes())?;
    files.extend(["train_report.json".to_string(), "loss.csv".to_string()]);
    let mut inputs: BTreeMap<String, String> =
        [("data".to_string(), data.display().to_string()), ("decoder".to_string(), decoder.display().to_string())].into();
    if let Some(r) = resume {
        inputs.insert("resume".into(), r.display().to_string());
    }
    write_manifest(out, "train", config_path, cfg.seed, inputs, &files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Training families, unseen graphs from the training distribution.
    InDomain,
    /// Training families on the shifted graph distribution.
    CrossDomain,
    /// Families never trained on.
    CrossTask,
}

impl Suite {
    pub fn tag(self) -> &'static str {
        match self {
            Suite::InDomain => "in-domain",
            Suite::CrossDomain => "cross-domain",
            Suite::CrossTask => "cross-task",
        }
    }

    /// `(family, split)` pairs the suite evaluates.
    pub fn files(self, cfg: &RunConfig) -> Vec<(TaskFamily, Split)> {
        match self {
            Suite::InDomain => cfg.data.train_families.iter().map(|&f| (f, Split::Test)).collect(),
            Suite::CrossDomain => cfg.data.train_families.iter().map(|&f| (f, Split::Xdomain)).collect(),
            Suite::CrossTask => cfg.data.heldout_families.iter().map(|&f| (f, Split::Test)).collect(),
        }
    }
}

fn eval_typed<T: Real>(
    cfg: &RunConfig,
    enc: &Checkpoint,
    dec: &Checkpoint,
    data: &Path,
    suite: Suite,
) -> CliResult<EvalReport> {
    let meta_model = enc
        .metadata
        .get("model")
        .cloned()
        .ok_or_else(|| CliError::Validation("encoder checkpoint lacks a model config".into()))?;
    let model_cfg: ModelConfig = serde_json::from_value(meta_model).map_err(|e| CliError::Validation(e.to_string()))?;
    let seed = enc.metadata.get("seed").and_then(|s| s.as_u64()).unwrap_or(cfg.seed);
    let mut model = Model::<T>::new(model_cfg, seed)?;
    model.load_encoder(enc)?;
    model.load_decoder(dec)?;
    let files = suite.files(cfg);
    if files.is_empty() {
        return Err(CliError::Validation(format!("suite {} has no families in this config", suite.tag())));
    }
    let mut sets = Vec::new();
    for (family, split) in files {
        let instances = load_instances(&model.text, cfg, data, family, split)?;
        let train_mean = if family.is_regression() {
            let t = read_split(data, family, Split::Train)?;
            Some(t.iter().map(|r| r.label.as_f64()).sum::<f64>() / t.len().max(1) as f64)
        } else {
            None
        };
        sets.push(EvalDataset { name: format!("{}.{}", family.tag(), split.tag()), family, instances, train_mean });
    }
    let echo = serde_json::json!({ "suite": suite.tag(), "model": model_cfg, "data": cfg.data });
    Ok(zero_shot_eval(
        &model,
        &sets,
        &MetricSpec::default(),
        &[Conditioning::Full, Conditioning::ZeroPrefix, Conditioning::GenericDesc],
        suite.tag(),
        seed,
        echo,
    )?)
}

/// Zero-shot evaluation of a tuned encoder on one suite, with the two
/// ablations alongside the full model.
pub fn cmd_eval(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    encoder: &Path,
    decoder: &Path,
    data: &Path,
    suite: Suite,
    out: &Path,
) -> CliResult<(RunManifest, EvalReport)> {
    cfg.validate()?;
    check_data_dir(data)?;
    let enc = load_checkpoint(encoder)?;
    let dec = load_checkpoint(decoder)?;
    prepare_out(out)?;
    let report = match cfg.train.precision {
        Precision::F64 => eval_typed::<f64>(cfg, &enc, &dec, data, suite)?,
        Precision::F32 => eval_typed::<f32>(cfg, &enc, &dec, data, suite)?,
    };
    for r in &report.results {
        if !(r.value.is_finite() && r.baseline.is_finite()) {
            return Err(CliError::Runtime(format!("{}: metric is not finite", r.dataset)));
        }
    }
    write_file(&out.join(EVAL_JSON), &to_json(&report)?)?;
    write_file(&out.join(EVAL_CSV), report.to_csv().as_bytes())?;
    let inputs = [
        ("data".to_string(), data.display().to_string()),
        ("decoder".to_string(), decoder.display().to_string()),
        ("encoder".to_string(), encoder.display().to_string()),
        ("suite".to_string(), suite.tag().to_string()),
    ]
    .into();
    let m = write_manifest(out, "eval", config_path, report.seed, inputs, &[EVAL_JSON.into(), EVAL_CSV.into()])?;
    Ok((m, report))
}

/// Merged comparison: one row per `(dataset, conditioning, metric)`, one
/// column per evaluation directory. Missing values show [`MISSING`].
#[derive(Debug, Clone, PartialEq)]
pub struct MergedReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl MergedReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("row,{}\n", self.columns.join(","));
        for (key, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.map_or(MISSING.to_string(), |x| x.to_string())).collect();
            out.push_str(&format!("{key},{}\n", cells.join(",")));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let key_w = self.rows.iter().map(|r| r.0.len()).chain([3]).max().unwrap_or(3);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(8)).collect();
        let mut out = format!("{:key_w$}", "row");
        for (c, w) in self.columns.iter().zip(&col_w) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for (key, vals) in &self.rows {
            out.push_str(&format!("{key:key_w$}"));
            for (v, w) in vals.iter().zip(&col_w) {
                let cell = v.map_or(MISSING.to_string(), |x| format!("{x:.4}"));
                out.push_str(&format!("  {cell:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}

fn report_rows(r: &EvalReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for line in r.to_csv().lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if let [d, c, m, v] = parts[..] {
            if let Ok(x) = v.parse() {
                out.insert(format!("{d}/{c}/{m}"), x);
            }
        }
    }
    out
}

pub fn merge_reports(named: &[(String, EvalReport)]) -> MergedReport {
    let tables: Vec<BTreeMap<String, f64>> = named.iter().map(|(_, r)| report_rows(r)).collect();
    let keys: std::collections::BTreeSet<&String> = tables.iter().flat_map(|t| t.keys()).collect();
    MergedReport {
        columns: named.iter().map(|(n, _)| n.clone()).collect(),
        rows: keys.into_iter().map(|k| (k.clone(), tables.iter().map(|t| t.get(k).copied()).collect())).collect(),
    }
}

/// Merges `eval_report.json` from each directory into `report.csv` and
/// `report.txt` under `out`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> CliResult<MergedReport> {
    if dirs.is_empty() {
        return Err(CliError::Validation("report needs at least one evaluation directory".into()));
    }
    let mut named = Vec::new();
    for d in dirs {
        let p = d.join(EVAL_JSON);
        let bytes = fs::read(&p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        let r: EvalReport = serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
        named.push((name, r));
    }
    let merged = merge_reports(&named);
    prepare_out(out)?;
    write_file(&out.join("report.csv"), merged.to_csv().as_bytes())?;
    write_file(&out.join("report.txt"), merged.to_text().as_bytes())?;
    let inputs = dirs.iter().enumerate().map(|(i, d)| (format!("eval{i}"), d.display().to_string())).collect();
    write_manifest(out, "report", None, 0, inputs, &["report.csv".into(), "report.txt".into()])?;
    Ok(merged)
}
