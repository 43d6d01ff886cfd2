use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use graphtext_cli::{
    cmd_eval, cmd_gen_data, cmd_pretrain_decoder, cmd_report, cmd_train, CliError, RunConfig, Suite, DECODER_CKPT,
    ENCODER_CKPT, EVAL_JSON, MANIFEST, MISSING,
};
use graphtext_core::checkpoint::{Checkpoint, SECTION_DECODER};
use graphtext_core::evalharness::EvalReport;

const TINY: &str = r#"
schema_version = 1
seed = 5

[data]
train_families = ["CONN", "CN"]
heldout_families = ["SPD"]
instances_per_family = 40

[data.graphs]
min_nodes = 4
max_nodes = 6
edge_prob = 0.4
homophily = 0.5
num_classes = 3

[data.xdomain]
min_nodes = 6
max_nodes = 8
edge_prob = 0.3
homophily = 0.5
num_classes = 3

[model.encoder]
d_h = 16
d_k = 16
heads = 2
layers = 1
m = 4
rank = 2
alpha = 4.0

[model.decoder]
d_model = 16
heads = 2
layers = 1

[model.sampling]
hop_radius = 1
max_nodes = 6

[pretrain]
steps = 15
batch_size = 4
lr = 3e-3
descriptions = 60
instructions = 60

[train]
steps = 6
batch_size = 1
accum_every = 2
lr_adapters_and_mlp = 2e-3
lr_position_table = 2e-2
precision = "f64"
checkpoint_every = 3
probe_size = 3
probe_every = 2
"#;

fn tiny() -> RunConfig {
    RunConfig::parse(TINY).unwrap().with_seed(None)
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

/// Data, decoder and a trained encoder under one temp dir.
struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    cfg: RunConfig,
}

impl Pipeline {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let cfg = tiny();
        cmd_gen_data(&cfg, None, &root.join("data")).unwrap();
        cmd_pretrain_decoder(&cfg, None, &root.join("data"), &root.join("dec")).unwrap();
        cmd_train(&cfg, None, &root.join("data"), &root.join("dec").join(DECODER_CKPT), None, &root.join("tr")).unwrap();
        Self { _tmp: tmp, root, cfg }
    }

    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn decoder(&self) -> PathBuf {
        self.root.join("dec").join(DECODER_CKPT)
    }

    fn encoder(&self) -> PathBuf {
        self.root.join("tr").join(ENCODER_CKPT)
    }

    fn eval(&self, suite: Suite, out: &str) -> EvalReport {
        cmd_eval(&self.cfg, None, &self.encoder(), &self.decoder(), &self.data(), suite, &self.root.join(out)).unwrap().1
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_gen_data(&cfg, None, &tmp.path().join("a")).unwrap();
    cmd_gen_data(&cfg, None, &tmp.path().join("b")).unwrap();
    let a = read_dir_sorted(&tmp.path().join("a"));
    assert_eq!(a, read_dir_sorted(&tmp.path().join("b")));
    // 3 families x 4 splits + manifest
    assert_eq!(a.len(), 13);
}

#[test]
fn gen_data_splits_eight_one_one() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TINY.replace(r#"train_families = ["CONN", "CN"]"#, r#"train_families = ["link-pred"]"#)
        .replace(r#"heldout_families = ["SPD"]"#, "heldout_families = []")
        .replace("instances_per_family = 40", "instances_per_family = 1000");
    let cfg = RunConfig::parse(&text).unwrap();
    cmd_gen_data(&cfg, None, tmp.path()).unwrap();
    let n = |s: &str| line_count(&tmp.path().join(format!("link-pred.{s}.jsonl")));
    assert_eq!((n("train"), n("val"), n("test"), n("xdomain")), (800, 100, 100, 100));
}

#[test]
fn config_schema_errors() {
    let empty = TINY.replace(r#"train_families = ["CONN", "CN"]"#, "train_families = []");
    assert!(matches!(RunConfig::parse(&empty), Err(CliError::Validation(_))));
    let unknown = TINY.replace("seed = 5", "seed = 5\nsed = 6");
    assert!(matches!(RunConfig::parse(&unknown), Err(CliError::Validation(_))));
    let version = TINY.replace("schema_version = 1", "schema_version = 2");
    assert!(matches!(RunConfig::parse(&version), Err(CliError::Validation(_))));
    let dup = TINY.replace(r#"heldout_families = ["SPD"]"#, r#"heldout_families = ["CN"]"#);
    assert!(matches!(RunConfig::parse(&dup), Err(CliError::Validation(_))));
}

#[test]
fn seed_override_reaches_trainer() {
    let cfg = tiny().with_seed(Some(99));
    assert_eq!((cfg.seed, cfg.train.seed), (99, 99));
}

#[test]
fn pretrain_requires_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let r = cmd_pretrain_decoder(&tiny(), None, &tmp.path().join("nope"), &tmp.path().join("dec"));
    assert!(matches!(r, Err(CliError::Validation(_))));
}

#[test]
fn pretrain_logs_perplexity_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_gen_data(&cfg, None, &tmp.path().join("data")).unwrap();
    let out = tmp.path().join("dec");
    let m = cmd_pretrain_decoder(&cfg, None, &tmp.path().join("data"), &out).unwrap();
    assert!(m.outputs.contains_key(DECODER_CKPT));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("pretrain_report.json")).unwrap()).unwrap();
    let ppl = summary["report"]["heldout_perplexity"].as_f64().unwrap();
    let vocab = summary["report"]["vocab_size"].as_f64().unwrap();
    assert!(ppl < vocab, "perplexity {ppl} vs vocabulary {vocab}");
    assert!(fs::read_to_string(out.join("perplexity.log")).unwrap().contains("heldout"));
    let ck = Checkpoint::load(&out.join(DECODER_CKPT)).unwrap();
    let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(ck, again);
    assert!(!ck.entries(SECTION_DECODER).is_empty());
}

#[test]
fn train_outputs_and_zero_steps() {
    let p = Pipeline::new();
    let tr = p.root.join("tr");
    // header + one row per step
    assert_eq!(line_count(&tr.join("loss.csv")), 1 + p.cfg.train.steps);
    assert!(tr.join("checkpoint-000003.gtck").is_file());
    assert!(tr.join(MANIFEST).is_file());

    let mut zero = p.cfg.clone();
    zero.train.steps = 0;
    let out = p.root.join("tr0");
    cmd_train(&zero, None, &p.data(), &p.decoder(), None, &out).unwrap();
    assert!(out.join(ENCODER_CKPT).is_file());
    assert_eq!(line_count(&out.join("loss.csv")), 1);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let p = Pipeline::new();
    let out = p.root.join("resumed");
    let mid = p.root.join("tr").join("checkpoint-000003.gtck");
    cmd_train(&p.cfg, None, &p.data(), &p.decoder(), Some(&mid), &out).unwrap();
    for f in [ENCODER_CKPT, "loss.csv", "train_report.json"] {
        assert_eq!(fs::read(p.root.join("tr").join(f)).unwrap(), fs::read(out.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_suites_route_and_repeat() {
    let p = Pipeline::new();
    let names = |r: &EvalReport| {
        let v: std::collections::BTreeSet<String> = r.results.iter().map(|x| x.dataset.clone()).collect();
        v.into_iter().collect::<Vec<_>>()
    };
    let a = p.eval(Suite::InDomain, "ev-a");
    assert_eq!(names(&a), ["CN.test", "CONN.test"]);
    assert_eq!(names(&p.eval(Suite::CrossDomain, "ev-x")), ["CN.xdomain", "CONN.xdomain"]);
    assert_eq!(names(&p.eval(Suite::CrossTask, "ev-t")), ["SPD.test"]);

    let json = fs::read(p.root.join("ev-a").join(EVAL_JSON)).unwrap();
    let parsed: EvalReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(parsed, a);
    p.eval(Suite::InDomain, "ev-b");
    assert_eq!(read_dir_sorted(&p.root.join("ev-a")), read_dir_sorted(&p.root.join("ev-b")));
}

#[test]
fn eval_does_not_touch_inputs() {
    let p = Pipeline::new();
    let before = (fs::read(p.encoder()).unwrap(), fs::read(p.decoder()).unwrap(), read_dir_sorted(&p.data()));
    p.eval(Suite::InDomain, "ev");
    let after = (fs::read(p.encoder()).unwrap(), fs::read(p.decoder()).unwrap(), read_dir_sorted(&p.data()));
    assert!(before == after);
}

#[test]
fn report_merges_columns() {
    let p = Pipeline::new();
    p.eval(Suite::InDomain, "ev-in");
    p.eval(Suite::CrossTask, "ev-ct");

    let one = cmd_report(&[p.root.join("ev-in")], &p.root.join("rep1")).unwrap();
    let report: EvalReport = serde_json::from_slice(&fs::read(p.root.join("ev-in").join(EVAL_JSON)).unwrap()).unwrap();
    assert_eq!(one.columns, ["ev-in"]);
    assert_eq!(one.rows.len(), report.to_csv().lines().count() - 1);
    for line in report.to_csv().lines().skip(1) {
        let parts: Vec<&str> = line.rsplitn(2, ',').collect();
        let key = parts[1].replace(',', "/");
        let row = one.rows.iter().find(|r| r.0 == key).unwrap();
        assert_eq!(row.1, vec![Some(parts[0].parse::<f64>().unwrap())]);
    }

    let two = cmd_report(&[p.root.join("ev-in"), p.root.join("ev-ct")], &p.root.join("rep2")).unwrap();
    assert_eq!(two.columns, ["ev-in", "ev-ct"]);
    assert!(two.rows.iter().all(|r| r.1.len() == 2));
    // suites share no datasets, so every row is missing in one column
    assert!(two.rows.iter().all(|r| r.1.iter().filter(|v| v.is_none()).count() == 1));
    let csv = fs::read_to_string(p.root.join("rep2").join("report.csv")).unwrap();
    let spd = csv.lines().find(|l| l.starts_with("SPD.test/")).unwrap();
    assert!(spd.split(',').nth(1) == Some(MISSING), "{spd}");
    assert!(!spd.split(',').nth(1).unwrap().starts_with('0'));
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_graphtext");
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), TINY);

    let ok = Command::new(bin).args(["gen-data", "--config"]).arg(&good).arg("--out").arg(tmp.path().join("d")).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));

    let bad_dir = tempfile::tempdir().unwrap();
    let bad = write_config(bad_dir.path(), &TINY.replace("seed = 5", "seed = 5\nlearning_rate = 1"));
    let r = Command::new(bin).args(["gen-data", "--config"]).arg(&bad).arg("--out").arg(tmp.path().join("e")).output().unwrap();
    assert_eq!(r.status.code(), Some(1));

    let r = Command::new(bin).arg("no-such-command").output().unwrap();
    assert_eq!(r.status.code(), Some(1));

    // a directory squatting on an output file name makes the write fail at run time
    let out = tmp.path().join("f");
    fs::create_dir_all(out.join("CONN.train.jsonl")).unwrap();
    let r = Command::new(bin).args(["gen-data", "--config"]).arg(&good).arg("--out").arg(&out).output().unwrap();
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}
