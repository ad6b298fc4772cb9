use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "pretrain_iterations = 400\nq_total = 120\nq_st2 = 20\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metalora"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Lab {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        Lab { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self) -> PathBuf {
        let base = self.path("base.ckpt");
        let out = run(&["pretrain", "--config", s(&self.config), "--seed", "7", "--out", s(&base)]);
        assert!(out.status.success());
        base
    }

    fn metatrain(&self, base: &Path, name: &str) -> PathBuf {
        let p = self.path(name);
        let out = run(&["metatrain", "--config", s(&self.config), "--seed", "7", "--checkpoint", s(base), "--out", s(&p)]);
        assert!(out.status.success());
        p
    }
}

#[test]
fn pipeline_is_reproducible_and_merge_verifies() {
    let lab = Lab::new();
    let base = lab.pretrain();
    let a = lab.metatrain(&base, "a.ckpt");
    let b = lab.metatrain(&base, "b.ckpt");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let trace = std::fs::read_to_string(lab.path("a.ckpt.trace.jsonl")).unwrap();
    let first: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "run");
    assert_eq!(first["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(first["config"]["q_total"], 120);
    assert_eq!(first["config"]["seed"], 7);

    let pers = lab.path("p.ckpt");
    let out = run(&[
        "personalize", "--config", s(&lab.config), "--seed", "7", "--checkpoint", s(&a), "--base", s(&base), "--out", s(&pers),
    ]);
    assert!(out.status.success());
    let merged = lab.path("m.ckpt");
    let out = run(&["merge", "--checkpoint", s(&pers), "--verify", "--base", s(&base), "--out", s(&merged)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("merge verify"));
}

#[test]
fn rank_mismatch_exits_2() {
    let lab = Lab::new();
    let base = lab.pretrain();
    let s1 = lab.metatrain(&base, "s1.ckpt");
    let narrow = lab.path("narrow.toml");
    std::fs::write(&narrow, format!("{SMALL}r1 = 8\n")).unwrap();
    let out = run(&[
        "personalize", "--config", s(&narrow), "--checkpoint", s(&s1), "--base", s(&base), "--out", s(&lab.path("p.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "rank");
}

#[test]
fn unknown_config_key_exits_2() {
    let lab = Lab::new();
    let bad = lab.path("bad.toml");
    std::fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let out = run(&["gen-data", "--config", s(&bad), "--out", s(&lab.path("d.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn truncated_checkpoint_exits_3_with_offset() {
    let lab = Lab::new();
    let base = lab.pretrain();
    let bytes = std::fs::read(&base).unwrap();
    let cut = lab.path("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&["metatrain", "--config", s(&lab.config), "--checkpoint", s(&cut), "--out", s(&lab.path("s.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "parse");
    assert!(rec["offset"].as_u64().unwrap() <= bytes.len() as u64 / 2);
}

#[test]
fn unreached_pretraining_target_exits_4() {
    let lab = Lab::new();
    let cfg = lab.path("hard.toml");
    std::fs::write(&cfg, "pretrain_iterations = 3\npretrain_target_ratio = 0.01\n").unwrap();
    let out = run(&["pretrain", "--config", s(&cfg), "--out", s(&lab.path("b.ckpt"))]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_record(&out)["error"], "numeric");
}

#[test]
fn augment_plan_lists_25_crops() {
    let lab = Lab::new();
    let plan = lab.path("plan.jsonl");
    let out = run(&["augment-plan", "--width", "4000", "--height", "3000", "--face", "1850,1300,300,400", "--out", s(&plan)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&plan).unwrap();
    assert_eq!(text.lines().count(), 25);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["aspect"], "16:9");

    let out = run(&["augment-plan", "--width", "100", "--height", "100", "--face", "90,0,20,50", "--out", s(&plan)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_scores_fixture_files() {
    let lab = Lab::new();
    let manifest = lab.path("manifest.json");
    std::fs::write(
        &manifest,
        r#"{"identities": [{"id": "a", "reference": "a/ref", "tests": ["a/ref", "a/t1", "a/t2"]}], "prompts": ["p"]}"#,
    )
    .unwrap();
    let emb = lab.path("emb.jsonl");
    std::fs::write(
        &emb,
        [
            r#"{"id": "a/ref", "vector": [1.0, 0.0]}"#,
            r#"{"id": "a/t1", "vector": [0.8, 0.6]}"#,
            r#"{"id": "a/t2", "vector": [0.6, 0.8]}"#,
            r#"{"id": "gen/a/p", "vector": [1.0, 0.0]}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let report = lab.path("report.json");
    let out = run(&["evaluate", "--manifest", s(&manifest), "--embeddings", s(&emb), "--out", s(&report)]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!((r["r_facesim"]["score"].as_f64().unwrap() - 70.0).abs() < 1e-9);
    assert_eq!(r["facesim"]["score"].as_f64().unwrap(), 100.0);
    assert_eq!(r["discrepancy_pct"].as_f64().unwrap(), -30.0);

    let missing = run(&["evaluate", "--manifest", s(&lab.path("nope.json")), "--embeddings", s(&emb)]);
    assert_eq!(missing.status.code(), Some(3));
}
