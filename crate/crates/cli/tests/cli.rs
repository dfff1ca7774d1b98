use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use goracle::{init_model, load_checkpoint, CorpusManifest};

fn goracle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goracle")).args(args).env_remove("GORACLE_SEED").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a synthetic corpus and returns its manifest path.
fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", s(dir), "--events-min", "2", "--events-max", "4"];
    args.extend_from_slice(extra);
    let out = goracle(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("corpus.manifest.jsonl")
}

fn trace_files(dir: &Path) -> Vec<PathBuf> {
    let manifest = CorpusManifest::read(&dir.join("corpus.manifest.jsonl")).unwrap();
    manifest.entries.iter().map(|e| manifest.resolve(e)).collect()
}

const TINY: &[&str] = &["--seq-len", "64", "--embed-dim", "16", "--layers", "1", "--heads", "2"];

#[test]
fn parse_valid_binary_emits_json() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--per-project", "2"]);
    let file = &trace_files(tmp.path())[0];
    let out = goracle(&["parse", s(file)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["Events"].as_array().is_some_and(|e| !e.is_empty()));
}

#[test]
fn bad_magic_names_its_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.gotrace");
    fs::write(&file, b"gotrXce\x01").unwrap();
    let out = goracle(&["parse", s(&file)]);
    assert_eq!(code(&out), 1);
    let msg = stderr(&out);
    let offset: usize = msg.split("offset ").nth(1).and_then(|r| r.split(|c: char| !c.is_ascii_digit()).next()).and_then(|d| d.parse().ok()).expect(&msg);
    assert!(offset <= 6, "{msg}");
}

#[test]
fn parse_convert_parse_equals_direct_parse() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--per-project", "3"]);
    for file in trace_files(tmp.path()) {
        let direct = goracle(&["parse", s(&file)]);
        assert_eq!(code(&direct), 0);
        let json = tmp.path().join("x.json");
        let bin = tmp.path().join("x.gotrace");
        assert_eq!(code(&goracle(&["convert", s(&file), "--to", "json", "-o", s(&json)])), 0);
        assert_eq!(code(&goracle(&["convert", s(&json), "--to", "binary", "-o", s(&bin)])), 0);
        assert_eq!(goracle(&["parse", s(&json)]).stdout, direct.stdout);
        assert_eq!(goracle(&["parse", s(&bin)]).stdout, direct.stdout);
        assert_eq!(fs::read(&bin).unwrap(), fs::read(&file).unwrap());
    }
}

#[test]
fn invalid_trace_exits_with_violation_listing() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("dangling.json");
    let ev = |ts: u64, stk: u64| {
        format!(r#"{{"Off":0,"Type":26,"Ts":{ts},"P":0,"G":1,"StkID":{stk},"Stk":[],"Args":[0,0,0],"SArgs":[]}}"#)
    };
    fs::write(&file, format!(r#"{{"Events":[{},{}],"Stacks":{{}}}}"#, ev(3, 0), ev(9, 7))).unwrap();
    let out = goracle(&["parse", s(&file)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("event 1: dangling stack id"), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&goracle(&["parse", "--no-such-flag", "x"])), 64);
    assert_eq!(code(&goracle(&["classify", "--checkpoint", "model.ckpt"])), 64);
    assert_eq!(code(&goracle(&["frobnicate"])), 64);
    assert_eq!(code(&goracle(&["--help"])), 0);
}

#[test]
fn train_with_zero_rate_keeps_fresh_init() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "4"]);
    let ckpt_path = tmp.path().join("m.ckpt");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&ckpt_path), "--steps", "1", "--lr", "0", "--seed", "5"];
    args.extend_from_slice(TINY);
    let out = goracle(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = load_checkpoint(&fs::read(&ckpt_path).unwrap()).unwrap();
    assert_eq!(ckpt.params, init_model(ckpt.config(), 5).unwrap());
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "4"]);
    let run = |seed_env: Option<&str>| {
        let mut args = vec!["train", "--manifest", s(&manifest), "--out", "/dev/null", "--steps", "15"];
        args.extend_from_slice(TINY);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_goracle"));
        cmd.args(&args).env_remove("GORACLE_SEED");
        if let Some(v) = seed_env {
            cmd.env("GORACLE_SEED", v);
        }
        let out = cmd.output().unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run(Some("11"));
    assert!(a.starts_with("# steps=15 batch_size=8 "), "{a}");
    assert!(a.contains(" seed=11 "));
    assert_eq!(a.lines().count(), 16);
    assert_eq!(a, run(Some("11")));
    assert_ne!(a, run(None));
}

#[test]
fn classify_separable_held_out_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let processor = ["--labels", "processor", "--format", "json", "--zero-offsets", "--per-project", "24"];
    let train_manifest = synth(&tmp.path().join("train"), &[&processor[..], &["--seed", "1"]].concat());
    synth(&tmp.path().join("test"), &[&processor[..], &["--seed", "2", "--projects", "2"]].concat());
    let ckpt = tmp.path().join("m.ckpt");
    let mut args =
        vec!["train", "--manifest", s(&train_manifest), "--out", s(&ckpt), "--steps", "300", "--lr", "1e-3", "--log", "/dev/null"];
    args.extend_from_slice(&["--seq-len", "128", "--embed-dim", "32", "--layers", "1", "--heads", "2"]);
    let out = goracle(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let test_manifest = CorpusManifest::read(&tmp.path().join("test/corpus.manifest.jsonl")).unwrap();
    let mut files: Vec<String> = test_manifest.entries.iter().map(|e| test_manifest.resolve(e).display().to_string()).collect();
    files.reverse();
    let mut args = vec!["classify", "--checkpoint", s(&ckpt)];
    args.extend(files.iter().map(String::as_str));
    let out = goracle(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), files.len());
    let mut agree = 0;
    for (line, file) in lines.iter().zip(&files) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], file, "output follows argument order");
        let p: f64 = cols[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        let expected = if file.ends_with("-fail.json") { "fail" } else { "pass" };
        agree += usize::from(cols[1] == expected);
    }
    let rate = agree as f64 / files.len() as f64;
    assert!(rate >= 0.95, "agreement {rate}");
}

#[test]
fn classify_reports_bad_files_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "2"]);
    let ckpt = tmp.path().join("m.ckpt");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&ckpt), "--steps", "2", "--log", "/dev/null"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&goracle(&args)), 0);
    let good = &trace_files(&tmp.path().join("c"))[0];
    let bad = tmp.path().join("bad.gotrace");
    fs::write(&bad, b"garbage").unwrap();
    let out = goracle(&["classify", "--checkpoint", s(&ckpt), s(&bad), s(good)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("bad.gotrace"));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with(s(good)));
}

#[test]
fn crossval_reports_every_held_out_project_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "4", "--projects", "3"]);
    let run = |dir: &str, jobs: &str| {
        let out_dir = tmp.path().join(dir);
        let mut args = vec![
            "crossval", "--manifest", s(&manifest), "--out", s(&out_dir), "--steps", "6", "--seed", "3",
            "--hold-out", "Docker,Kubernetes,Syncthing", "--jobs", jobs,
        ];
        args.extend_from_slice(TINY);
        let out = goracle(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(out_dir.join("crossval.jsonl")).unwrap()
    };
    let a = run("r1", "1");
    let rows: Vec<serde_json::Value> =
        String::from_utf8(a.clone()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["fold"], "Docker");
    assert_eq!(a, run("r2", "1"));
    assert_eq!(a, run("r3", "2"));
}

#[test]
fn crossval_unknown_project_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "2"]);
    let mut args = vec!["crossval", "--manifest", s(&manifest), "--out", "/dev/null/x", "--steps", "1", "--hold-out", "Nowhere"];
    args.extend_from_slice(TINY);
    let out = goracle(&args);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Nowhere"));
}

#[test]
fn ablate_default_runs_seven_arms_and_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "5"]);
    let out_dir = tmp.path().join("r");
    let mut args = vec!["ablate", "--manifest", s(&manifest), "--out", s(&out_dir), "--steps", "3"];
    args.extend_from_slice(TINY);
    let out = goracle(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(out_dir.join("ablation.jsonl")).unwrap();
    let names: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["field"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(names, ["baseline", "Off", "Type", "Ts", "P", "G", "StkID", "Stk"]);
    let table = fs::read_to_string(out_dir.join("ablation.txt")).unwrap();
    assert!(table.contains("passing") && table.contains("failing"), "{table}");
}

#[test]
fn inspect_describes_traces_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("c"), &["--per-project", "2"]);
    let file = &trace_files(&tmp.path().join("c"))[0];
    let out = goracle(&["inspect", s(file), "--fields", "Type,P"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("EvProcStart P"), "{text}");
    assert!(!text.contains("Ts"), "{text}");

    let ckpt = tmp.path().join("m.ckpt");
    let mut args = vec!["train", "--manifest", s(&manifest), "--out", s(&ckpt), "--steps", "1", "--log", "/dev/null"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&goracle(&args)), 0);
    let out = goracle(&["inspect", s(&ckpt)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("embed_dim 16"));
}
