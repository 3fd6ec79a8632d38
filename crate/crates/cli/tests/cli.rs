use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
    "total_steps": 20,
    "stage1_fraction": 0.25,
    "batch_tokens": 64,
    "seq_len": 16,
    "max_seq_len": 16,
    "hidden_dim": 16,
    "num_blocks": 2,
    "num_heads": 2,
    "ffn_inner_dim": 32,
    "expert_inner_dim": 32,
    "num_experts": 4,
    "router_feature_dim": 8,
    "warmup_steps": 4,
    "snapshot_interval": 5,
    "snapshot_tokens": 64,
    "eval_interval": 5,
    "eval_tokens": 64,
    "split": [0.8, 0.1, 0.1]
}"#;

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/public_domain.txt")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stablemoe")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_id(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("manifest "))
        .expect("manifest line")
        .to_owned()
}

#[test]
fn train_writes_reports_tagged_with_the_manifest_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&["train", "--config", s(&cfg), "--data", s(&data()), "--out", s(&out)]);
    let id = manifest_id(&stdout);
    assert_eq!(id.len(), 16);

    for name in [
        "metrics.jsonl",
        "fluctuation.csv",
        "curve.csv",
        "experts.json",
        "summary.json",
        "summary.txt",
        "manifest.json",
        "router.json",
    ] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.contains(&id), "{name} does not mention {id}");
    }
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains(&id)));
    assert!(out.join("router.bin").exists());

    let ckpt = out.join("checkpoint.bin");
    let eval = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data())]);
    assert!(eval.contains(&id) && eval.contains("step 20") && eval.contains("ppl"));
    let test = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data()), "--split", "test"]);
    assert_ne!(eval, test);

    let experts = ok(&["report-experts", "--checkpoint", s(&ckpt), "--data", s(&data()), "--top-k", "3"]);
    assert!(experts.contains(&id));
    assert_eq!(experts.lines().filter(|l| l.starts_with("expert ")).count(), 4);

    let curve = dir.path().join("curve.csv");
    let analysis = ok(&[
        "analyze-fluctuation",
        "--log",
        s(&out.join("fluctuation.csv")),
        "--total-steps",
        "20",
        "--out",
        s(&curve),
    ]);
    assert!(analysis.contains("fluctuating_after_20pct"));
    assert!(fs::read_to_string(&curve).unwrap().ends_with(",1\n"));
}

#[test]
fn resuming_a_checkpoint_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["train", "--config", s(&cfg), "--data", s(&data()), "--out", s(&a), "--checkpoint-at", "12"]);
    let mid = a.join("checkpoint-12.bin");
    ok(&["train", "--resume", s(&mid), "--data", s(&data()), "--out", s(&b)]);
    for name in ["metrics.jsonl", "curve.csv", "fluctuation.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn compare_trains_each_router_and_summarize_reads_them_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("cmp");
    let stdout = ok(&["compare", "--config", s(&cfg), "--data", s(&data()), "--seed", "3", "--out", s(&out)]);
    let table = fs::read_to_string(out.join("compare.txt")).unwrap();
    assert!(stdout.ends_with(&table));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["stablemoe", "switch", "base", "hash"]) {
        assert!(row.starts_with(name), "{row}");
        assert!(row.split_whitespace().nth(1) == Some("3"));
    }
    let dirs: Vec<PathBuf> = ["stablemoe", "hash"].iter().map(|r| out.join(r)).collect();
    let summary = ok(&["summarize", s(&dirs[0]), s(&dirs[1])]);
    assert_eq!(summary.lines().count(), 3);
    assert_eq!(summary.lines().nth(1), rows.first().copied());
}

#[test]
fn synth_writes_the_requested_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.txt");
    ok(&["synth", "--bytes", "5000", "--seed", "4", "--out", s(&path)]);
    let first = fs::read(&path).unwrap();
    assert_eq!(first.len(), 5000);
    ok(&["synth", "--bytes", "5000", "--seed", "4", "--out", s(&path)]);
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn errors_exit_nonzero_with_a_category_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("missing.txt");

    let e = err(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(dir.path())]);
    assert!(e.starts_with("io error:"), "{e}");

    let e = err(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(e.starts_with("config error:"), "{e}");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"num_experts": 0}"#).unwrap();
    let e = err(&["train", "--config", s(&bad), "--data", s(&data()), "--out", s(dir.path())]);
    assert!(e.starts_with("config error:"), "{e}");

    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let e = err(&["eval", "--checkpoint", s(&junk), "--data", s(&data())]);
    assert!(e.starts_with("integrity error:"), "{e}");

    let tiny = dir.path().join("tiny.txt");
    fs::write(&tiny, "abc").unwrap();
    let e = err(&["train", "--config", s(&cfg), "--data", s(&tiny), "--out", s(dir.path())]);
    assert!(e.starts_with("contract error:"), "{e}");
}
