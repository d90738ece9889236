use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn patrend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patrend"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = patrend(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path, seed: &str) {
    ok(&[
        "synth",
        "--out",
        s(dir),
        "--seed",
        seed,
        "--companies",
        "6",
        "--branching",
        "2,3,3",
        "--events-per-company-year",
        "6",
    ]);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_corpus(a.path(), "7");
    small_corpus(b.path(), "7");
    for f in ["taxonomy.csv", "events.jsonl", "preferences.json", "config.toml"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
        assert!(!x.is_empty());
    }
}

#[test]
fn ingest_summarizes() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), "1");
    let out = ok(&["ingest", "--config", s(&dir.path().join("config.toml"))]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["companies"], 6);
    assert_eq!(v["leaves"], 18);
    assert_eq!(v["level_sizes"], serde_json::json!([2, 6, 18]));
    assert_eq!(v["events"], 6 * 5 * 6);
}

#[test]
fn top_baseline_ranks_every_company_alike() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), "2");
    let cfg = dir.path().join("config.toml");
    let csv = dir.path().join("report.csv");
    let out = ok(&[
        "eval",
        "--config",
        s(&cfg),
        "--baseline",
        "top",
        "--span",
        "test",
        "--ks",
        "5,10",
        "--csv",
        s(&csv),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["span"], "test");
    assert_eq!(v["Ks"], serde_json::json!([5, 10]));
    let r5 = v["recall"]["5"].as_f64().unwrap();
    let r10 = v["recall"]["10"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r5) && r5 <= r10);
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 1);
}

#[test]
fn train_zero_epochs_then_eval_predict_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), "3");
    let cfg = dir.path().join("config.toml");
    let ck = dir.path().join("ck.json");
    let log = dir.path().join("log.jsonl");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--max-epochs",
        "0",
        "--hidden-dim",
        "4",
        "--out",
        s(&ck),
        "--log",
        s(&log),
    ]);
    let ckv: serde_json::Value = serde_json::from_slice(&fs::read(&ck).unwrap()).unwrap();
    assert_eq!(ckv["format"], "patrend-checkpoint");
    assert_eq!(ckv["epoch"], 0);
    assert_eq!(fs::read_to_string(&log).unwrap(), "");

    let out = ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--level", "2"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["span"], "val@level2");

    let out = ok(&[
        "predict",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ck),
        "--company",
        "co0,co1",
        "--k",
        "3",
    ]);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["rank"], 1);
    assert_eq!(lines[0]["ancestors"].as_array().unwrap().len(), 2);

    let tsv = dir.path().join("emb.tsv");
    ok(&[
        "dump-embeddings",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&tsv),
    ]);
    let text = fs::read_to_string(&tsv).unwrap();
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first.len(), 3 + 4);
    assert_eq!(first[0], "company_memory");
}

#[test]
fn train_one_epoch_logs_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), "4");
    let cfg = dir.path().join("config.toml");
    let ck = dir.path().join("ck.json");
    let log = dir.path().join("log.jsonl");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--max-epochs",
        "1",
        "--hidden-dim",
        "4",
        "--batch-size",
        "20",
        "--ablate",
        "hmp",
        "--out",
        s(&ck),
        "--log",
        s(&log),
    ]);
    let text = fs::read_to_string(&log).unwrap();
    let entry: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(entry["epoch"], 1);
    assert!(entry["train_loss"].as_f64().unwrap() > 0.0);
    assert!(entry.get("val_recall@10").is_some());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    // unreadable config file is an I/O problem on the input side
    assert_eq!(patrend(&["ingest", "--config", s(&missing)]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "hidden_dim = \"wide\"\n").unwrap();
    assert_eq!(patrend(&["ingest", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(patrend(&["bogus-verb"]).status.code(), Some(1));
    assert_eq!(patrend(&["ingest"]).status.code(), Some(1));

    let tax = dir.path().join("taxonomy.csv");
    fs::write(&tax, "node_id,parent_id,level\nA,,1\nA1,A,2\n").unwrap();
    let ev = dir.path().join("events.jsonl");
    fs::write(
        &ev,
        "{\"patent_id\":\"p\",\"companies\":[\"x\"],\"codes\":[\"ZZ\"],\"timestamp\":1420070400}\n",
    )
    .unwrap();
    let out = patrend(&["ingest", "--events", s(&ev), "--taxonomy", s(&tax)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ZZ"));
}
