use std::path::Path;
use std::process::{Command, Output};

fn synthfeed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthfeed"))
        .args(args)
        .env_remove("SYNTHFEED_CONFIG")
        .env_remove("SYNTHFEED_PRESET")
        .env_remove("SYNTHFEED_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = synthfeed(args);
    assert!(
        out.status.success(),
        "synthfeed {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stage_commands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (table, queries, pairs, rm) = (
        d.join("table.json"),
        d.join("q.jsonl"),
        d.join("c.jsonl"),
        d.join("rm.ckpt"),
    );
    let seeds = d.join("seeds.txt");
    let seed_lines: Vec<String> = (0..12)
        .map(|i| format!("seed question number {i}"))
        .collect();
    std::fs::write(&seeds, seed_lines.join("\n")).unwrap();
    ok(&["toyworld", "init", "--topics", "10", "--out", p(&table)]);
    ok(&[
        "mine-queries",
        "--table",
        p(&table),
        "--seeds",
        p(&seeds),
        "--count",
        "40",
        "--out",
        p(&queries),
    ]);
    assert_eq!(
        std::fs::read_to_string(&queries).unwrap().lines().count(),
        40
    );
    let counts = ok(&[
        "gen-comparisons",
        "--table",
        p(&table),
        "--queries",
        p(&queries),
        "--no-asis",
        "--out",
        p(&pairs),
    ]);
    assert!(counts.contains("pairs"), "{counts}");
    ok(&[
        "--set",
        "rm.epochs=1",
        "train-rm",
        "--data",
        p(&pairs),
        "--out",
        p(&rm),
    ]);
    let report = ok(&["eval", "rm-accuracy", "--rm", p(&rm), "--data", p(&pairs)]);
    assert!(report.contains("lengthy_baseline"), "{report}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthfeed(&[
        "--set",
        "ppo.no_such_knob=1",
        "toyworld",
        "init",
        "--out",
        p(&dir.path().join("t.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo.no_such_knob"));
}

#[test]
fn stage_without_inputs_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthfeed(&["run", "--only", "simulate", "--out", p(dir.path())]);
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(text.contains("rm.ckpt"), "{text}");
}

#[test]
fn config_file_lines_apply_and_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# toy\ntoyworld.topics = 4\nthis is not a setting\n").unwrap();
    let out = synthfeed(&[
        "--config",
        p(&cfg),
        "toyworld",
        "init",
        "--out",
        p(&dir.path().join("t.json")),
    ]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains(":3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
