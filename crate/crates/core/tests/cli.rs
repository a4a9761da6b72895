//! Drives the binary end to end on a tiny synthetic world.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_entity-infill");

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml"))
}

fn run(work: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(fixture())
        .arg("--set")
        .arg(format!("paths.work_dir={:?}", work.display().to_string()))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(work: &Path, args: &[&str]) -> String {
    let o = run(work, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn prepare(work: &Path) {
    ok(work, &["synth-world"]);
    ok(work, &["ingest"]);
    ok(work, &["build-corpus"]);
}

#[test]
fn inspect_example_matches_golden_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "inspect-example", "--text", "x1 x2 x3 x4 x5 x6 x7", "--entity", "x1 x2 x3", "--entity", "x6 x7",
            "--mask", "0:3", "--mask", "4:1",
        ],
    );
    let golden = include_str!("golden/inspect_two_span.tsv");
    assert_eq!(out, golden);
}

#[test]
fn pipeline_runs_and_repeats_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        prepare(dir);
        ok(dir, &["pretrain"]);
    }
    for name in ["interactions.tsv", "corpus.jsonl", "vocab.tsv", "entities.tsv", "loss_trace.tsv", "checkpoint.rslm"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty(), "{name} is empty");
        assert!(x == y, "{name} differs between identical runs");
    }
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest-pretrain.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let table = ok(a.path(), &["evaluate"]);
    assert!(table.contains("HR@1"), "{table}");
    assert!(a.path().join("report.jsonl").exists());

    let gen = ok(a.path(), &["generate", "--prompt", "user u0000 bought [M] .", "--constrain-entities", "--max-steps", "8"]);
    let line = gen.lines().next().unwrap();
    assert_eq!(line.split('\t').count(), 3, "{gen}");
    let beam = ok(a.path(), &["generate", "--prompt", "[M]", "--constrain-entities", "--beam", "3"]);
    assert_eq!(beam.lines().count(), 3, "{beam}");
}

#[test]
fn ablate_rank_reports_every_rank() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let out = ok(dir.path(), &["--set", "train.max_steps=3", "ablate-rank"]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "rank\tlora_params\tsteps\tfirst_loss\tlast_loss\tnext_item_hr1");
    assert_eq!(rows.len(), 6);
    let ranks: Vec<usize> = rows[1..].iter().map(|r| r.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ranks, [2, 4, 8, 16, 32]);
    let params: Vec<usize> = rows[1..].iter().map(|r| r.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[1] == 2 * w[0]));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    // no corpus yet
    let o = run(dir.path(), &["pretrain"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
    let o = run(dir.path(), &["--set", "mask.objective_mix=[0.5,0.5,0.5]", "synth-world"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("objective_mix"));
    let o = run(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert!(o.status.success());
}
