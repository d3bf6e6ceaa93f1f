use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};
use whatif_core::fixtures;

fn whatif(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whatif"))
        .args(args)
        .current_dir(dir)
        .env_remove("WHATIF_PROVIDER")
        .env_remove("WHATIF_CONFIG")
        .env_remove("WHATIF_MOCK_SCRIPT")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}\nstdout: {}\nstderr: {}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
    })
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = whatif(dir.path(), &["example", "--dir", "."]);
    assert_eq!(o.status.code(), Some(0));
    dir
}

const MOCK: [&str; 4] = ["--provider", "mock", "--script", "mock-script.json"];

fn with_mock<'a>(args: &[&'a str]) -> Vec<&'a str> {
    MOCK.iter().copied().chain(args.iter().copied()).collect()
}

#[test]
fn extract_writes_graph_and_sidecar() {
    let dir = setup();
    let o = whatif(dir.path(), &with_mock(&["extract", "--input", "article.txt", "--out", "g.json"]));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["outcome"], "ok_formatted");
    assert_eq!(summary["graph_id"], fixtures::bursa_factual_graph().graph_id());

    let written = std::fs::read_to_string(dir.path().join("g.json")).unwrap();
    let graph = whatif_core::extraction::build_graph_from_json(&written).unwrap();
    assert_eq!(graph, fixtures::bursa_factual_graph());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["outcome"], "ok_formatted");
    assert!(meta["transcript"]["exchange"].is_object());
}

#[test]
fn extract_parse_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("doc.txt"), "Rain fell, so the streets got wet.").unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"default": "no graph here"}"#).unwrap();
    let o = whatif(dir.path(), &["--script", "bad.json", "extract", "--input", "doc.txt", "--out", "g.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["outcome"], "parse_error");
    assert!(!dir.path().join("g.json").exists());
    assert!(dir.path().join("g.meta.json").exists());
}

#[test]
fn counterfactual_emits_run_json() {
    let dir = setup();
    whatif(dir.path(), &with_mock(&["extract", "--input", "article.txt", "--out", "g.json"]));
    let o = whatif(
        dir.path(),
        &with_mock(&["counterfactual", "--graph", "g.json", "--do", "0=low", "--do", "9=False", "--out", "run.json"]),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let record = stdout_json(&o);
    let recomputed: Vec<&str> =
        record["run"]["partition"]["recomputed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(recomputed, ["10", "11", "12", "2", "3"]);
    assert_eq!(record["run"]["counterfactual"]["values"]["12"]["value"], "good");
    assert_eq!(record["run"]["counterfactual"]["values"]["h0"]["provenance"], "abduced");
    let file: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(file, record);

    let o = whatif(
        dir.path(),
        &with_mock(&["evaluate", "--graph", "g.json", "--self", "--kind", "counterfactual", "--run", "run.json"]),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["plausibility"][0]["kind"], "counterfactual");
}

#[test]
fn usage_errors_exit_two() {
    let dir = setup();
    assert_eq!(whatif(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(whatif(dir.path(), &["extract", "--input", "article.txt", "--bogus"]).status.code(), Some(2));
    assert_eq!(whatif(dir.path(), &["counterfactual", "--graph", "g.json"]).status.code(), Some(2));
    assert_eq!(whatif(dir.path(), &["counterfactual", "--graph", "g.json", "--do", "0low"]).status.code(), Some(2));
    assert_eq!(whatif(dir.path(), &["evaluate", "--graph", "g.json"]).status.code(), Some(2));
    assert_eq!(whatif(dir.path(), &["--provider", "nonsense", "extract", "--input", "article.txt"]).status.code(), Some(2));
    let help = whatif(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("cladder-run"));
    assert_eq!(whatif(dir.path(), &["merge", "--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_exit_one() {
    let dir = setup();
    let o = whatif(dir.path(), &with_mock(&["counterfactual", "--graph", "missing.json", "--do", "0=low"]));
    assert_eq!(o.status.code(), Some(1));
    whatif(dir.path(), &with_mock(&["extract", "--input", "article.txt", "--out", "g.json"]));
    let o = whatif(dir.path(), &with_mock(&["--json", "counterfactual", "--graph", "g.json", "--do", "nope=1"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout_json(&o)["error"].as_str().unwrap().contains("nope"));
}

fn write_merge_inputs(dir: &Path) {
    let (m1, m2) = fixtures::merge_pair();
    std::fs::write(dir.join("m1.json"), m1.to_json()).unwrap();
    std::fs::write(dir.join("m2.json"), m2.to_json()).unwrap();
}

#[test]
fn merge_strategies() {
    let dir = tempfile::tempdir().unwrap();
    write_merge_inputs(dir.path());
    let base = ["--provider", "mock", "merge", "--inputs", "m1.json", "m2.json", "--depth", "0"];
    let o = whatif(dir.path(), &[&base[..], &["--out", "merged.json"]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["nodes"], 5);
    assert!(dir.path().join("merged.meta.json").exists());
    let merged = std::fs::read_to_string(dir.path().join("merged.json")).unwrap();
    assert_eq!(whatif_core::extraction::build_graph_from_json(&merged).unwrap().nodes().len(), 5);

    let o = whatif(dir.path(), &[&base[..], &["--strategy", "analogy"]].concat());
    let v = stdout_json(&o);
    assert_eq!(v["nodes"], 7);
    assert_eq!(v["hidden"], 1);
    let o = whatif(dir.path(), &[&base[..], &["--strategy", "average"]].concat());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_merge_inputs(dir.path());
    let run = |seed: &str| {
        let o = whatif(dir.path(), &["--seed", seed, "merge", "--inputs", "m1.json", "m2.json", "--epsilon", "0.9"]);
        assert_eq!(o.status.code(), Some(0));
        o.stdout
    };
    assert_eq!(run("7"), run("7"));
}

#[test]
fn cladder_run_reports_blocks() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("suite.json"), fixtures::CLADDER_SUITE).unwrap();
    std::fs::write(
        dir.path().join("s.json"),
        r#"{"default": "{\"explanation\": \"no change\", \"value\": \"unchanged\", \"confidence\": 0.5}"}"#,
    )
    .unwrap();
    let args = ["--script", "s.json", "--seed", "3", "cladder-run", "--data", "suite.json", "--mode", "ggt"];
    let o = whatif(dir.path(), &[&args[..], &["--out", "report.json"]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["queries"], 20);
    assert!(summary.get("records").is_none());
    assert!(summary["accuracy"]["overall"].is_object());
    let total: u64 = summary["partition"]["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 20);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 20);

    let sampled = [&args[..], &["--sample", "5", "--out", "sample.json"]].concat();
    let sample_ids = || -> Vec<String> {
        assert_eq!(whatif(dir.path(), &sampled).status.code(), Some(0));
        let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("sample.json")).unwrap()).unwrap();
        r["records"].as_array().unwrap().iter().map(|r| r["query_id"].as_str().unwrap().to_string()).collect()
    };
    let first = sample_ids();
    let second = sample_ids();
    assert_eq!(first.len(), 5);
    assert_eq!(first, second);

    let o = whatif(dir.path(), &["cladder-run", "--data", "suite.json", "--mode", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}
