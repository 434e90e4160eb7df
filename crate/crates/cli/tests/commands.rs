mod common;

use common::*;
use matchforge::optimize::DemoSet;
use matchforge::{MatchRun, Stage};

#[test]
fn replayed_match_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(code(&match_mimic(&a, &[])), 0);
    assert_eq!(code(&match_mimic(&b, &[])), 0);
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
}

#[test]
fn records_do_not_depend_on_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(code(&match_mimic(&a, &["--parallelism", "8"])), 0);
    assert_eq!(code(&match_mimic(&b, &["--parallelism", "1"])), 0);
    let (a, b) = (MatchRun::load(&a).unwrap(), MatchRun::load(&b).unwrap());
    assert!(a.records == b.records);
}

#[test]
fn ablation_flag_reaches_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sem.json");
    assert_eq!(code(&match_mimic(&out, &["--ablation", "semantic-only"])), 0);
    let run = MatchRun::load(&out).unwrap();
    assert_eq!(run.meta.config.ablation.as_str(), "semantic_only");
    for rec in &run.records {
        assert!(rec.candidates.reasoning.is_empty(), "{}", rec.query.attr);
        assert!(rec.trace.iter().all(|s| s.stage.stage() != Some(Stage::CandidateGen)));
    }
}

#[test]
fn missing_cassette_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let res = match_mimic(&out, &["--cassette", "/nonexistent/cassette.jsonl"]);
    assert_eq!(code(&res), 1, "{}", stderr(&res));
    assert!(stderr(&res).contains("cassette.jsonl"), "{}", stderr(&res));
    assert!(!out.exists());
}

#[test]
fn replay_miss_marks_queries_failed_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let res = match_mimic(&out, &["--k-semantic", "3"]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
    let run = MatchRun::load(&out).unwrap();
    assert!(run.has_errors());
}

#[test]
fn scripted_run_with_missing_rules_is_partial() {
    let dir = tempfile::tempdir().unwrap();
    let full: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fx("accuracy20/script.json")).unwrap()).unwrap();
    let rules: Vec<_> = full["rules"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| !r["contains"].as_str().unwrap().contains("q07"))
        .cloned()
        .collect();
    let script = dir.path().join("script.json");
    std::fs::write(&script, serde_json::json!({ "rules": rules }).to_string()).unwrap();
    let out = dir.path().join("run.json");
    let res = match_accuracy20(&out, &path_str(&script));
    assert_eq!(code(&res), 2, "{}", stderr(&res));
    let run = MatchRun::load(&out).unwrap();
    let failed: Vec<String> = run.records.iter().filter(|r| r.is_error()).map(|r| r.query.attr.to_string()).collect();
    assert_eq!(failed, vec!["src.q07"]);
}

#[test]
fn index_rebuild_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let target = fx("omop_target.json");
    let a = path_str(&dir.path().join("a.idx"));
    let b = path_str(&dir.path().join("b.idx"));
    let ra = matchforge(&["index", "--target", &target, "--seed", "7", "--out", &a]);
    let rb = matchforge(&["index", "--target", &target, "--seed", "7", "--out", &b]);
    assert_eq!(code(&ra), 0, "{}", stderr(&ra));
    assert_eq!(code(&rb), 0);
    assert!(stdout(&ra).contains("100 documents, dim 64"), "{}", stdout(&ra));
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
    let c = path_str(&dir.path().join("c.idx"));
    matchforge(&["index", "--target", &target, "--seed", "8", "--out", &c]);
    assert!(std::fs::read(&a).unwrap() != std::fs::read(&c).unwrap());
}

#[test]
fn prebuilt_index_gives_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let idx = path_str(&dir.path().join("omop.idx"));
    assert_eq!(code(&matchforge(&["index", "--target", &fx("omop_target.json"), "--out", &idx])), 0);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(code(&match_mimic(&a, &[])), 0);
    assert_eq!(code(&match_mimic(&b, &["--index", &idx])), 0);
    assert!(std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap());
}

#[test]
fn index_from_another_embedder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let idx = path_str(&dir.path().join("omop.idx"));
    matchforge(&["index", "--target", &fx("omop_target.json"), "--seed", "3", "--out", &idx]);
    let res = match_mimic(&dir.path().join("run.json"), &["--index", &idx]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("index was built with"), "{}", stderr(&res));
}

#[test]
fn missing_input_and_unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(&dir.path().join("x.idx"));
    let res = matchforge(&["index", "--target", "/nonexistent/target.json", "--out", &out]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).starts_with("error:"));
    assert_eq!(code(&matchforge(&["index", "--target", "t.json", "--out", &out, "--bogus"])), 1);
    assert_eq!(code(&matchforge(&["match"])), 1);
    assert_eq!(code(&matchforge(&["--help"])), 0);
}

#[test]
fn help_documents_every_flag() {
    let help = stdout(&matchforge(&["match", "--help"]));
    for flag in [
        "--source", "--target", "--index", "--backend", "--cassette", "--script", "--demos", "--ablation", "--k-semantic",
        "--k-reason", "--tau", "--parallelism", "--mcq-via-llm", "--out", "--config", "--embedder", "--seed", "--dim",
    ] {
        assert!(help.contains(flag), "match --help lacks {flag}");
    }
    let help = stdout(&matchforge(&["optimize", "--help"]));
    for flag in ["--n-easy", "--n-challenging", "--n-demos", "--min-rating", "--out-demos"] {
        assert!(help.contains(flag), "optimize --help lacks {flag}");
    }
}

fn optimize(out_demos: &std::path::Path, extra: &[&str]) -> std::process::Output {
    let cfg = fx("mimic.toml");
    let source = fx("mimic_source.json");
    let target = fx("omop_target.json");
    let out = path_str(out_demos);
    let mut args = vec!["--config", &cfg, "optimize", "--source", &source, "--target", &target, "--out-demos", &out];
    args.extend_from_slice(extra);
    matchforge(&args)
}

#[test]
fn optimize_writes_demo_sets_that_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let res = optimize(dir.path(), &[]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("selected ratings: [5, 5, 5, 5]"), "{}", stdout(&res));
    for stage in ["candidate_gen", "refine", "mcq_format", "confidence"] {
        let written = dir.path().join(format!("{stage}.json"));
        let set = DemoSet::load(&written).unwrap();
        let committed = std::fs::read(fixtures().join(format!("mimic_demos/{stage}.json"))).unwrap();
        assert!(std::fs::read(&written).unwrap() == committed, "{stage} differs from the committed demos");
        assert!(set.demos.len() <= 4);
    }
}

#[test]
fn optimize_with_zero_demos_writes_empty_sets() {
    let dir = tempfile::tempdir().unwrap();
    let res = optimize(dir.path(), &["--n-demos", "0"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let mut n = 0;
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let set = DemoSet::load(entry.unwrap().path()).unwrap();
        assert!(set.demos.is_empty());
        n += 1;
    }
    assert!(n > 0);
}

#[test]
fn optimize_with_empty_eval_set_warns() {
    let dir = tempfile::tempdir().unwrap();
    let res = optimize(dir.path(), &["--n-easy", "0", "--n-challenging", "0"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stderr(&res).contains("evaluation set is empty"), "{}", stderr(&res));
}

fn evaluate(run: &std::path::Path, gold: &str, extra: &[&str]) -> std::process::Output {
    let run = path_str(run);
    let source = fx("accuracy20/source.json");
    let target = fx("accuracy20/target.json");
    let mut args = vec!["evaluate", "--run", &run, "--gold", gold, "--source", &source, "--target", &target];
    args.extend_from_slice(extra);
    matchforge(&args)
}

#[test]
fn evaluate_writes_curves_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.json");
    assert_eq!(code(&match_accuracy20(&run, &fx("accuracy20/script.json"))), 0);
    let deferral = dir.path().join("deferral.csv");
    let remedial = dir.path().join("remedial.csv");
    let report = dir.path().join("report.json");
    let res = evaluate(
        &run,
        &fx("accuracy20/gold.csv"),
        &[
            "--deferral", &path_str(&deferral), "--remedial", &path_str(&remedial), "--report", &path_str(&report),
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("accuracy@1  0.7000"), "{}", stdout(&res));

    let csv = std::fs::read_to_string(&deferral).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "policy,p,n_deferred,accuracy_at_1");
    assert_eq!(lines.len(), 7);
    let ps: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ps, ["0", "10", "20", "30", "40", "50"]);

    let rem = std::fs::read_to_string(&remedial).unwrap();
    assert_eq!(rem.lines().count(), 1 + 7);

    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["metrics"]["accuracy_at"]["1"], 0.7);
    assert_eq!(v["metrics"]["n_queries"], 20);
    assert_eq!(v["deferral"].as_array().unwrap().len(), 2);
    assert_eq!(v["deferral"][1]["policy"], "random");
    assert_eq!(v["deferral"][1]["seed"], 0);
    assert_eq!(v["remedial"].as_array().unwrap().len(), 7);
}

#[test]
fn evaluate_against_own_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let run_path = dir.path().join("run.json");
    assert_eq!(code(&match_accuracy20(&run_path, &fx("accuracy20/script.json"))), 0);
    let run = MatchRun::load(&run_path).unwrap();
    let mut gold = String::from("source,target\n");
    for rec in &run.records {
        let top = rec.result.as_ref().and_then(|m| m.top1()).map(|t| t.to_string()).unwrap_or_default();
        gold.push_str(&format!("{},{}\n", rec.query.attr, top));
    }
    let gold_path = dir.path().join("self.csv");
    std::fs::write(&gold_path, gold).unwrap();
    let res = evaluate(&run_path, &path_str(&gold_path), &["--k", "1"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(stdout(&res).contains("accuracy@1  1.0000"), "{}", stdout(&res));
}

#[test]
fn evaluate_rejects_gold_the_run_does_not_cover() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run.json");
    assert_eq!(code(&match_accuracy20(&run, &fx("accuracy20/script.json"))), 0);
    let mut trimmed = MatchRun::load(&run).unwrap();
    trimmed.records.truncate(5);
    trimmed.save(&run).unwrap();
    let res = evaluate(&run, &fx("accuracy20/gold.csv"), &[]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("no record for gold entry"), "{}", stderr(&res));
}

#[test]
fn ablation_command_prints_one_row_per_variant() {
    let res = matchforge(&[
        "--config",
        &fx("mimic.toml"),
        "ablation",
        "--source",
        &fx("mimic_source.json"),
        "--target",
        &fx("omop_target.json"),
        "--gold",
        &fx("mimic_gold.csv"),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let out = stdout(&res);
    for row in ["full", "reasoning_only", "semantic_only"] {
        assert!(out.lines().any(|l| l.starts_with(row)), "{out}");
    }
}

#[test]
fn serve_rejects_a_file_as_data_dir() {
    let file = tempfile::NamedTempFile::new().unwrap();
    let res = matchforge(&["serve", "--port", "0", "--data-dir", &path_str(file.path())]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).starts_with("error:"), "{}", stderr(&res));
}

#[test]
fn serve_fails_when_the_port_is_taken() {
    let dir = tempfile::tempdir().unwrap();
    let busy = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let res = matchforge(&["serve", "--port", &port, "--data-dir", &path_str(dir.path())]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("cannot listen"), "{}", stderr(&res));
}

#[cfg(unix)]
#[test]
fn serve_shuts_down_on_sigterm() {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::process::{Command, Stdio};

    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_matchforge"))
        .args(["serve", "--port", "0", "--data-dir", &path_str(dir.path())])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect("banner").to_string();

    let mut conn = std::net::TcpStream::connect(&addr).unwrap();
    write!(conn, "GET /api/v1/runs HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut reply = String::new();
    conn.read_to_string(&mut reply).unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.ends_with("[]"), "{reply}");

    let killed = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    assert_eq!(child.wait().unwrap().code(), Some(0));
}
