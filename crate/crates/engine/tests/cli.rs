use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const REPLY: &str = r"<think>
Clear cells on a delicate vascular network; clear cell type leads.
</think>
<answer>
Differential diagnosis:
\DiffList{Clear cell renal cell carcinoma (ccRCC), Chromophobe renal cell carcinoma (chRCC), Papillary renal cell carcinoma (pRCC)}

Further Examination Items:
\ExamList{Immunohistochemical staining CA9, Immunohistochemical staining CK7}

Further Observation Tool Calls:
\ToolCallList{tool-ccRCC, tool-chRCC, tool-pRCC, tool-Nuclear}
</answer>";

fn engine(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_engine"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ENGINE_")) {
        cmd.env_remove(k);
    }
    cmd.current_dir(dir).args(args).output().expect("engine runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json_record(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    let line = text.lines().last().expect("one record");
    let v: Value = serde_json::from_str(line).expect("json record");
    assert_eq!(v["schema_version"], 1);
    v
}

/// Three synthetic cases written under `dir/data`.
fn synth(dir: &Path) {
    let o = engine(dir, &["synth", "--out", "data", "--cases", "3", "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = engine(dir.path(), &["bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&engine(dir.path(), &["--help"])), 0);
    assert_eq!(code(&engine(dir.path(), &["score", "--transcript", "t", "--truth", "y", "--alpha", "x"])), 2);
}

#[test]
fn missing_input_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = engine(dir.path(), &["score", "--transcript", "nope.txt", "--truth", "nope.txt"]);
    assert_eq!(code(&o), 1);
    let o = engine(dir.path(), &["ablate", "--axis", "roi-plan", "--grid", "top3"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn score_prints_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), REPLY).unwrap();
    fs::write(dir.path().join("y.txt"), "Clear cell renal cell carcinoma\n").unwrap();
    let args = ["score", "--transcript", "t.txt", "--truth", "y.txt", "--alpha", "2"];
    let o = engine(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("reply 1: r_d="));

    let mut json_args = args.to_vec();
    json_args.push("--json");
    let v = json_record(&engine(dir.path(), &json_args));
    assert_eq!(v["kind"], "score");
    let reply = &v["data"]["replies"][0];
    let expected = 1.0 / (1.0 + (-0.5f64).exp() + (-1.0f64).exp());
    let r_d = reply["breakdown"]["r_d"].as_f64().unwrap();
    assert!((r_d - expected).abs() < 1e-9, "{r_d} vs {expected}");
    assert_eq!(reply["match_position"], 1);
    assert_eq!(reply["breakdown"]["n_f"], 0);
}

#[test]
fn oracle_runs_replay_identically() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let case = "data/cases/RCC-01.json";
    for log in ["a.jsonl", "b.jsonl"] {
        let o = engine(dir.path(), &["run", "--case", case, "--mode", "oracle", "--seed", "7", "--log", log]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, fs::read(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn interactive_run_stops_for_exams_then_uses_given_results() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let case = "data/cases/RCC-01.json";
    let o = engine(dir.path(), &["run", "--case", case, "--mode", "interactive", "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_record(&o);
    assert_eq!(v["data"]["status"], "awaiting_exams");
    let pending: Vec<String> = v["data"]["pending_exams"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e.as_str().unwrap().to_string())
        .collect();
    assert!(!pending.is_empty());

    let answers: serde_json::Map<String, Value> =
        pending.iter().map(|e| (e.clone(), Value::from("Negative"))).collect();
    fs::write(dir.path().join("exams.json"), Value::Object(answers).to_string()).unwrap();
    let o = engine(
        dir.path(),
        &["run", "--case", case, "--mode", "interactive", "--exams", "exams.json", "--json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_record(&o)["data"]["status"], "done");
}

#[test]
fn config_precedence_is_flag_env_file_default() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(dir.path().join("engine.toml"), "seed = 1\n").unwrap();
    let session = |extra_env: Option<&str>, args: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_engine"));
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ENGINE_")) {
            cmd.env_remove(k);
        }
        if let Some(seed) = extra_env {
            cmd.env("ENGINE_SEED", seed);
        }
        let mut all = vec!["run", "--case", "data/cases/RCC-02.json", "--log", "x.jsonl", "--json"];
        all.extend_from_slice(args);
        let o = cmd.current_dir(dir.path()).args(&all).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        json_record(&o)["data"]["session_id"].as_str().unwrap().to_string()
    };
    assert_eq!(session(None, &[]), "RCC-02-s0");
    assert_eq!(session(None, &["--config", "engine.toml"]), "RCC-02-s1");
    assert_eq!(session(Some("2"), &["--config", "engine.toml"]), "RCC-02-s2");
    assert_eq!(session(Some("2"), &["--config", "engine.toml", "--set", "seed=3"]), "RCC-02-s3");
    assert_eq!(session(Some("2"), &["--config", "engine.toml", "--seed", "4"]), "RCC-02-s4");
}

#[test]
fn eval_and_ablate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = engine(dir.path(), &["eval", "--corpus", "data", "--protocol", "op", "--report", "op.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("op.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["metrics"]["cases"], 3);

    let o = engine(
        dir.path(),
        &["ablate", "--axis", "evidence-sources", "--grid", "FF,TT", "--corpus", "data", "--json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_record(&o);
    assert_eq!(v["kind"], "ablate");
    assert_eq!(v["data"]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn ingest_and_toolkit_inspect_read_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = engine(dir.path(), &["ingest", "--corpus", "data/corpus", "--check", "--json"]);
    assert_eq!(code(&o), 0);
    assert!(json_record(&o)["data"]["patches"].as_u64().unwrap() > 0);
    let o = engine(dir.path(), &["toolkit", "inspect", "--dir", "data/toolkits", "--name", "pan-cancer"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("pan-cancer"));
    let o = engine(
        dir.path(),
        &["--embeddings", "data/corpus", "toolkit", "build", "--out", "rebuilt", "--seed", "5"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.path().join("rebuilt/pan-cancer.emb")).unwrap(),
        fs::read(dir.path().join("data/toolkits/pan-cancer.emb")).unwrap()
    );
}
