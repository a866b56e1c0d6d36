use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medref::cli::RunConfig;
use medref::corpus::{load_sessions, LoadMode};
use medref::knowledge::{KnowledgeGraph, TripletFormat};
use medref::metrics::EvalReport;
use medref::predictor::MedRefModel;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn medref(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medref"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture_args() -> Vec<String> {
    vec![
        "--corpus".into(),
        fixture("sessions.jsonl").display().to_string(),
        "--graph".into(),
        fixture("triplets.jsonl").display().to_string(),
    ]
}

fn run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = fixture_args();
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    medref(dir, &refs)
}

#[test]
fn assemble_prompt_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let preds = fixture("predictions.jsonl").display().to_string();
    let out = run(
        dir.path(),
        &["assemble-prompt", "--session", "s1", "--turn", "2", "--predictions", &preds],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = fs::read(dir.path().join("prompt.txt")).unwrap();
    let want = fs::read(fixture("prompt_s1_t2.golden.txt")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(want).unwrap());
}

#[test]
fn evaluate_fixture_matches_oracle_numbers() {
    // Values from an independent brute-force computation over the same fixture.
    let dir = tempfile::tempdir().unwrap();
    let generated = fixture("generated.jsonl").display().to_string();
    let out = run(dir.path(), &["evaluate", "--generated", &generated]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let o = &report.overall;
    let expected = [
        (o.bleu1, 38.032337162119624),
        (o.bleu2, 30.568357102457533),
        (o.bleu4, 18.944355701843193),
        (o.rouge1, 53.20494864612511),
        (o.rouge2, 32.9160125588697),
        (o.entity_f1, 84.21052631578948),
    ];
    for (got, want) in expected {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert_eq!(o.responses, 7);
    assert_eq!(report.sessions.len(), 3);
}

/// Writes a small synthetic training set into `dir/data` and returns its flags.
fn synth(dir: &Path) -> Vec<String> {
    let out = medref(dir, &["synth", "--out", "data", "--sessions", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    vec![
        "--corpus".into(),
        "data/sessions.jsonl".into(),
        "--graph".into(),
        "data/triplets.jsonl".into(),
    ]
}

fn run_synth(dir: &Path, base: &[String], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
    args.extend_from_slice(extra);
    medref(dir, &args)
}

#[test]
fn train_zero_epochs_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let base = synth(dir.path());
    let out = run_synth(dir.path(), &base, &["train", "--epochs", "0", "--d", "8", "--d-z", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = RunConfig { d: 8, d_z: 4, ..RunConfig::default() };
    let data = dir.path().join("data");
    let corpus = load_sessions(&data.join("sessions.jsonl"), None, LoadMode::Training).unwrap();
    let kg = KnowledgeGraph::load(&data.join("triplets.jsonl"), TripletFormat::Jsonl).unwrap();
    let model = MedRefModel::for_corpus(cfg.model_config(), &corpus, &kg);
    let expected = dir.path().join("expected.json");
    model.save(&expected).unwrap();
    assert_eq!(
        fs::read(dir.path().join("medref-model.json")).unwrap(),
        fs::read(expected).unwrap()
    );
}

#[test]
fn train_predict_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = synth(dir.path());
    for step in [
        vec!["train", "--epochs", "2", "--d", "8", "--d-z", "4"],
        vec!["predict"],
        vec!["generate", "--predictions", "predictions.jsonl"],
        vec!["evaluate", "--generated", "generated.jsonl"],
    ] {
        let out = run_synth(dir.path(), &base, &step);
        assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let log = fs::read_to_string(dir.path().join("medref-model.json.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let preds = fs::read_to_string(dir.path().join("predictions.jsonl")).unwrap();
    let sessions = fs::read_to_string(dir.path().join("data/sessions.jsonl")).unwrap();
    let turns: usize = sessions
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["utterances"].as_array().unwrap().len().div_ceil(2)
        })
        .sum();
    assert_eq!(preds.lines().count(), turns);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn chat_replies_with_stub() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = synth(dir.path());
    let train = run_synth(dir.path(), &args, &["train", "--epochs", "1", "--d", "8", "--d-z", "4"]);
    assert!(train.status.success());
    args.extend(["chat".to_string(), "--verbose".to_string()]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_medref"))
        .current_dir(dir.path())
        .args(&args)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"i have a fever and cough\n:quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("doctor> ["), "{text}");
    assert!(text.contains("tau: "), "{text}");
}

#[test]
fn show_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"window": 3, "max_triplets": 10}"#).unwrap();
    let out = medref(dir.path(), &["--config", "run.json", "--max-triplets", "7", "show-config"]);
    assert!(out.status.success());
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((cfg.window, cfg.max_triplets), (3, 7));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| medref(dir.path(), args).status.code();
    assert_eq!(code(&["no-such-command"]), Some(2));
    assert_eq!(code(&["--window", "0", "show-config"]), Some(3));
    fs::write(dir.path().join("bad.json"), r#"{"windw": 3}"#).unwrap();
    assert_eq!(code(&["--config", "bad.json", "show-config"]), Some(3));
    assert_eq!(code(&["ingest"]), Some(3));
    assert_eq!(code(&["--corpus", "missing.jsonl", "ingest"]), Some(4));
    fs::write(dir.path().join("broken.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&["--corpus", "broken.jsonl", "ingest"]), Some(5));
    let corpus = fixture("sessions.jsonl").display().to_string();
    let graph = fixture("triplets.jsonl").display().to_string();
    assert_eq!(code(&["--corpus", &corpus, "--graph", &graph, "predict"]), Some(4));
    let preds = fixture("predictions.jsonl").display().to_string();
    let unreachable = [
        "--corpus", &corpus, "--graph", &graph, "--generator", "http",
        "--endpoint-url", "http://127.0.0.1:9/v1/chat/completions",
        "generate", "--session", "s1", "--turn", "1", "--predictions", &preds,
    ];
    assert_eq!(code(&unreachable), Some(6));
}

#[test]
fn evaluate_gold_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("sessions.jsonl")).unwrap();
    let mut gold = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let utts = v["utterances"].as_array().unwrap();
        for (t, pair) in utts.chunks(2).enumerate() {
            if let [_, doctor] = pair {
                let rec = serde_json::json!({"session": v["id"], "turn": t + 1, "response": doctor["text"]});
                gold.push_str(&format!("{rec}\n"));
            }
        }
    }
    fs::write(dir.path().join("gold.jsonl"), gold).unwrap();
    let out = run(dir.path(), &["evaluate", "--generated", "gold.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let o = &report.overall;
    for v in [o.bleu1, o.bleu2, o.bleu4, o.rouge1, o.rouge2, o.entity_f1] {
        assert!((v - 100.0).abs() < 1e-9, "{v}");
    }
}

#[test]
fn dumped_config_reproduces_training() {
    let dir = tempfile::tempdir().unwrap();
    let base = synth(dir.path());
    let flags = ["--epochs", "2", "--d", "8", "--d-z", "4", "--seed", "5"];
    let mut args: Vec<&str> = flags.to_vec();
    args.extend(["--checkpoint", "a.json", "train"]);
    assert!(run_synth(dir.path(), &base, &args).status.success());
    let mut args: Vec<&str> = flags.to_vec();
    args.extend(["--checkpoint", "b.json", "show-config", "--out", "run.json"]);
    assert!(run_synth(dir.path(), &base, &args).status.success());
    let out = medref(dir.path(), &["--config", "run.json", "train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read(dir.path().join("a.json")).unwrap();
    let b = fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a.json.log.jsonl")).unwrap(),
        fs::read(dir.path().join("b.json.log.jsonl")).unwrap()
    );
}
