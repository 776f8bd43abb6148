use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn guidecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidecap")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_world(dir: &Path, groups: &str, seed: &str) {
    let out = guidecap(&["gen-world", "--groups", groups, "--rho", "0.7", "--seed", seed, "--out-dir", p(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn decode(dir: &Path, extra: &[&str]) -> String {
    let corpus = dir.join("corpus.jsonl");
    let scorer = format!("tabular:{}", p(&dir.join("world.json")));
    let mut args = vec!["decode", "--corpus", p(&corpus), "--scorer", &scorer];
    args.extend_from_slice(extra);
    let out = guidecap(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&guidecap(&["--help"])), 0);
    assert_eq!(code(&guidecap(&[])), 2);
    assert_eq!(code(&guidecap(&["frobnicate"])), 2);
    assert_eq!(code(&guidecap(&["decode", "--corpus", "x.jsonl"])), 2);
    for sub in ["gen-world", "decode", "build-prompt", "eval", "sweep", "oracle", "ping-server", "train-ngram"] {
        assert_eq!(code(&guidecap(&[sub, "--help"])), 0, "{sub}");
    }
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = guidecap(&["gen-world", "--spec", "/nonexistent/spec.json", "--out-dir", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    let out = guidecap(&["oracle", "--world", "/nonexistent/world.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_world_is_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_world(a.path(), "4,2", "3");
    gen_world(b.path(), "4,2", "3");
    gen_world(c.path(), "4,2", "4");
    let read = |d: &Path, f: &str| fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "world.json"), read(b.path(), "world.json"));
    assert_eq!(read(a.path(), "corpus.jsonl"), read(b.path(), "corpus.jsonl"));
    assert_ne!(read(a.path(), "corpus.jsonl"), read(c.path(), "corpus.jsonl"));
}

#[test]
fn decode_identities_hold_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    gen_world(dir.path(), "4,2,2", "1");
    let world = format!("tabular:{}", p(&dir.path().join("world.json")));
    let plain = decode(dir.path(), &[]);
    assert!(!plain.is_empty());
    assert_eq!(plain, decode(dir.path(), &["--guidance", "cfg", "--gamma", "1"]));
    assert_eq!(plain, decode(dir.path(), &["--beam-width", "1"]));
    assert_eq!(
        decode(dir.path(), &["--guidance", "cfg", "--gamma", "2.5"]),
        decode(dir.path(), &["--guidance", "lm", "--alpha", "2.5", "--beta", "2.5", "--lm-scorer", &world])
    );
    assert_eq!(
        decode(dir.path(), &["--guidance", "cfg", "--gamma", "2"]),
        decode(dir.path(), &["--guidance", "cfg", "--gamma", "2", "--threads", "3", "--batch-size", "4"])
    );
}

#[test]
fn eval_of_first_reference_is_perfect_on_reference_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let captions = [
        "a brown dog runs across the green field",
        "two cats sleep on a red sofa",
        "a small bird sits on a wooden fence",
    ];
    let (mut corpus, mut predictions) = (String::new(), String::new());
    for (i, c) in captions.iter().enumerate() {
        let id = format!("item{i}");
        corpus += &format!("{}\n", serde_json::json!({"id": id, "conditioning": {"class": i}, "references": [c]}));
        predictions += &format!("{}\n", serde_json::json!({"id": id, "text": c}));
    }
    let single_path = dir.path().join("corpus.jsonl");
    fs::write(&single_path, corpus).unwrap();
    let pred = dir.path().join("pred.jsonl");
    fs::write(&pred, predictions).unwrap();
    let out = guidecap(&[
        "eval",
        "--predictions",
        p(&pred),
        "--corpus",
        p(&single_path),
        "--images",
        "first-reference",
        "--ks",
        "1",
        "--format",
        "json",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["bleu4"], 1.0);
    assert_eq!(report["rouge_l"], 1.0);
    assert!((report["cider"].as_f64().unwrap() - 10.0).abs() < 1e-9, "{report}");
    assert!((report["embed_score"].as_f64().unwrap() - 2.5).abs() < 1e-9);
    assert_eq!(report["recall"]["1"], 1.0);
}

#[test]
fn eval_rejects_predictions_for_unknown_items() {
    let dir = tempfile::tempdir().unwrap();
    gen_world(dir.path(), "2,1", "0");
    let pred = dir.path().join("pred.jsonl");
    fs::write(&pred, "{\"id\":\"nope\",\"text\":\"a dog\"}\n").unwrap();
    let out = guidecap(&["eval", "--predictions", p(&pred), "--corpus", p(&dir.path().join("corpus.jsonl"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn build_prompt_writes_token_ids() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("prompt.json");
    let out = guidecap(&["build-prompt", "--captions", "descriptive", "--n", "3", "--seed", "7", "--out", p(&file)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read_to_string(&file).unwrap();
    let out = guidecap(&["build-prompt", "--captions", "descriptive", "--n", "3", "--seed", "7"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), a);
    let out = guidecap(&["build-prompt", "--captions", "counting", "--n", "27"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_passes_on_generated_worlds_and_fails_on_broken_ones() {
    let dir = tempfile::tempdir().unwrap();
    gen_world(dir.path(), "4,2", "0");
    let world = dir.path().join("world.json");
    let out = guidecap(&["oracle", "--world", p(&world), "--gammas", "1,2,4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 6);

    let mut broken: serde_json::Value = serde_json::from_str(&fs::read_to_string(&world).unwrap()).unwrap();
    broken["sequences"]["0"][0]["p"] = serde_json::json!(0.2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, broken.to_string()).unwrap();
    let out = guidecap(&["oracle", "--world", p(&bad)]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_and_train_ngram_run() {
    let dir = tempfile::tempdir().unwrap();
    gen_world(dir.path(), "4,2", "0");
    let corpus = dir.path().join("corpus.jsonl");
    let world = dir.path().join("world.json");
    let model = dir.path().join("ngram.json");
    let out = guidecap(&["train-ngram", "--corpus", p(&corpus), "--vocab", p(&world), "--out", p(&model)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ngram = format!("ngram:{}", p(&model));
    let tabular = format!("tabular:{}", p(&world));
    let csv = dir.path().join("sweep.csv");
    let out = guidecap(&[
        "sweep",
        "--corpus",
        p(&corpus),
        "--scorer",
        &ngram,
        "--lm-scorer",
        &tabular,
        "--world",
        p(&world),
        "--gammas",
        "1,2",
        "--alphas",
        "1",
        "--out-csv",
        p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    // header, two cfg rows, five lm rows from the default beta fractions
    assert_eq!(text.lines().count(), 1 + 2 + 5, "{text}");
}

#[test]
fn ping_server_reports_unreachable_hosts() {
    let out = guidecap(&["ping-server", "--addr", "127.0.0.1:1", "--timeout-ms", "200"]);
    assert_eq!(code(&out), 2);
}
