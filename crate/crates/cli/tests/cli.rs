use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const WORDS: &[&str] = &["river", "lantern", "captain", "orchard", "letter", "tower", "winter", "garden", "harbor", "violin"];

fn mia(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mia")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mia(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(dir: &Path, args: &[&str]) -> Value {
    serde_json::from_str(&ok(dir, args)).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let text: Vec<&str> = (0..600).map(|i| WORDS[(i * 7 + i / 13) % WORDS.len()]).collect();
    let line = serde_json::json!({"doc_id": "book", "text": text.join(" ")});
    std::fs::write(dir.path().join("corpus.jsonl"), format!("{line}\n")).unwrap();
    ok(dir.path(), &["index", "build", "--corpus", "corpus.jsonl", "--out", "idx", "--window", "4", "--chunk-words", "20"]);
    dir
}

#[test]
fn index_inspect_reports_layout() {
    let dir = setup();
    let v = json(dir.path(), &["index", "inspect", "idx"]);
    let text = v.to_string();
    assert!(text.contains("\"book\""));
    assert!(text.contains("offline-hash"));
}

#[test]
fn signature_init_emits_values() {
    let dir = setup();
    let v = json(dir.path(), &["signature", "init", "--index", "idx", "--query", "the lantern tower", "--k", "3"]);
    let selected = v["selected"].as_array().unwrap();
    assert!(!selected.is_empty() && selected.len() <= 3);
    assert_eq!(v["values"]["gain_trace"].as_array().unwrap().len(), selected.len());
    assert!(v["values"]["fq"].is_number() && v["values"]["fc"].is_number());
    assert!(!v["rendered_text"].as_str().unwrap().is_empty());

    let first_k = json(dir.path(), &["signature", "init", "--index", "idx", "--query", "the lantern tower", "--mode", "first-k"]);
    assert!(first_k["selected"].as_array().unwrap().len() <= 5);

    let bad = mia(dir.path(), &["signature", "init", "--index", "idx", "--query", "x", "--weights", "0.5,0.5,0.5"]);
    assert!(!bad.status.success());
}

#[test]
fn retrieve_with_and_without_signature() {
    let dir = setup();
    let plain = json(dir.path(), &["retrieve", "--index", "idx", "--query", "captain at the harbor", "--k", "5"]);
    let entries = plain["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 5);
    let scores: Vec<f64> = entries.iter().map(|e| e["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    std::fs::write(dir.path().join("sig.txt"), "winter in the orchard").unwrap();
    let ids = |v: &Value| -> Vec<u64> { v["entries"].as_array().unwrap().iter().map(|e| e["chunk_id"].as_u64().unwrap()).collect() };
    let at_zero = json(
        dir.path(),
        &["retrieve", "--index", "idx", "--query", "captain at the harbor", "--signature", "sig.txt", "--alpha", "0", "--k", "5"],
    );
    assert_eq!(ids(&at_zero), ids(&plain));
    let sig_only = json(
        dir.path(),
        &["retrieve", "--index", "idx", "--query", "captain at the harbor", "--signature", "sig.txt", "--alpha", "1", "--k", "5"],
    );
    let direct = json(dir.path(), &["retrieve", "--index", "idx", "--query", "winter in the orchard", "--k", "5"]);
    assert_eq!(ids(&sig_only), ids(&direct));
}

#[test]
fn agent_run_writes_trace() {
    let dir = setup();
    let answer = "<evidence_memory>\n- seen\n</evidence_memory>\n<confidence>HIGH</confidence>\n<thought>ok</thought>\n<action>ANSWER</action>";
    let config = format!(
        "updater:\n  kind: scripted\n  responses: [{}]\ngenerator:\n  kind: scripted\n  responses: [\"the captain\"]\n",
        serde_json::to_string(answer).unwrap()
    );
    std::fs::write(dir.path().join("providers.yaml"), config).unwrap();
    let out = ok(
        dir.path(),
        &["agent", "run", "--index", "idx", "--question", "who held the lantern", "--config", "providers.yaml", "--trace", "trace.json"],
    );
    assert!(out.contains("the captain"));
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["update_calls"], 1);
    assert_eq!(trace["steps"].as_array().unwrap().len(), 1);
}

#[test]
fn unknown_document_is_an_error() {
    let dir = setup();
    let out = mia(dir.path(), &["retrieve", "--index", "idx", "--doc", "nope", "--query", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
