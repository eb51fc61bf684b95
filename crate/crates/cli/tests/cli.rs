use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn selftalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selftalk"))
        .args(args)
        .env_remove("SELFTALK_AGENT_ENDPOINT")
        .env_remove("SELFTALK_SCORER_ENDPOINT")
        .env_remove("SELFTALK_TRAINER_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = selftalk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn staged_commands_match_loop() {
    let dir = tempfile::tempdir().unwrap();
    let whole = dir.path().join("loop");
    let staged = dir.path().join("staged");
    let common = ["--seed", "5", "--n", "30", "--agent-endpoint", "scripted:mixed:0.4"];

    let mut args = vec!["loop"];
    args.extend(common);
    args.extend(["--scorer-endpoint", "scripted:0.8", "--filter", "frac-subgoals:0.5", "--out", p(&whole)]);
    let summary = ok(&args);
    assert_eq!(summary["counts"]["generated"], 30);
    assert_eq!(summary["counts"]["kept"], 15);

    let mut args = vec!["generate"];
    args.extend(common);
    args.extend(["--out", p(&staged)]);
    ok(&args);
    let dialogues = staged.join("dialogues.jsonl");
    ok(&["score", "--dialogues", p(&dialogues), "--scorer-endpoint", "scripted:0.8"]);
    ok(&[
        "filter",
        "--scores",
        p(&staged.join("scores.jsonl")),
        "--filter",
        "frac-subgoals:0.5",
        "--seed",
        "5",
        "--dialogues",
        p(&dialogues),
        "--out",
        p(&staged),
    ]);
    let exported = ok(&["export", "--dialogues", p(&staged.join("kept.jsonl")), "--out", p(&staged.join("finetune.jsonl"))]);
    assert!(exported["records"].as_u64().unwrap() > 0);

    for f in ["dialogues.jsonl", "scores.jsonl", "kept.jsonl", "finetune.jsonl"] {
        let a = std::fs::read(whole.join(f)).unwrap();
        let b = std::fs::read(staged.join(f)).unwrap();
        assert!(a == b, "{f} differs between loop and staged runs");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(staged.join("filter_report.json")).unwrap()).unwrap();
    assert_eq!(report["kept"], 15);
}

#[test]
fn loop_writes_a_manifest_that_stats_can_read() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifests = Vec::new();
    for (i, rate) in ["0.0", "0.2", "0.4", "0.6"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let agent = format!("scripted:mixed:{rate}");
        ok(&["loop", "--seed", &i.to_string(), "--n", "12", "--agent-endpoint", &agent, "--out", p(&out)]);
        let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["counts"]["generated"], 12);
        assert_eq!(lines(&out.join("dialogues.jsonl")).len(), 12);
        manifests.push(out.join("manifest.json"));
    }
    let mut args = vec!["stats", "--outcome", "0.1,0.4,0.2,0.9", "--set", "generated", "--lambda", "0.01"];
    for m in &manifests {
        args.extend(["--manifest", p(m)]);
    }
    let fit = ok(&args);
    assert_eq!(fit["features"].as_array().unwrap().len(), 10);
    assert_eq!(fit["spearman"].as_array().unwrap().len(), 10);

    let out = selftalk(&["stats", "--manifest", p(&manifests[0]), "--outcome", "1,2"]);
    assert!(!out.status.success());
}

#[test]
fn calibrate_from_corpus_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    let conv = json!({
        "steps": ["ask the customer for their name", "offer a discount on the sword"],
        "utterances": [
            "good morning traveller",
            "may I ask for your name please",
            "we have many blades for sale",
            "I can offer you a discount on this sword",
        ],
    });
    std::fs::write(&corpus, format!("{conv}\n")).unwrap();
    let r = ok(&["calibrate", "--corpus", p(&corpus), "--sweep"]);
    assert_eq!(r["pairs"], 6);
    assert_eq!(r["precision"], 1.0);
    assert!(r["sweep"].as_array().unwrap().len() > 1);

    let pairs = dir.path().join("pairs.jsonl");
    let body: String = [(0.9, true), (0.7, true), (0.5, false), (0.2, false)]
        .iter()
        .map(|(s, y)| format!("{}\n", json!({"score": s, "positive": y})))
        .collect();
    std::fs::write(&pairs, body).unwrap();
    let r = ok(&["calibrate", "--pairs", p(&pairs)]);
    assert_eq!(r["precision"], 1.0);
    assert_eq!(r["recall"], 1.0);
    let tau = r["tau"].as_f64().unwrap();
    assert!(tau > 0.5 && tau <= 0.7, "tau {tau}");

    assert!(!selftalk(&["calibrate"]).status.success());
}

#[test]
fn meta_eval_with_agreeing_humans() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&["loop", "--seed", "9", "--n", "20", "--agent-endpoint", "scripted:mixed:0.5", "--scorer-endpoint", "scripted:0.8", "--out", p(&out)]);
    let dialogues = lines(&out.join("dialogues.jsonl"));
    let scores = lines(&out.join("scores.jsonl"));
    let mut body = String::new();
    for (d, s) in dialogues.iter().zip(&scores) {
        assert_eq!(d["id"], s["dialogue_id"]);
        let n = d["utterances"].as_array().unwrap().len();
        let depth = s["abs_depth"].as_u64().unwrap() as usize;
        for annotator in ["a", "b"] {
            let a = json!({
                "dialogue_id": d["id"],
                "annotator_id": annotator,
                "per_utterance_character": (0..n).step_by(2).map(|i| json!({"index": i, "value": 1.0})).collect::<Vec<_>>(),
                "subgoal_marks": (0..depth).map(|k| json!({"index": 2 * k, "mark": (k + 1).to_string()})).collect::<Vec<_>>(),
                "success": if s["success"].as_bool().unwrap() { 1.0 } else { 0.0 },
                "quality": 4,
                "ended": if s["ended"].as_bool().unwrap() { 1 } else { 0 },
                "helpfulness": "up",
            });
            body.push_str(&format!("{a}\n"));
        }
    }
    let anns = dir.path().join("annotations.jsonl");
    std::fs::write(&anns, body).unwrap();
    let r = ok(&["meta-eval", "--annotations", p(&anns), "--scores", p(&out.join("scores.jsonl"))]);
    assert_eq!(r["report"]["joined"], 20);
    assert!((r["report"]["kendall_abs_depth"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((r["report"]["pearson_rel_depth"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r["report"]["consistency"]["accuracy"], 1.0);
    assert_eq!(r["reference"]["annotator_kappa"], 0.52);
}

#[test]
fn unreachable_endpoint_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let r = selftalk(&["loop", "--n", "2", "--agent-endpoint", "http://127.0.0.1:9/v1", "--timeout", "2", "--out", p(&out)]);
    assert!(!r.status.success());
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
    assert!(!out.exists());
}

#[test]
fn bad_filter_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let r = selftalk(&["loop", "--n", "2", "--filter", "sometimes", "--out", p(&dir.path().join("x"))]);
    assert!(!r.status.success());
}
