use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selftalk::annotation::{Annotation, CharacterJudgment, Helpfulness, SubgoalMark};
use selftalk::evaluation::{track_subgoals, DialogueScore, DEFAULT_TAU};
use selftalk::filters::FilterSpec;
use selftalk::pipeline::{
    meta_evaluate, read_jsonl, run_loop, Artifacts, FinetuneRecord, RunConfig, RunManifest,
};
use selftalk::simulation::Dialogue;
use selftalk::stats::kendall_tau_b;
use selftalk::workflow::WorkflowSet;

/// Answers every POST with `body` and keeps the request bodies.
fn json_stub(body: &'static str) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut first = String::new();
            if reader.read_line(&mut first).unwrap_or(0) == 0 {
                continue;
            }
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/train"), seen)
}

fn line_count(path: &std::path::Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn trainer_receives_export_and_reply_is_stored() {
    let (url, seen) = json_stub(r#"{"job":"queued","id":7}"#);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::scripted(8, 30, dir.path());
    cfg.agent_endpoint = "scripted:mixed:0.5".into();
    cfg.filter = FilterSpec::AbsSubgoals { k: 2 };
    cfg.trainer_endpoint = Some(url);
    let m = run_loop(&cfg).unwrap();
    let t = m.trainer.as_ref().unwrap();
    assert_eq!(t.response.as_ref().unwrap()["job"], "queued");
    let sent: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(sent["run_id"], "run-8");
    assert_eq!(sent["records"].as_array().unwrap().len(), m.counts.kept);
}

#[test]
fn stores_agree_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::scripted(21, 40, dir.path());
    cfg.agent_endpoint = "scripted:mixed:0.4".into();
    cfg.scorer_endpoint = Some("scripted:0.9".into());
    cfg.filter = FilterSpec::HasEnded;
    let m = run_loop(&cfg).unwrap();
    let on_disk = RunManifest::load(&dir.path().join(Artifacts::MANIFEST)).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(line_count(&m.artifacts.dialogues), m.counts.generated);
    assert_eq!(line_count(&m.artifacts.scores), m.counts.scored);
    assert_eq!(line_count(&m.artifacts.kept), m.counts.kept);
    assert_eq!(line_count(&m.artifacts.finetune), m.counts.kept);

    let dialogues: Vec<Dialogue> = read_jsonl(&m.artifacts.dialogues).unwrap();
    let scores: Vec<DialogueScore> = read_jsonl(&m.artifacts.scores).unwrap();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for d in &dialogues {
        *seen.entry(d.id.as_str()).or_default() += 1;
    }
    for s in &scores {
        assert_eq!(seen.get(s.dialogue_id.as_str()), Some(&1), "{}", s.dialogue_id);
        assert!((s.consistency.unwrap() - 0.9).abs() < 1e-12);
    }
    let kept: Vec<Dialogue> = read_jsonl(&m.artifacts.kept).unwrap();
    assert!(kept.iter().all(|d| scores.iter().any(|s| s.dialogue_id == d.id && s.ended)));
    let ft: Vec<FinetuneRecord> = read_jsonl(&m.artifacts.finetune).unwrap();
    for (r, d) in ft.iter().zip(&kept) {
        assert_eq!(r.dialogue_id, d.id);
        assert_eq!(r.reconstruct_transcript(), d.transcript());
    }
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_loop(&RunConfig::scripted(1, 10, a.path())).unwrap();
    run_loop(&RunConfig::scripted(2, 10, b.path())).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(Artifacts::DIALOGUES)).unwrap();
    assert_ne!(read(&a), read(&b));
}

fn drop_words(line: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
    line.split_whitespace()
        .filter(|_| rng.gen::<f64>() >= rate)
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn kendall_agreement_degrades_with_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::scripted(5, 150, dir.path());
    cfg.agent_endpoint = "scripted:mixed:0.6".into();
    let m = run_loop(&cfg).unwrap();
    let dialogues: Vec<Dialogue> = read_jsonl(&m.artifacts.dialogues).unwrap();
    let wf = WorkflowSet::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tau_at = |rate: f64| {
        let (mut clean, mut noisy) = (vec![], vec![]);
        for d in &dialogues {
            let g = wf.get(&d.scenario.workflow_id).unwrap();
            let lines: Vec<&str> = d.agent_utterances().map(|u| u.clean.as_str()).collect();
            clean.push(track_subgoals(&lines, g, DEFAULT_TAU).abs_depth as f64);
            let dropped: Vec<String> = lines.iter().map(|l| drop_words(l, rate, &mut rng)).collect();
            noisy.push(track_subgoals(&dropped, g, DEFAULT_TAU).abs_depth as f64);
        }
        kendall_tau_b(&clean, &noisy).unwrap()
    };
    let (low, high) = (tau_at(0.0), tau_at(0.8));
    assert!((low - 1.0).abs() < 1e-12);
    assert!(high < low, "{high} vs {low}");
}

fn human_copy(d: &Dialogue, s: &DialogueScore, annotator: &str) -> Annotation {
    Annotation {
        dialogue_id: d.id.clone(),
        annotator_id: annotator.into(),
        per_utterance_character: d
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker == selftalk::simulation::Speaker::Agent)
            .map(|(i, _)| CharacterJudgment { index: i, value: 1.0 })
            .collect(),
        subgoal_marks: (0..s.abs_depth)
            .map(|k| SubgoalMark { index: 2 * k, mark: (k + 1).to_string() })
            .collect(),
        success: if s.success { 1.0 } else { 0.0 },
        quality: 4,
        ended: i64::from(s.ended),
        helpfulness: Helpfulness::Up,
        timestamp: None,
    }
}

#[test]
fn meta_evaluation_against_matching_humans() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::scripted(13, 50, dir.path());
    cfg.agent_endpoint = "scripted:mixed:0.5".into();
    cfg.scorer_endpoint = Some("scripted:0.8".into());
    let m = run_loop(&cfg).unwrap();
    let dialogues: Vec<Dialogue> = read_jsonl(&m.artifacts.dialogues).unwrap();
    let scores: Vec<DialogueScore> = read_jsonl(&m.artifacts.scores).unwrap();
    let mut anns = Vec::new();
    for (d, s) in dialogues.iter().zip(&scores) {
        anns.push(human_copy(d, s, "ann-a"));
        anns.push(human_copy(d, s, "ann-b"));
    }
    let r = meta_evaluate(&anns, &scores, &WorkflowSet::builtin()).unwrap();
    assert_eq!(r.joined, 50);
    assert!((r.kendall_abs_depth.unwrap() - 1.0).abs() < 1e-12);
    assert!((r.pearson_rel_depth.unwrap() - 1.0).abs() < 1e-12);
    let c = r.consistency.unwrap();
    assert_eq!((c.accuracy, c.f1), (1.0, 1.0));
    let k = r.agreement.unwrap();
    assert_eq!(k.doubly_annotated, 50);
    assert!(k.per_dimension.values().all(|v| (*v - 1.0).abs() < 1e-12));
}
