use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use annotation_service::{router, AnnotationStore, AnnotationTask, AppState, ServiceConfig, TaskPool};
use selftalk::annotation::{quality_bin, Annotation, CharacterJudgment, Helpfulness, SubgoalMark};
use selftalk::pipeline::{read_jsonl, run_loop, write_jsonl, RunConfig};
use selftalk::simulation::{Dialogue, Speaker};
use selftalk::stats::cohens_kappa;
use selftalk::workflow::WorkflowSet;

const CONDITIONS: [&str; 5] = ["none", "random", "abs-subgoals", "frac-subgoals", "has-ended"];

fn dialogues(n: usize, seed: u64) -> Vec<Dialogue> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::scripted(seed, n, dir.path());
    cfg.agent_endpoint = "scripted:mixed:0.7".into();
    let m = run_loop(&cfg).unwrap();
    read_jsonl(&m.artifacts.dialogues).unwrap()
}

struct Harness {
    app: Router,
    dialogues: Vec<Dialogue>,
    _dir: tempfile::TempDir,
}

fn harness(per_condition: usize, annotators: &[&str]) -> Harness {
    let all = dialogues(per_condition * CONDITIONS.len(), 17);
    let conditions = CONDITIONS
        .iter()
        .zip(all.chunks(per_condition))
        .map(|(c, ds)| (c.to_string(), ds.to_vec()))
        .collect();
    let pool = TaskPool::new(conditions, &WorkflowSet::builtin(), per_condition, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (store, existing) = AnnotationStore::open(&dir.path().join("annotations.jsonl")).unwrap();
    let state = AppState::new(pool, annotators.iter().map(|s| s.to_string()).collect(), store, existing);
    Harness {
        app: router(Arc::new(state), None),
        dialogues: all,
        _dir: dir,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn tasks_for(app: &Router, who: &str) -> Vec<AnnotationTask> {
    let (status, v) = call(app, "GET", &format!("/api/tasks?annotator={who}"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

fn annotation(d: &Dialogue, who: &str, quality: i64, character: f64) -> Annotation {
    Annotation {
        dialogue_id: d.id.clone(),
        annotator_id: who.into(),
        per_utterance_character: d
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker == Speaker::Agent)
            .map(|(index, _)| CharacterJudgment { index, value: character })
            .collect(),
        subgoal_marks: vec![SubgoalMark { index: 0, mark: "1".into() }],
        success: 1.0,
        quality,
        ended: 1,
        helpfulness: Helpfulness::Up,
        timestamp: None,
    }
}

async fn submit(app: &Router, a: &Annotation) -> (StatusCode, Value) {
    call(app, "POST", "/api/annotations", Some(serde_json::to_value(a).unwrap())).await
}

#[tokio::test]
async fn quota_per_condition_for_each_annotator() {
    let h = harness(20, &["ann-a", "ann-b"]);
    for who in ["ann-a", "ann-b"] {
        let t = tasks_for(&h.app, who).await;
        assert_eq!(t.len(), 100);
        let mut per: BTreeMap<String, usize> = BTreeMap::new();
        for task in &t {
            *per.entry(task.condition.clone()).or_default() += 1;
        }
        assert!(per.values().all(|&n| n == 20));
    }
}

#[tokio::test]
async fn task_view_matches_stored_dialogue() {
    let h = harness(2, &["ann-a"]);
    let t = &tasks_for(&h.app, "ann-a").await[0];
    let d = h.dialogues.iter().find(|d| d.id == t.dialogue_id).unwrap();
    assert_eq!(t.transcript.len(), d.utterances.len());
    for (line, u) in t.transcript.iter().zip(&d.utterances) {
        assert_eq!(line.text, u.clean);
    }
    assert!(t.workflow[0].starts_with("1. "));
    let (status, v) = call(&h.app, "GET", &format!("/api/dialogues/{}", d.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<Dialogue>(v).unwrap(), *d);
    let (status, _) = call(&h.app, "GET", "/api/dialogues/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_annotator_is_404() {
    let h = harness(2, &["ann-a"]);
    let (status, _) = call(&h.app, "GET", "/api/tasks?annotator=mallory", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = submit(&h.app, &annotation(&h.dialogues[0], "mallory", 3, 1.0)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn submitted_task_disappears() {
    let h = harness(4, &["ann-a", "ann-b"]);
    let d = &h.dialogues[0];
    let (status, v) = submit(&h.app, &annotation(d, "ann-a", 4, 1.0)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["id"], format!("{}:ann-a", d.id));
    let left = tasks_for(&h.app, "ann-a").await;
    assert_eq!(left.len(), 19);
    assert!(left.iter().all(|t| t.dialogue_id != d.id));
    let other = tasks_for(&h.app, "ann-b").await;
    let t = other.iter().find(|t| t.dialogue_id == d.id).unwrap();
    assert_eq!((t.assignment.annotations, t.assignment.target), (1, 2));
}

#[tokio::test]
async fn invalid_annotations_are_400() {
    let h = harness(1, &["ann-a"]);
    let d = &h.dialogues[0];
    let (status, v) = submit(&h.app, &annotation(d, "ann-a", 6, 1.0)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["details"][0].as_str().unwrap().contains("quality"));
    let mut bad = annotation(d, "ann-a", 3, 1.0);
    bad.per_utterance_character.push(CharacterJudgment { index: d.utterances.len(), value: 1.0 });
    assert_eq!(submit(&h.app, &bad).await.0, StatusCode::BAD_REQUEST);
    let (status, _) = call(&h.app, "POST", "/api/annotations", Some(json!({"dialogue_id": d.id}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(tasks_for(&h.app, "ann-a").await.len(), 5);
}

#[tokio::test]
async fn resubmission_replaces() {
    let h = harness(1, &["ann-a", "ann-b"]);
    let d = &h.dialogues[0];
    assert_eq!(submit(&h.app, &annotation(d, "ann-a", 2, 1.0)).await.1["replaced"], false);
    assert_eq!(submit(&h.app, &annotation(d, "ann-b", 5, 1.0)).await.0, StatusCode::OK);
    let (_, before) = call(&h.app, "GET", "/api/agreement", None).await;
    assert_eq!(before["per_dimension"]["quality"], 0.0);
    assert_eq!(submit(&h.app, &annotation(d, "ann-a", 5, 1.0)).await.1["replaced"], true);
    let (_, after) = call(&h.app, "GET", "/api/agreement", None).await;
    assert_eq!(after["doubly_annotated"], 1);
    assert_eq!(after["per_dimension"]["quality"], 1.0);
}

#[tokio::test]
async fn double_target_and_completion() {
    let h = harness(2, &["ann-a", "ann-b", "ann-c"]);
    for d in &h.dialogues {
        assert_eq!(submit(&h.app, &annotation(d, "ann-a", 4, 1.0)).await.0, StatusCode::OK);
    }
    assert!(tasks_for(&h.app, "ann-a").await.is_empty());
    let d = &h.dialogues[3];
    submit(&h.app, &annotation(d, "ann-b", 4, 1.0)).await;
    let c = tasks_for(&h.app, "ann-c").await;
    assert_eq!(c.len(), 9);
    assert!(c.iter().all(|t| t.dialogue_id != d.id));
    let (status, p) = call(&h.app, "GET", "/api/progress?annotator=ann-b", None).await;
    assert_eq!(status, StatusCode::OK);
    let done: usize = p["completed"].as_object().unwrap().values().map(|v| v.as_u64().unwrap() as usize).sum();
    assert_eq!(done, 1);
}

#[tokio::test]
async fn agreement_needs_two_annotators() {
    let h = harness(1, &["ann-a", "ann-b"]);
    let (status, _) = call(&h.app, "GET", "/api/agreement", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    for d in &h.dialogues {
        submit(&h.app, &annotation(d, "ann-a", 3, 1.0)).await;
    }
    let (status, _) = call(&h.app, "GET", "/api/agreement", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn perfect_agreement_is_one_everywhere() {
    let h = harness(1, &["ann-a", "ann-b"]);
    for (i, d) in h.dialogues.iter().enumerate() {
        let q = 1 + (i as i64 % 5);
        let c = if i % 2 == 0 { 1.0 } else { 0.5 };
        submit(&h.app, &annotation(d, "ann-a", q, c)).await;
        submit(&h.app, &annotation(d, "ann-b", q, c)).await;
    }
    let (status, v) = call(&h.app, "GET", "/api/agreement", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["overall"], 1.0);
    let dims = v["per_dimension"].as_object().unwrap();
    assert_eq!(dims.len(), 6);
    assert!(dims.values().all(|k| k.as_f64() == Some(1.0)), "{v}");
}

#[tokio::test]
async fn planted_disagreement_matches_kappa() {
    let h = harness(2, &["ann-a", "ann-b"]);
    let qa = [1, 2, 3, 4, 5, 5, 4, 3, 2, 1];
    let qb = [2, 2, 4, 4, 5, 3, 4, 3, 1, 5];
    for (i, d) in h.dialogues.iter().enumerate() {
        submit(&h.app, &annotation(d, "ann-a", qa[i], 1.0)).await;
        submit(&h.app, &annotation(d, "ann-b", qb[i], 1.0)).await;
    }
    let mut ids: Vec<(&str, usize)> = h.dialogues.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    ids.sort();
    let a: Vec<&str> = ids.iter().map(|(_, i)| quality_bin(qa[*i])).collect();
    let b: Vec<&str> = ids.iter().map(|(_, i)| quality_bin(qb[*i])).collect();
    let want = cohens_kappa(&a, &b).unwrap();
    let (_, v) = call(&h.app, "GET", "/api/agreement", None).await;
    let got = v["per_dimension"]["quality"].as_f64().unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!(got < 1.0);
}

#[tokio::test]
async fn independent_labels_near_zero() {
    let h = harness(100, &["ann-a", "ann-b"]);
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for d in &h.dialogues {
        for who in ["ann-a", "ann-b"] {
            let mut a = annotation(d, who, rng.gen_range(1..=5), 1.0);
            a.success = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            a.ended = rng.gen_range(0..=1);
            a.helpfulness = [Helpfulness::Up, Helpfulness::Down, Helpfulness::Unsure][rng.gen_range(0..3)];
            for j in &mut a.per_utterance_character {
                j.value = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            }
            assert_eq!(submit(&h.app, &a).await.0, StatusCode::OK);
        }
    }
    let (_, v) = call(&h.app, "GET", "/api/agreement", None).await;
    assert_eq!(v["doubly_annotated"], 500);
    for dim in ["quality", "success", "ended", "helpfulness", "character"] {
        let k = v["per_dimension"][dim].as_f64().unwrap();
        assert!(k.abs() < 0.2, "{dim}: {k}");
    }
}

#[tokio::test]
async fn annotations_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dialogues(6, 4);
    let kept = dir.path().join("kept.jsonl");
    write_jsonl(&kept, &ds).unwrap();
    std::fs::create_dir(dir.path().join("ui")).unwrap();
    std::fs::write(dir.path().join("ui/index.html"), "<html>ui</html>").unwrap();
    let cfg_path = dir.path().join("service.toml");
    std::fs::write(
        &cfg_path,
        r#"
annotators = ["ann-a", "ann-b"]
quota_per_condition = 3
store = "annotations.jsonl"
static_dir = "ui"

[[conditions]]
name = "none"
dialogues = "kept.jsonl"
"#,
    )
    .unwrap();
    let cfg = ServiceConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.double_target, 2);
    let app = router(Arc::new(AppState::from_config(&cfg).unwrap()), cfg.static_dir.as_deref());
    submit(&app, &annotation(&ds[0], "ann-a", 4, 1.0)).await;
    submit(&app, &annotation(&ds[1], "ann-a", 2, 0.0)).await;
    assert_eq!(tasks_for(&app, "ann-a").await.len(), 1);
    drop(app);

    let app = router(Arc::new(AppState::from_config(&cfg).unwrap()), cfg.static_dir.as_deref());
    assert_eq!(tasks_for(&app, "ann-a").await.len(), 1);
    let stored: Vec<Annotation> = read_jsonl(&dir.path().join("annotations.jsonl")).unwrap();
    assert_eq!(stored.len(), 2);
    assert!(stored.iter().all(|a| a.timestamp.is_some()));

    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>ui</html>".into()));
    let (status, _) = call(&app, "GET", "/../service.toml", None).await;
    assert_ne!(status, StatusCode::OK);
}
