//! HTTP service that hands out generated dialogues for human judgment and
//! collects the resulting annotations.
//!
//! Routes:
//! - `GET /api/tasks?annotator=ID`
//! - `POST /api/annotations`
//! - `GET /api/agreement`
//! - `GET /api/dialogues/{id}`
//! - everything else is served from the configured static directory.

mod assets;
mod store;
mod tasks;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use selftalk::annotation::{agreement, Annotation, AnnotationError};
use selftalk::pipeline::read_jsonl;
use selftalk::simulation::Dialogue;

pub use store::AnnotationStore;
pub use tasks::{AnnotationTask, Assignment, TaskPool, TranscriptLine};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("io error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("{0}:{1}: {2}")]
    Corrupt(PathBuf, usize, String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] selftalk::pipeline::PipelineError),
}

/// One study condition: a named set of dialogues, usually a filter's kept set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSource {
    pub name: String,
    pub dialogues: PathBuf,
}

fn default_double_target() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub annotators: Vec<String>,
    pub quota_per_condition: usize,
    /// Annotations wanted per dialogue.
    #[serde(default = "default_double_target")]
    pub double_target: usize,
    pub conditions: Vec<ConditionSource>,
    pub store: PathBuf,
    #[serde(default)]
    pub workflows_dir: Option<PathBuf>,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    /// Parse a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let src = std::fs::read_to_string(path).map_err(|e| ServiceError::Io(path.to_path_buf(), e))?;
        let mut cfg: ServiceConfig =
            toml::from_str(&src).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.store);
        cfg.conditions.iter_mut().for_each(|c| fix(&mut c.dialogues));
        cfg.workflows_dir.as_mut().map(fix);
        cfg.static_dir.as_mut().map(fix);
        Ok(cfg)
    }
}

/// Immutable view shared by readers; replaced wholesale on every write.
#[derive(Debug, Default)]
pub struct Snapshot {
    pub annotations: BTreeMap<String, Annotation>,
}

impl Snapshot {
    pub fn all(&self) -> Vec<Annotation> {
        self.annotations.values().cloned().collect()
    }

    pub fn count_for(&self, dialogue_id: &str) -> usize {
        self.annotations.values().filter(|a| a.dialogue_id == dialogue_id).count()
    }

    pub fn has(&self, dialogue_id: &str, annotator: &str) -> bool {
        self.annotations.contains_key(&format!("{dialogue_id}:{annotator}"))
    }
}

pub struct AppState {
    pool: TaskPool,
    annotators: Vec<String>,
    snapshot: RwLock<Arc<Snapshot>>,
    writer: tokio::sync::Mutex<AnnotationStore>,
}

impl AppState {
    pub fn new(
        pool: TaskPool,
        annotators: Vec<String>,
        store: AnnotationStore,
        existing: BTreeMap<String, Annotation>,
    ) -> Self {
        AppState {
            pool,
            annotators,
            snapshot: RwLock::new(Arc::new(Snapshot { annotations: existing })),
            writer: tokio::sync::Mutex::new(store),
        }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        if cfg.annotators.is_empty() {
            return Err(ServiceError::Config("no annotators configured".into()));
        }
        let workflows = selftalk::pipeline::load_workflows(cfg.workflows_dir.as_deref())?;
        let mut conditions = Vec::new();
        for c in &cfg.conditions {
            let dialogues: Vec<Dialogue> = read_jsonl(&c.dialogues)?;
            conditions.push((c.name.clone(), dialogues));
        }
        let pool = TaskPool::new(conditions, &workflows, cfg.quota_per_condition, cfg.double_target)?;
        let (store, existing) = AnnotationStore::open(&cfg.store)?;
        Ok(AppState::new(pool, cfg.annotators.clone(), store, existing))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().expect("snapshot lock"))
    }

    fn publish(&self, next: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    details: Vec<String>,
}

struct ApiError(StatusCode, String, Vec<String>);

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into(), Vec::new())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.1,
            details: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    annotator: String,
}

async fn tasks(State(st): State<Arc<AppState>>, Query(q): Query<TaskQuery>) -> Result<Json<Vec<AnnotationTask>>, ApiError> {
    if !st.annotators.contains(&q.annotator) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown annotator `{}`", q.annotator)));
    }
    Ok(Json(st.pool.open_tasks(&q.annotator, &st.snapshot())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stored {
    pub id: String,
    pub replaced: bool,
}

async fn submit(
    State(st): State<Arc<AppState>>,
    body: Result<Json<Annotation>, JsonRejection>,
) -> Result<Json<Stored>, ApiError> {
    let Json(mut a) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    if !st.annotators.contains(&a.annotator_id) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown annotator `{}`", a.annotator_id)));
    }
    let Some(d) = st.pool.dialogue(&a.dialogue_id) else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown dialogue `{}`", a.dialogue_id)));
    };
    if let Err(AnnotationError::Invalid(problems)) = a.validate(d.utterances.len()) {
        return Err(ApiError(StatusCode::BAD_REQUEST, "invalid annotation".into(), problems));
    }
    a.timestamp.get_or_insert_with(chrono::Utc::now);

    let mut writer = st.writer.lock().await;
    writer
        .append(&a)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mut next = st.snapshot().annotations.clone();
    let id = a.key();
    let replaced = next.insert(id.clone(), a).is_some();
    st.publish(Snapshot { annotations: next });
    drop(writer);
    Ok(Json(Stored { id, replaced }))
}

async fn agreement_report(State(st): State<Arc<AppState>>) -> Result<Response, ApiError> {
    match agreement(&st.snapshot().all()) {
        Ok(r) => Ok(Json(r).into_response()),
        Err(AnnotationError::NoDoubleAnnotations) => {
            Err(ApiError::new(StatusCode::CONFLICT, "no dialogue has two annotations yet"))
        }
        Err(e) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
    }
}

async fn dialogue(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Dialogue>, ApiError> {
    st.pool
        .dialogue(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown dialogue `{id}`")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Progress {
    pub annotator: String,
    pub completed: BTreeMap<String, usize>,
    pub remaining: BTreeMap<String, usize>,
}

async fn progress(State(st): State<Arc<AppState>>, Query(q): Query<TaskQuery>) -> Result<Json<Progress>, ApiError> {
    if !st.annotators.contains(&q.annotator) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown annotator `{}`", q.annotator)));
    }
    let snap = st.snapshot();
    let mut completed: BTreeMap<String, usize> = BTreeMap::new();
    for (cond, id) in st.pool.study() {
        if snap.has(id, &q.annotator) {
            *completed.entry(cond.to_string()).or_default() += 1;
        }
    }
    let mut remaining: HashMap<String, usize> = HashMap::new();
    for t in st.pool.open_tasks(&q.annotator, &snap) {
        *remaining.entry(t.condition).or_default() += 1;
    }
    Ok(Json(Progress {
        annotator: q.annotator,
        completed,
        remaining: remaining.into_iter().collect(),
    }))
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/tasks", get(tasks))
        .route("/api/progress", get(progress))
        .route("/api/annotations", post(submit))
        .route("/api/agreement", get(agreement_report))
        .route("/api/dialogues/{id}", get(dialogue))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback(assets::handler(dir.to_path_buf())),
        None => api,
    }
}

pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let app = router(state, cfg.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(addr.to_string()), e))?;
    log::info!("annotation service listening on {addr}");
    axum::serve(listener, app)
        .await
        .map_err(|e| ServiceError::Io(PathBuf::from(addr.to_string()), e))
}
