//! REST endpoints over the run store.
//!
//! Per-run mutations are serialized by the run's session mutex. Global
//! passes and gating run on worker threads; clients poll the run (or the
//! candidate) for progress.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tabrule_core::dataset::EvidenceAdapter;
use tabrule_core::rule_loop::{build_report, render_markdown, CandidateRecord, CandidateStatus, ClusterView, EvalJob, FinishReason, Phase, RunSession, RunState, Submission};
use tabrule_core::stats::Thresholds;
use tabrule_core::Error;

use crate::engine::Engine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTag {
    RunNotFound,
    CandidateNotFound,
    NotFound,
    WrongPhase,
    JobRunning,
    ClusterNotOffered,
    CandidateInconclusive,
    Duplicate,
    InvalidParameter,
    InvalidRule,
    InvalidDataset,
    BadRequest,
    ModelUnavailable,
    Internal,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub tag: ErrorTag,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, tag: ErrorTag, message: impl Into<String>) -> Self {
        ApiError {
            status,
            tag,
            message: message.into(),
        }
    }

    fn run_not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, ErrorTag::RunNotFound, format!("no run {id}"))
    }

    fn candidate_not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, ErrorTag::CandidateNotFound, format!("no candidate {id}"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorTag::InvalidParameter, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        use StatusCode as S;
        let (status, tag) = match &e {
            Error::NotFound(_) => (S::NOT_FOUND, ErrorTag::NotFound),
            Error::WrongPhase { .. } => (S::CONFLICT, ErrorTag::WrongPhase),
            Error::NotOffered(_) => (S::CONFLICT, ErrorTag::ClusterNotOffered),
            Error::Inconclusive(_) => (S::CONFLICT, ErrorTag::CandidateInconclusive),
            Error::Duplicate(_) => (S::CONFLICT, ErrorTag::Duplicate),
            Error::InvalidParameter(_) => (S::UNPROCESSABLE_ENTITY, ErrorTag::InvalidParameter),
            Error::InvalidRule(_) => (S::UNPROCESSABLE_ENTITY, ErrorTag::InvalidRule),
            Error::MalformedRecord { .. } | Error::BadAnswer { .. } | Error::Json(_) | Error::Empty(_) => {
                (S::UNPROCESSABLE_ENTITY, ErrorTag::InvalidDataset)
            }
            Error::Model(_) => (S::BAD_GATEWAY, ErrorTag::ModelUnavailable),
            _ => (S::INTERNAL_SERVER_ERROR, ErrorTag::Internal),
        };
        ApiError::new(status, tag, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.tag, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose rejections use the closed error set.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T> FromRequest<S> for Body<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, ErrorTag::BadRequest, e.body_text())),
        }
    }
}

/// An optional JSON body: empty means the default value.
fn optional_body<T: Default + serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, ErrorTag::BadRequest, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Evaluation,
    Gating,
}

#[derive(Debug, Clone)]
struct Job {
    kind: JobKind,
    candidate_id: Option<String>,
    done: Arc<AtomicUsize>,
    total: usize,
    error: Option<String>,
}

impl Job {
    fn running(&self) -> bool {
        self.error.is_none()
    }

    fn view(&self, run_id: &str) -> Value {
        json!({
            "kind": self.kind,
            "candidate_id": self.candidate_id.as_ref().map(|c| api_candidate_id(run_id, c)),
            "done": self.done.load(Ordering::Relaxed).min(self.total),
            "total": self.total,
            "status": if self.running() { "running" } else { "failed" },
            "error": self.error,
        })
    }
}

struct RunHandle {
    session: Mutex<RunSession>,
    job: Mutex<Option<Job>>,
    /// Request ids of accepted `eval` calls.
    eval_requests: Mutex<Vec<String>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct AppState {
    engine: Arc<Engine>,
    runs: Mutex<HashMap<String, Arc<RunHandle>>>,
    /// Serializes run creation so request-id lookups do not race.
    creating: Mutex<()>,
}

const CREATE_REQUEST_FILE: &str = "create_request";

impl AppState {
    pub fn new(engine: Engine) -> Arc<AppState> {
        Arc::new(AppState {
            engine: Arc::new(engine),
            runs: Mutex::new(HashMap::new()),
            creating: Mutex::new(()),
        })
    }

    /// The open run, replaying its log on first access.
    fn handle(&self, run_id: &str) -> ApiResult<Arc<RunHandle>> {
        let mut runs = lock(&self.runs);
        if let Some(h) = runs.get(run_id) {
            return Ok(h.clone());
        }
        if !self.engine.store().exists(run_id) {
            return Err(ApiError::run_not_found(run_id));
        }
        let session = self.engine.store().open(run_id)?;
        let h = Arc::new(RunHandle {
            session: Mutex::new(session),
            job: Mutex::new(None),
            eval_requests: Mutex::new(Vec::new()),
        });
        runs.insert(run_id.to_string(), h.clone());
        Ok(h)
    }

    fn start_evaluation(&self, h: &Arc<RunHandle>) -> ApiResult<()> {
        let mut job = lock(&h.job);
        if job.as_ref().is_some_and(Job::running) {
            return Err(ApiError::new(StatusCode::CONFLICT, ErrorTag::JobRunning, "a job is already running for this run"));
        }
        let (eval, corpus, template) = {
            let s = lock(&h.session);
            let eval: EvalJob = s.begin_evaluation()?;
            (eval, s.corpus().clone(), s.state().config.template.clone())
        };
        let done = Arc::new(AtomicUsize::new(0));
        *job = Some(Job {
            kind: JobKind::Evaluation,
            candidate_id: None,
            done: done.clone(),
            total: corpus.len(),
            error: None,
        });
        let engine = self.engine.clone();
        let h = h.clone();
        std::thread::spawn(move || {
            let evaluator = engine.evaluator(&template).with_progress(done);
            let outcome = eval
                .run(&evaluator, &corpus)
                .and_then(|(e, c)| lock(&h.session).complete_evaluation(&eval, e, c));
            finish_job(&h, outcome.err().map(|e| e.to_string()));
        });
        Ok(())
    }

    fn start_gating(&self, h: &Arc<RunHandle>, cluster_id: i32, rule_text: &str, request_id: Option<&str>) -> ApiResult<String> {
        let mut job = lock(&h.job);
        let mut s = lock(&h.session);
        let submission = s.submit_candidate(cluster_id, rule_text, request_id)?;
        let gate = match submission {
            Submission::Existing(id) => return Ok(id),
            Submission::New(gate) => gate,
        };
        let corpus = s.corpus().clone();
        let config = s.state().config.clone();
        drop(s);
        let done = Arc::new(AtomicUsize::new(0));
        *job = Some(Job {
            kind: JobKind::Gating,
            candidate_id: Some(gate.candidate_id.clone()),
            done: done.clone(),
            total: gate.members.len(),
            error: None,
        });
        let id = gate.candidate_id.clone();
        let engine = self.engine.clone();
        let h = h.clone();
        std::thread::spawn(move || {
            let evaluator = engine.evaluator(&config.template).with_progress(done);
            let outcome = gate.run(&evaluator, &corpus, &config);
            let recorded = lock(&h.session).complete_gate(&gate.candidate_id, outcome);
            finish_job(&h, recorded.err().map(|e| e.to_string()));
        });
        Ok(id)
    }
}

fn finish_job(h: &RunHandle, error: Option<String>) {
    let mut job = lock(&h.job);
    match error {
        None => *job = None,
        Some(e) => {
            tracing::error!(error = %e, "background job failed");
            if let Some(j) = job.as_mut() {
                j.error = Some(e);
            }
        }
    }
}

/// Candidate ids in URLs carry their run: `{run_id}-{candidate}`.
fn api_candidate_id(run_id: &str, candidate: &str) -> String {
    format!("{run_id}-{candidate}")
}

fn split_candidate_id(id: &str) -> Option<(&str, &str)> {
    let (run, c) = id.rsplit_once('-')?;
    (c.starts_with('c') && c.len() > 1 && c[1..].bytes().all(|b| b.is_ascii_digit()) && !run.is_empty()).then_some((run, c))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorTag::Internal, e.to_string()))?
}

fn run_view(state: &RunState, job: Option<&Job>) -> Value {
    let offered = if state.phase == Phase::AwaitingRule || state.phase == Phase::Gating {
        state.offered_cluster().map(|c| json!({ "cluster_id": c.label, "size": c.size, "attempt": state.attempt }))
    } else {
        None
    };
    let evaluations: Vec<Value> = state
        .evaluations
        .iter()
        .map(|e| json!({ "iteration": e.iteration, "prompt_version": e.prompt_version, "rule_count": e.rules.len(), "correct": e.correct, "total": e.total, "em": e.em() }))
        .collect();
    json!({
        "run_id": state.run_id,
        "model": state.model,
        "dataset_hash": state.dataset_hash,
        "instance_count": state.instance_count,
        "phase": state.phase,
        "finish_reason": state.finish_reason,
        "iteration": state.iteration,
        "attempt": state.attempt,
        "prompt_version": state.current_version(),
        "rules": state.rules.texts(),
        "thresholds": state.config.thresholds,
        "global_gate": state.config.global_gate,
        "offered_cluster": offered,
        "evaluations": evaluations,
        "candidates": state.candidates.iter().map(|c| candidate_view(state, c)).collect::<Vec<_>>(),
        "job": job.map(|j| j.view(&state.run_id)),
    })
}

fn candidate_view(state: &RunState, c: &CandidateRecord) -> Value {
    let record = state.history.iter().find(|r| r.candidate_id == c.candidate_id);
    let gate = c.gate.as_ref();
    json!({
        "candidate_id": api_candidate_id(&state.run_id, &c.candidate_id),
        "run_id": state.run_id,
        "iteration": c.iteration,
        "attempt": c.attempt,
        "cluster_id": c.cluster_id,
        "cluster_size": c.members.len(),
        "prompt_version": c.prompt_version,
        "base_version": c.base_version,
        "rule_text": c.rule.text,
        "status": c.status,
        "n": gate.map(|g| g.mcnemar.n),
        "b": gate.map(|g| g.mcnemar.b),
        "c": gate.map(|g| g.mcnemar.c),
        "p": gate.map(|g| g.mcnemar.p_exact),
        "p_display": gate.map(|g| g.mcnemar.p_display.clone()),
        "delta_em_local": gate.map(|g| g.delta_local.value()),
        "verdict": record.map(|r| r.verdict).or(gate.map(|g| g.verdict)),
        "global_em": record.and_then(|r| r.global_em),
        "delta_em_global": record.and_then(|r| r.delta_global),
        "rejected_by_global_gate": record.map(|r| r.rejected_by_global_gate).unwrap_or(false),
        "thresholds": state.config.thresholds,
        "inconclusive_reason": c.inconclusive_reason,
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    pub dataset: PathBuf,
    #[serde(default)]
    pub adapter: EvidenceAdapter,
    pub run_id: Option<String>,
    pub request_id: Option<String>,
    pub delta_min: Option<f64>,
    pub p_max: Option<f64>,
    pub delta_inclusive: Option<bool>,
    pub global_gate: Option<bool>,
}

async fn create_run(State(app): State<Arc<AppState>>, Body(req): Body<CreateRun>) -> ApiResult<Response> {
    blocking(move || {
        let _guard = lock(&app.creating);
        let store = app.engine.store();
        if let Some(r) = &req.request_id {
            for id in store.list()? {
                let path = store.run_dir(&id).join(CREATE_REQUEST_FILE);
                if std::fs::read_to_string(&path).is_ok_and(|s| s == *r) {
                    let h = app.handle(&id)?;
                    let view = run_view(lock(&h.session).state(), lock(&h.job).as_ref());
                    return Ok((StatusCode::OK, Json(view)).into_response());
                }
            }
        }
        if !req.dataset.is_file() {
            return Err(ApiError::invalid(format!("dataset {} is not a readable file", req.dataset.display())));
        }
        let mut config = app.engine.defaults().clone();
        let t: &mut Thresholds = &mut config.thresholds;
        if let Some(d) = req.delta_min {
            t.delta_min = d;
        }
        if let Some(p) = req.p_max {
            t.p_max = p;
        }
        if let Some(i) = req.delta_inclusive {
            t.delta_inclusive = i;
        }
        if !(0.0..=1.0).contains(&t.delta_min) || !(0.0..=1.0).contains(&t.p_max) {
            return Err(ApiError::invalid("delta_min and p_max must lie in [0, 1]"));
        }
        if let Some(g) = req.global_gate {
            config.global_gate = g;
        }
        let session = app.engine.create_run(&req.dataset, req.adapter, req.run_id.as_deref(), config)?;
        if let Some(r) = &req.request_id {
            let path = session.dir().join(CREATE_REQUEST_FILE);
            std::fs::write(&path, r).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorTag::Internal, e.to_string()))?;
        }
        let id = session.state().run_id.clone();
        let view = run_view(session.state(), None);
        lock(&app.runs).insert(
            id,
            Arc::new(RunHandle {
                session: Mutex::new(session),
                job: Mutex::new(None),
                eval_requests: Mutex::new(Vec::new()),
            }),
        );
        Ok((StatusCode::CREATED, Json(view)).into_response())
    })
    .await
}

async fn list_runs(State(app): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let store = app.engine.store();
        let mut out = Vec::new();
        for id in store.list()? {
            if let Ok(s) = store.load_state(&id) {
                out.push(json!({ "run_id": id, "phase": s.phase, "iteration": s.iteration, "rules": s.rules.len() }));
            }
        }
        Ok(Json(json!({ "runs": out })))
    })
    .await
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let h = app.handle(&id)?;
        let job = lock(&h.job).clone();
        let view = run_view(lock(&h.session).state(), job.as_ref());
        Ok(Json(view))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestId {
    pub request_id: Option<String>,
}

async fn post_eval(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    blocking(move || {
        let request_id = optional_body::<RequestId>(&body)?.request_id;
        let h = app.handle(&id)?;
        let repeat = request_id.as_ref().is_some_and(|r| lock(&h.eval_requests).contains(r));
        if !repeat {
            app.start_evaluation(&h)?;
            if let Some(r) = request_id {
                lock(&h.eval_requests).push(r);
            }
        }
        let job = lock(&h.job).clone();
        let view = run_view(lock(&h.session).state(), job.as_ref());
        Ok((StatusCode::ACCEPTED, Json(view)).into_response())
    })
    .await
}

fn parse_num<T: std::str::FromStr>(what: &str, s: &str) -> ApiResult<T> {
    s.parse().map_err(|_| ApiError::invalid(format!("{what} must be an integer, got `{s}`")))
}

async fn iteration_clusters(State(app): State<Arc<AppState>>, Path((id, k)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let k: u32 = parse_num("iteration", &k)?;
        let h = app.handle(&id)?;
        let s = lock(&h.session);
        let st = s.state();
        let c = st
            .clusterings
            .get(&k)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, ErrorTag::NotFound, format!("iteration {k} has no clustering")))?;
        let current = k == st.iteration && matches!(st.phase, Phase::AwaitingRule | Phase::Gating);
        let clusters: Vec<Value> = c
            .ranked
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let attempt = i as u32 + 1;
                json!({
                    "rank": attempt,
                    "cluster_id": r.label,
                    "size": r.size,
                    "offered": current && attempt == st.attempt,
                })
            })
            .collect();
        let noise = c.labels.iter().filter(|&&l| l < 0).count();
        Ok(Json(json!({
            "iteration": k,
            "error_count": c.errors.len(),
            "min_cluster_size": c.min_cluster_size,
            "min_samples": c.min_samples,
            "noise_count": noise,
            "grid": c.grid,
            "clusters": clusters,
        })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct IterationQuery {
    pub iteration: Option<u32>,
}

/// Feature values every member shares.
fn shared_features(view: &ClusterView) -> BTreeMap<&'static str, Value> {
    let mut out = BTreeMap::new();
    let rows: Vec<_> = view.members.iter().map(|m| &m.row).collect();
    let Some(first) = rows.first() else { return out };
    if rows.iter().all(|r| r.calc_pattern == first.calc_pattern) {
        out.insert("calc_pattern", json!(first.calc_pattern));
    }
    if rows.iter().all(|r| r.code_calc_pattern == first.code_calc_pattern) {
        out.insert("code_calc_pattern", json!(first.code_calc_pattern));
    }
    if rows.iter().all(|r| r.error_type == first.error_type) {
        out.insert("error_type", json!(first.error_type));
    }
    if rows.iter().all(|r| r.scale == first.scale) {
        out.insert("scale", json!(first.scale));
    }
    if rows.iter().all(|r| r.pred_scale == first.pred_scale) {
        out.insert("pred_scale", json!(first.pred_scale));
    }
    out
}

async fn cluster_members(
    State(app): State<Arc<AppState>>,
    Path((id, cid)): Path<(String, String)>,
    Query(q): Query<IterationQuery>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let cid: i32 = parse_num("cluster id", &cid)?;
        let h = app.handle(&id)?;
        let s = lock(&h.session);
        let k = q.iteration.unwrap_or(s.state().iteration);
        let ranked = s.state().clusterings.get(&k).map(|c| c.ranked.clone()).unwrap_or_default();
        let attempt = ranked.iter().position(|r| r.label == cid).map_or(0, |i| i as u32 + 1);
        let view = s.cluster_view(k, cid, attempt)?;
        let shared = shared_features(&view);
        let mut v = serde_json::to_value(&view).map_err(Error::from)?;
        v["shared"] = json!(shared);
        Ok(Json(v))
    })
    .await
}

async fn heatmap(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<IterationQuery>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let h = app.handle(&id)?;
        let s = lock(&h.session);
        let k = q.iteration.unwrap_or(s.state().iteration);
        let c = s
            .state()
            .clusterings
            .get(&k)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, ErrorTag::NotFound, format!("iteration {k} has no clustering")))?;
        let version = s.state().evaluation_for(k).map(|e| e.prompt_version.clone());
        Ok(Json(json!({
            "iteration": k,
            "prompt_version": version,
            "total": c.errors.len(),
            "row_labels": c.crosstab.row_labels,
            "col_labels": c.crosstab.col_labels,
            "counts": c.crosstab.counts,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitCandidate {
    pub cluster_id: i32,
    pub rule_text: String,
    pub request_id: Option<String>,
}

async fn submit_candidate(State(app): State<Arc<AppState>>, Path(id): Path<String>, Body(req): Body<SubmitCandidate>) -> ApiResult<Response> {
    blocking(move || {
        let h = app.handle(&id)?;
        let cid = app.start_gating(&h, req.cluster_id, &req.rule_text, req.request_id.as_deref())?;
        let s = lock(&h.session);
        let c = s.state().candidate(&cid).expect("submitted candidate is recorded");
        Ok((StatusCode::ACCEPTED, Json(candidate_view(s.state(), c))).into_response())
    })
    .await
}

fn candidate_handle(app: &AppState, api_id: &str) -> ApiResult<(Arc<RunHandle>, String)> {
    let (run, c) = split_candidate_id(api_id).ok_or_else(|| ApiError::candidate_not_found(api_id))?;
    let h = match app.handle(run) {
        Ok(h) => h,
        Err(e) if e.tag == ErrorTag::RunNotFound => return Err(ApiError::candidate_not_found(api_id)),
        Err(e) => return Err(e),
    };
    if lock(&h.session).state().candidate(c).is_none() {
        return Err(ApiError::candidate_not_found(api_id));
    }
    Ok((h, c.to_string()))
}

async fn get_candidate(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (h, c) = candidate_handle(&app, &id)?;
        let job = lock(&h.job).clone();
        let s = lock(&h.session);
        let mut v = candidate_view(s.state(), s.state().candidate(&c).expect("checked"));
        if let Some(j) = job.filter(|j| j.candidate_id.as_deref() == Some(c.as_str())) {
            v["job"] = j.view(&s.state().run_id);
        }
        Ok(Json(v))
    })
    .await
}

async fn adopt_candidate(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let request_id = optional_body::<RequestId>(&body)?.request_id;
        let (h, c) = candidate_handle(&app, &id)?;
        let phase = {
            let mut s = lock(&h.session);
            if s.state().candidate(&c).is_some_and(|r| r.status == CandidateStatus::Pending) {
                return Err(ApiError::new(StatusCode::CONFLICT, ErrorTag::WrongPhase, format!("candidate {id} is still gating")));
            }
            s.commit_candidate(&c, request_id.as_deref())?;
            s.state().phase
        };
        let idle = !lock(&h.job).as_ref().is_some_and(Job::running);
        if phase == Phase::Evaluating && idle {
            app.start_evaluation(&h)?;
        }
        let job = lock(&h.job).clone();
        let s = lock(&h.session);
        Ok(Json(json!({
            "candidate": candidate_view(s.state(), s.state().candidate(&c).expect("checked")),
            "run": run_view(s.state(), job.as_ref()),
        })))
    })
    .await
}

async fn stop_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let h = app.handle(&id)?;
        if lock(&h.job).as_ref().is_some_and(Job::running) {
            return Err(ApiError::new(StatusCode::CONFLICT, ErrorTag::JobRunning, "wait for the running job to finish"));
        }
        let mut s = lock(&h.session);
        if s.state().phase != Phase::Finished || s.state().finish_reason != Some(FinishReason::Stopped) {
            s.stop()?;
        }
        Ok(Json(run_view(s.state(), None)))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct ReportQuery {
    pub format: Option<String>,
}

async fn report(State(app): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    blocking(move || {
        let h = app.handle(&id)?;
        let report = build_report(lock(&h.session).state());
        match q.format.as_deref() {
            None | Some("json") => Ok(Json(report).into_response()),
            Some("markdown") => Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], render_markdown(&report)).into_response()),
            Some(other) => Err(ApiError::invalid(format!("unknown report format `{other}`"))),
        }
    })
    .await
}

async fn no_route() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, ErrorTag::NotFound, "no such endpoint")
}

async fn bad_method() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, ErrorTag::BadRequest, "method not allowed")
}

pub fn router(app: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let mut r = Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/eval", post(post_eval))
        .route("/runs/{id}/stop", post(stop_run))
        .route("/runs/{id}/iterations/{k}/clusters", get(iteration_clusters))
        .route("/runs/{id}/clusters/{cid}/members", get(cluster_members))
        .route("/runs/{id}/heatmap", get(heatmap))
        .route("/runs/{id}/candidates", post(submit_candidate))
        .route("/runs/{id}/report", get(report))
        .route("/candidates/{id}", get(get_candidate))
        .route("/candidates/{id}/adopt", post(adopt_candidate))
        .fallback(no_route)
        .method_not_allowed_fallback(bad_method);
    if let Some(dir) = ui_dir {
        r = r.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    r.with_state(app)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_ids_round_trip() {
        assert_eq!(api_candidate_id("run-0001", "c3"), "run-0001-c3");
        assert_eq!(split_candidate_id("run-0001-c3"), Some(("run-0001", "c3")));
        assert_eq!(split_candidate_id("run-0001"), None);
        assert_eq!(split_candidate_id("x-c"), None);
        assert_eq!(split_candidate_id("-c1"), None);
    }
}
