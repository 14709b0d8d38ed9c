//! HTTP front end for the screening pipeline: session upload, pipeline runs,
//! what-if reweighting against cached features, and an append-only
//! feedback log per session.

mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use themewise_core::eval::export_figures;
use themewise_core::itas::{SCORE_MAX, SCORE_MIN};
use themewise_core::model::{ModelError, PooledThemes};
use themewise_core::pipeline::{run_session, OutagePolicy, PipelineError};
use themewise_core::ticl::TiclError;
use themewise_core::{
    Checkpoint, Gateway, InContextTemplate, Model, PerTheme, Prediction, SessionFeatures, ThemeId, Transcript,
};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use error::{ApiError, RETRY_AFTER_SECS};
use store::{
    check_session_id, features_digest, pooled_digest, Actor, FeedbackLogEntry, PredictionPayload, Snapshot,
    Store, StoreError, ThemeView,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Trained checkpoint; without one the pipeline endpoints answer 409.
    pub checkpoint: Option<PathBuf>,
    /// Allowed browser origins; `"*"` allows any.
    pub cors_origins: Vec<String>,
    /// Re-asks after an unparseable LLM reply.
    pub retries: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("service-data"),
            checkpoint: None,
            cors_origins: vec!["http://localhost:5173".into()],
            retries: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Content hash identifying a checkpoint in payloads and log entries.
pub fn checkpoint_id(ck: &Checkpoint) -> String {
    hex::encode(Sha256::digest(ck.to_json().as_bytes()))
}

struct Inner {
    config: ServiceConfig,
    gateway: Gateway,
    template: InContextTemplate,
    model: Option<(Arc<Model>, String)>,
    store: Store,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// `model` pairs the loaded model with its checkpoint id.
    pub fn new(
        config: ServiceConfig,
        gateway: Gateway,
        template: InContextTemplate,
        model: Option<(Model, String)>,
    ) -> Result<AppState, ServiceError> {
        if let Some((m, _)) = &model {
            if m.config.d != gateway.embedding_dim() {
                return Err(ServiceError::Config(format!(
                    "checkpoint expects dimension {} but the gateway embeds at {}",
                    m.config.d,
                    gateway.embedding_dim()
                )));
            }
        }
        let store = Store::open(&config.data_dir)?;
        let model = model.map(|(m, id)| (Arc::new(m), id));
        // Restore pooled caches for sessions computed under this checkpoint.
        if let Some((m, id)) = &model {
            for snap in store.list() {
                if snap.pipeline_checkpoint.as_deref() != Some(id.as_str()) {
                    continue;
                }
                if let Some(f) = &snap.features {
                    let pooled = m
                        .pooled(f)
                        .map_err(|e| ServiceError::Checkpoint(format!("session {}: {e}", snap.session_id)))?;
                    let mut s = (*snap).clone();
                    s.pooled = Some(Arc::new(pooled));
                    store.get(&snap.session_id).expect("listed").publish(s);
                }
            }
        }
        Ok(AppState(Arc::new(Inner {
            config,
            gateway,
            template,
            model,
            store,
        })))
    }

    /// Loads the checkpoint named in the config, if any.
    pub fn from_config(
        config: ServiceConfig,
        gateway: Gateway,
        template: InContextTemplate,
    ) -> Result<AppState, ServiceError> {
        let model = match &config.checkpoint {
            Some(path) => {
                let ck = Checkpoint::load(path)
                    .map_err(|e| ServiceError::Checkpoint(format!("{}: {e}", path.display())))?;
                let m = Model::from_checkpoint(&ck).map_err(|e| ServiceError::Checkpoint(e.to_string()))?;
                Some((m, checkpoint_id(&ck)))
            }
            None => None,
        };
        AppState::new(config, gateway, template, model)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn snapshot(&self, id: &str) -> Option<Arc<Snapshot>> {
        self.0.store.get(id).map(|s| s.snapshot())
    }

    fn model(&self) -> Result<(Arc<Model>, String), ApiError> {
        self.0.model.clone().ok_or_else(|| {
            ApiError::conflict("checkpoint_missing", "no checkpoint is configured (service.checkpoint)")
        })
    }
}

/// Recomputes ŷ for every log entry made under the current checkpoint.
/// Returns (recorded, replayed) pairs in log order.
pub fn replay_log(
    model: &Model,
    checkpoint: &str,
    pooled: &PooledThemes,
    entries: &[FeedbackLogEntry],
) -> Result<Vec<(f64, f64)>, ModelError> {
    entries
        .iter()
        .filter(|e| e.checkpoint == checkpoint)
        .map(|e| {
            let w = model.weights(&e.scores)?;
            Ok((e.probability, model.predict_pooled(pooled, &w)?.probability))
        })
        .collect()
}

impl AppState {
    /// Replays the session's log against the loaded checkpoint.
    pub fn replay(&self, id: &str) -> Result<Vec<(f64, f64)>, ApiError> {
        let (model, ck) = self.model()?;
        let snap = self.snapshot(id).ok_or_else(|| ApiError::not_found(id))?;
        let pooled = fresh_pooled(&snap, &ck)?;
        replay_log(&model, &ck, &pooled, &snap.log).map_err(|e| ApiError::internal(e.to_string()))
    }
}

pub fn router(state: AppState) -> Router {
    let cors = cors_layer(&state.0.config.cors_origins);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/pipeline", post(run_pipeline))
        .route("/sessions/{id}/whatif", post(whatif))
        .route("/sessions/{id}/figures", get(figures))
        .route("/sessions/{id}/feedback-log", get(feedback_log))
        .layer(cors)
        .with_state(state)
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let base = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    if origins.iter().any(|o| o == "*") {
        return base.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                tracing::warn!(origin = %o, "ignoring invalid CORS origin");
                None
            }
        })
        .collect();
    base.allow_origin(AllowOrigin::list(list))
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState) -> Result<(), ServiceError> {
    let addr: SocketAddr = state
        .0
        .config
        .bind
        .parse()
        .map_err(|e| ServiceError::Config(format!("bind `{}`: {e}", state.0.config.bind)))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

fn json_body(body: Result<Json<Value>, JsonRejection>) -> Result<Value, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn store_err(e: StoreError) -> ApiError {
    ApiError::internal(e.to_string())
}

async fn healthz(State(st): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "backend": st.0.gateway.backend_id(),
        "checkpoint": st.0.model.as_ref().map(|(_, id)| id),
        "sessions": st.0.store.list().len(),
    }))
}

async fn create_session(
    State(st): State<AppState>,
    body: Result<Json<Value>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let body = json_body(body)?;
    let transcript = Transcript::from_json_value(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    check_session_id(&transcript.session_id).map_err(ApiError::bad_request)?;
    let id = transcript.session_id.clone();
    match st.0.store.create(transcript).map_err(store_err)? {
        Some(s) => Ok((
            StatusCode::CREATED,
            Json(json!({ "session_id": s.session_id, "created_at": s.created_at })),
        )),
        None => Err(ApiError::conflict("duplicate_session", format!("session `{id}` already exists"))),
    }
}

fn summary(s: &Snapshot) -> Value {
    json!({
        "session_id": s.session_id,
        "created_at": s.created_at,
        "turns": s.transcript.turns.len(),
        "has_features": s.features.is_some(),
        "last_probability": s.last.as_ref().map(|p| p.probability),
        "feedback_entries": s.log.len(),
    })
}

async fn list_sessions(State(st): State<AppState>) -> Json<Value> {
    Json(Value::Array(st.0.store.list().iter().map(|s| summary(s)).collect()))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = st.snapshot(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(json!({
        "session_id": s.session_id,
        "created_at": s.created_at,
        "transcript": s.transcript.to_json_value(),
        "themes": s.record.as_ref().map(|r| &r.themes),
        "feedback": s.record.as_ref().map(|r| &r.feedback),
        "features_digest": s.features_digest,
        "pooled_digest": s.pooled.as_deref().map(pooled_digest),
        "pipeline_checkpoint": s.pipeline_checkpoint,
        "prediction": s.last,
        "feedback_entries": s.log.len(),
    })))
}

async fn figures(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = st.snapshot(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let f = s
        .figures
        .as_ref()
        .ok_or_else(|| ApiError::conflict("pipeline_required", format!("run the pipeline for `{id}` first")))?;
    Ok(Json(serde_json::to_value(f.as_ref()).expect("figures serialize")))
}

async fn feedback_log(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = st.snapshot(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(Json(serde_json::to_value(s.log.as_ref()).expect("log serializes")))
}

fn pipeline_error(e: PipelineError) -> ApiError {
    if e.is_unavailable() {
        return ApiError::unavailable(e.to_string());
    }
    match e {
        PipelineError::Ticl(TiclError::TooLong { .. }) => ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "transcript_too_long",
            detail: e.to_string(),
        },
        PipelineError::Gateway(_) | PipelineError::Ticl(TiclError::Gateway(_)) => ApiError {
            status: StatusCode::BAD_GATEWAY,
            code: "backend_error",
            detail: e.to_string(),
        },
        other => ApiError::internal(other.to_string()),
    }
}

fn model_err(e: impl std::fmt::Display) -> ApiError {
    ApiError::internal(e.to_string())
}

#[allow(clippy::too_many_arguments)]
fn payload(
    snap: &Snapshot,
    actor: Actor,
    scores: &PerTheme<f64>,
    pred: &Prediction,
    checkpoint: &str,
    log_seq: u64,
    warnings: Vec<String>,
    figures: Option<themewise_core::eval::FigureBundle>,
) -> PredictionPayload {
    let record = snap.record.as_ref();
    PredictionPayload {
        session_id: snap.session_id.clone(),
        actor,
        probability: pred.probability,
        label: pred.label,
        threshold: pred.threshold,
        themes: PerTheme::from_fn(|t| ThemeView {
            text: record.map(|r| r.themes.text(t).to_string()).unwrap_or_default(),
            score: *scores.get(t),
            rationale: record
                .map(|r| r.feedback.rationales.get(t).clone())
                .unwrap_or_default(),
        }),
        scores: scores.clone(),
        alpha: pred.weights.alpha.clone(),
        w: pred.weights.w.clone(),
        contribution_norms: pred.contribution_norms.clone(),
        delta: snap.last.as_ref().map(|p| pred.probability - p.probability),
        checkpoint: checkpoint.to_string(),
        log_seq,
        warnings,
        figures,
    }
}

fn log_entry(snap: &Snapshot, actor: Actor, scores: &PerTheme<f64>, pred: &Prediction, ck: &str) -> FeedbackLogEntry {
    FeedbackLogEntry {
        seq: snap.log.len() as u64,
        session_id: snap.session_id.clone(),
        actor,
        scores: scores.clone(),
        alpha: pred.weights.alpha.clone(),
        probability: pred.probability,
        label: pred.label,
        checkpoint: ck.to_string(),
        timestamp: snap.next_timestamp(),
    }
}

/// Pooled vectors valid for the current checkpoint, or 409.
fn fresh_pooled(snap: &Snapshot, ck: &str) -> Result<Arc<PooledThemes>, ApiError> {
    match (&snap.pooled, &snap.pipeline_checkpoint) {
        (Some(p), Some(c)) if c == ck => Ok(p.clone()),
        (_, Some(_)) => Err(ApiError::conflict(
            "stale_session",
            format!(
                "session `{}` was scored with a different checkpoint; rerun the pipeline",
                snap.session_id
            ),
        )),
        _ => Err(ApiError::conflict(
            "pipeline_required",
            format!("run the pipeline for `{}` first", snap.session_id),
        )),
    }
}

async fn run_pipeline(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<PredictionPayload>, ApiError> {
    let slot = st.0.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let (model, ck) = st.model()?;
    let _guard = slot.write.lock().await;
    let snap = slot.snapshot();
    let st2 = st.clone();
    let (next, out) = tokio::task::spawn_blocking(move || pipeline_blocking(&st2, &model, &ck, &snap))
        .await
        .map_err(model_err)??;
    st.0.store.save_pipeline(&next).map_err(store_err)?;
    st.0.store
        .append_log(next.log.last().expect("entry just appended"))
        .map_err(store_err)?;
    slot.publish(next);
    Ok(Json(out))
}

/// Extract, embed and score; cached features skip the backend entirely.
fn pipeline_blocking(
    st: &AppState,
    model: &Model,
    ck: &str,
    snap: &Snapshot,
) -> Result<(Snapshot, PredictionPayload), ApiError> {
    let mut next = snap.clone();
    let mut warnings = Vec::new();
    let features: Arc<SessionFeatures> = match (&snap.features, &snap.record) {
        (Some(f), Some(_)) => f.clone(),
        _ => {
            let r = run_session(
                &st.0.gateway,
                &st.0.template,
                model,
                &snap.transcript,
                None,
                st.0.config.retries,
                OutagePolicy::Fail,
            )
            .map_err(pipeline_error)?;
            warnings = r.record.warnings.clone();
            next.record = Some(r.record);
            let f = Arc::new(r.features.expect("run_session returns features"));
            next.features_digest = Some(features_digest(&f));
            next.features = Some(f.clone());
            f
        }
    };
    let pooled = model.pooled(&features).map_err(model_err)?;
    let weights = model.weights(&features.feedback.scores).map_err(model_err)?;
    let pred = model.predict_pooled(&pooled, &weights).map_err(model_err)?;
    let figures = export_figures(model, &features).map_err(model_err)?;
    let scores = features.feedback.scores.clone();
    let entry = log_entry(&next, Actor::Llm, &scores, &pred, ck);
    let out = payload(
        &next,
        Actor::Llm,
        &scores,
        &pred,
        ck,
        entry.seq,
        warnings,
        Some(figures.clone()),
    );
    next.pooled = Some(Arc::new(pooled));
    next.figures = Some(Arc::new(figures));
    next.pipeline_checkpoint = Some(ck.to_string());
    let mut stored = out.clone();
    stored.figures = None;
    next.last = Some(stored);
    Arc::make_mut(&mut next.log).push(entry);
    Ok((next, out))
}

/// Reads `{"scores": {theme: number, ...}}` with every theme present and in range.
pub fn parse_whatif_scores(body: &Value) -> Result<PerTheme<f64>, ApiError> {
    let obj = body
        .get("scores")
        .ok_or_else(|| ApiError::bad_request("scores: missing"))?
        .as_object()
        .ok_or_else(|| ApiError::bad_request("scores: expected an object keyed by theme"))?;
    for k in obj.keys() {
        k.parse::<ThemeId>()
            .map_err(|e| ApiError::bad_request(format!("scores.{k}: {e}")))?;
    }
    let mut out = PerTheme::from_fn(|_| 0.0);
    for t in ThemeId::ALL {
        let v = obj
            .iter()
            .find(|(k, _)| k.parse::<ThemeId>().ok() == Some(t))
            .map(|(_, v)| v)
            .ok_or_else(|| ApiError::bad_request(format!("scores.{t}: missing")))?;
        let x = v
            .as_f64()
            .ok_or_else(|| ApiError::bad_request(format!("scores.{t}: must be a number")))?;
        if !(SCORE_MIN..=SCORE_MAX).contains(&x) {
            return Err(ApiError::bad_request(format!(
                "scores.{t}: {x} is outside [{SCORE_MIN}, {SCORE_MAX}]"
            )));
        }
        *out.get_mut(t) = x;
    }
    Ok(out)
}

async fn whatif(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Value>, JsonRejection>,
) -> Result<Json<PredictionPayload>, ApiError> {
    let slot = st.0.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let scores = parse_whatif_scores(&json_body(body)?)?;
    let (model, ck) = st.model()?;
    let _guard = slot.write.lock().await;
    let snap = slot.snapshot();
    let pooled = fresh_pooled(&snap, &ck)?;
    let weights = model.weights(&scores).map_err(model_err)?;
    let pred = model.predict_pooled(&pooled, &weights).map_err(model_err)?;
    let entry = log_entry(&snap, Actor::Clinician, &scores, &pred, &ck);
    let out = payload(&snap, Actor::Clinician, &scores, &pred, &ck, entry.seq, Vec::new(), None);
    let mut next = (*snap).clone();
    next.last = Some(out.clone());
    Arc::make_mut(&mut next.log).push(entry);
    st.0.store
        .append_log(next.log.last().expect("entry just appended"))
        .map_err(store_err)?;
    st.0.store.save_prediction(&next).map_err(store_err)?;
    slot.publish(next);
    Ok(Json(out))
}
