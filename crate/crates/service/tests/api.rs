use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use themewise_core::corpus::{generate_synthetic, SyntheticSpec};
use themewise_core::{BackendConfig, BackendKind, Gateway, InContextTemplate, Label, Model, ModelConfig};
use themewise_service::store::PredictionPayload;
use themewise_service::{checkpoint_id, router, AppState, ServiceConfig};
use tower::ServiceExt;

const D: usize = 16;

fn model(seed: u64) -> (Model, String) {
    let m = Model::init(ModelConfig::new(D), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let id = checkpoint_id(&m.to_checkpoint(seed, json!({})));
    (m, id)
}

fn state(dir: &std::path::Path, model: Option<(Model, String)>) -> AppState {
    let cfg = ServiceConfig {
        data_dir: dir.to_path_buf(),
        ..ServiceConfig::default()
    };
    AppState::new(
        cfg,
        Gateway::new(BackendConfig::mock(0, D)).unwrap(),
        InContextTemplate::builtin().clone(),
        model,
    )
    .unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

fn marker_session() -> Value {
    let spec = SyntheticSpec {
        num_sessions: 10,
        ..SyntheticSpec::default()
    };
    let t = generate_synthetic(&spec)
        .unwrap()
        .into_iter()
        .find(|t| t.label == Some(Label::Depressed))
        .unwrap();
    t.to_json_value()
}

fn two_turn(id: &str) -> Value {
    json!({
        "session_id": id,
        "label": null,
        "turns": [
            {"speaker": "interviewer", "text": "How have you been sleeping?"},
            {"speaker": "participant", "text": "Not well, I wake up tired every day."}
        ]
    })
}

fn scores(v: [f64; 5]) -> Value {
    json!({"scores": {"family": v[0], "work": v[1], "mental": v[2], "medical": v[3], "overall": v[4]}})
}

#[tokio::test]
async fn session_crud_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), None));
    let (s, v) = call(&app, "POST", "/sessions", Some(two_turn("s1"))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["session_id"], "s1");
    let (s, v) = call(&app, "GET", "/sessions/s1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["transcript"]["turns"].as_array().unwrap().len(), 2);
    let (s, _) = call(&app, "POST", "/sessions", Some(two_turn("s1"))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"session_id": "s2"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");
    assert!(v["detail"].as_str().unwrap().contains("turns"), "{v}");
    let (s, v) = call(&app, "POST", "/sessions", Some(two_turn("../etc"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["detail"].as_str().unwrap().contains("session_id"));
    let (s, v) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
    let (s, _) = call(&app, "POST", "/sessions/nope/pipeline", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);
    let (s, v) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["checkpoint"], Value::Null);
}

#[tokio::test]
async fn pipeline_needs_checkpoint_and_whatif_needs_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), None));
    call(&app, "POST", "/sessions", Some(two_turn("s1"))).await;
    let (s, v) = call(&app, "POST", "/sessions/s1/pipeline", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "checkpoint_missing");

    let app = router(state(dir.path(), Some(model(1))));
    let (s, v) = call(&app, "POST", "/sessions/s1/whatif", Some(scores([5.0; 5]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "pipeline_required");
    let (s, _) = call(&app, "GET", "/sessions/s1/figures", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn pipeline_and_whatif_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (m, ck) = model(2);
    let uniform_model = {
        let mut c = m.config.clone();
        c.ablation.disable_itas = true;
        let mut u = m.clone();
        u.config = c;
        u
    };
    let app = router(state(dir.path(), Some((m, ck.clone()))));
    let body = marker_session();
    let id = body["session_id"].as_str().unwrap().to_string();
    call(&app, "POST", "/sessions", Some(body)).await;

    let (s, first) = call(&app, "POST", &format!("/sessions/{id}/pipeline"), None).await;
    assert_eq!(s, StatusCode::OK, "{first}");
    let first: PredictionPayload = serde_json::from_value(first).unwrap();
    assert!(first.figures.is_some());
    assert_eq!(first.delta, None);
    assert!(first.themes.values().iter().all(|t| !t.text.is_empty()));
    let (_, sess) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let digest = sess["features_digest"].clone();
    assert!(digest.is_string());

    let (_, second) = call(&app, "POST", &format!("/sessions/{id}/pipeline"), None).await;
    let second: PredictionPayload = serde_json::from_value(second).unwrap();
    assert_eq!(second.probability.to_bits(), first.probability.to_bits());
    assert_eq!(second.delta, Some(0.0));

    // equal scores reduce to uniform weights
    let (s, eq) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([3.3; 5]))).await;
    assert_eq!(s, StatusCode::OK);
    let eq: PredictionPayload = serde_json::from_value(eq).unwrap();
    let snap = router_snapshot_features(dir.path(), &id);
    let uniform = uniform_model.predict(&snap).unwrap();
    assert_eq!(eq.probability.to_bits(), uniform.probability.to_bits());
    assert!(eq.figures.is_none());

    let (_, a) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([5.0, 5.0, 9.0, 5.0, 5.0]))).await;
    let (_, b) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([5.0, 5.0, 9.0, 5.0, 5.0]))).await;
    let a: PredictionPayload = serde_json::from_value(a).unwrap();
    let b: PredictionPayload = serde_json::from_value(b).unwrap();
    assert!(a.alpha.0[2] > eq.alpha.0[2]);
    assert_eq!(a.probability.to_bits(), b.probability.to_bits());
    assert_eq!(b.delta, Some(0.0));
    assert_eq!(b.log_seq, a.log_seq + 1);

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([5.0, 5.0, 10.5, 5.0, 5.0]))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["detail"].as_str().unwrap().contains("mental"));
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(json!({"scores": {"family": 1}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["detail"].as_str().unwrap().contains("work"));

    let (_, log) = call(&app, "GET", &format!("/sessions/{id}/feedback-log"), None).await;
    let log = log.as_array().unwrap();
    assert_eq!(log.len(), 5);
    assert_eq!(log[0]["actor"], "llm");
    assert_eq!(log[4]["actor"], "clinician");
    let ts: Vec<&str> = log.iter().map(|e| e["timestamp"].as_str().unwrap()).collect();
    let parsed: Vec<chrono::DateTime<chrono::Utc>> = ts.iter().map(|t| t.parse().unwrap()).collect();
    assert!(parsed.windows(2).all(|w| w[0] < w[1]));

    let (_, sess) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(sess["features_digest"], digest);

    let (s, fig) = call(&app, "GET", &format!("/sessions/{id}/figures"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(fig["attention"]["theme_affinity"].as_array().unwrap().len(), 5);
}

fn router_snapshot_features(dir: &std::path::Path, id: &str) -> themewise_core::SessionFeatures {
    let raw = std::fs::read(dir.join("sessions").join(id).join("features.json")).unwrap();
    serde_json::from_slice(&raw).unwrap()
}

#[tokio::test]
async fn restart_replays_and_detects_stale_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let body = marker_session();
    let id = body["session_id"].as_str().unwrap().to_string();
    {
        let app = router(state(dir.path(), Some(model(3))));
        call(&app, "POST", "/sessions", Some(body)).await;
        call(&app, "POST", &format!("/sessions/{id}/pipeline"), None).await;
        for k in 0..4 {
            call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([k as f64, 2.5, 7.1, 0.0, 10.0]))).await;
        }
    }
    let st = state(dir.path(), Some(model(3)));
    let replay = st.replay(&id).unwrap();
    assert_eq!(replay.len(), 5);
    for (recorded, replayed) in replay {
        assert_eq!(recorded.to_bits(), replayed.to_bits());
    }
    let app = router(st);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([1.0; 5]))).await;
    assert_eq!(s, StatusCode::OK);

    let app = router(state(dir.path(), Some(model(4))));
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([1.0; 5]))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "stale_session");
    // rerunning the pipeline reuses cached features under the new checkpoint
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/pipeline"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/whatif"), Some(scores([1.0; 5]))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn outage_is_503_with_retry_after() {
    std::env::set_var("THEMEWISE_TEST_OUTAGE_KEY", "k");
    let dir = tempfile::tempdir().unwrap();
    let gw = Gateway::new(BackendConfig {
        kind: BackendKind::Remote,
        endpoint_url: Some("http://127.0.0.1:9".into()),
        api_key_env: Some("THEMEWISE_TEST_OUTAGE_KEY".into()),
        chat_model: Some("m".into()),
        embedding_model: Some("e".into()),
        embedding_dim: D,
        mock_seed: None,
        max_attempts: 1,
        backoff_ms: 0,
        timeout_secs: 2,
        ..BackendConfig::default()
    })
    .unwrap();
    let cfg = ServiceConfig {
        data_dir: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    };
    let app = router(AppState::new(cfg, gw, InContextTemplate::builtin().clone(), Some(model(1))).unwrap());
    call(&app, "POST", "/sessions", Some(two_turn("s1"))).await;
    let req = Request::post("/sessions/s1/pipeline").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(resp.headers().get(header::RETRY_AFTER).is_some());
    // nothing was cached by the failed run
    let (_, v) = call(&app, "GET", "/sessions/s1", None).await;
    assert_eq!(v["features_digest"], Value::Null);
}

#[tokio::test]
async fn cors_allows_configured_origin() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), None));
    let req = Request::get("/healthz")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
    let req = Request::get("/healthz")
        .header(header::ORIGIN, "http://elsewhere.example")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}
