use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use cnp_core::diffusion::NoiseSchedule;
use cnp_core::model::{ChannelNorm, Mdt, ModelConfig};
use cnp_core::session::Session;
use cnp_core::stroke::StrokeSequence;
use cnp_server::{router, AppState, Event};
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_state(data_dir: Option<std::path::PathBuf>) -> Arc<AppState> {
    let mut c = ModelConfig::custom(1, 16, 2, 2);
    c.freq_dim = 16;
    let model = Mdt::init(c, ChannelNorm::identity(), 3).unwrap();
    Arc::new(AppState::new(model, NoiseSchedule::default(), vec!["blob".into(), "worm".into()], data_dir))
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn stroke(x: f32, y: f32, size: f32) -> Value {
    json!({ "stroke": [x, y, size, size, 0.0, 0.8, 0.3, 0.2] })
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_session() {
    let dir = tempfile::tempdir().unwrap();
    let app = tiny_state(Some(dir.path().to_path_buf()));

    let (st, classes) = call_json(&app, "GET", "/v1/classes", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(classes["classes"][1], json!({ "id": 1, "name": "worm" }));

    let (st, _) = call_json(&app, "POST", "/v1/sessions", Some(json!({ "class": 7 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (_, a) = call_json(&app, "POST", "/v1/sessions", Some(json!({}))).await;
    let (_, b) = call_json(&app, "POST", "/v1/sessions", Some(json!({ "class": 1 }))).await;
    assert_ne!(a["id"], b["id"]);
    let id = b["id"].as_str().unwrap().to_string();
    let base = format!("/v1/sessions/{id}");

    let (_, fresh_png) = call(&app, "GET", &format!("{base}/render.png?size=32"), None).await;
    let black = cnp_core::render::encode_png(&cnp_core::render::Canvas::black(32, 32)).unwrap();
    assert_eq!(fresh_png, black);

    let (st, placed) = call_json(&app, "POST", &format!("{base}/strokes"), Some(stroke(0.5, 0.5, 1.0))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!((placed["level"].as_u64(), placed["slot"].as_u64()), (Some(1), Some(0)));
    for k in 0..4 {
        let (st, _) = call_json(&app, "POST", &format!("{base}/strokes"), Some(stroke(0.2 + 0.15 * k as f32, 0.4, 0.3))).await;
        assert_eq!(st, StatusCode::OK);
    }
    let (st, bad) = call_json(&app, "POST", &format!("{base}/strokes"), Some(json!({ "stroke": [2.0, 0.5, 0.1, 0.1, 0, 0, 0, 0] }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST, "{bad}");

    let (_, before) = call_json(&app, "GET", &base, None).await;
    let body = json!({ "n_variants": 3, "steps": 35, "seed": 5 });
    let (st, done) = call_json(&app, "POST", &format!("{base}/complete"), Some(body.clone())).await;
    assert_eq!(st, StatusCode::OK, "{done}");
    let variants: Vec<StrokeSequence> =
        done["variants"].as_array().unwrap().iter().map(|v| StrokeSequence::from_json(&v.to_string()).unwrap()).collect();
    assert_eq!(variants.len(), 3);
    let context = StrokeSequence::from_json(&before["sequence"].to_string()).unwrap();
    for v in &variants {
        for i in (0..v.len()).filter(|&i| context.occupancy[i]) {
            assert_eq!(v.strokes[i], context.strokes[i]);
        }
    }
    let (_, after) = call_json(&app, "GET", &base, None).await;
    assert_eq!(after["sequence"], before["sequence"], "complete must not mutate");
    let (_, again) = call_json(&app, "POST", &format!("{base}/complete"), Some(body)).await;
    assert_eq!(again["variants"], done["variants"]);

    let (st, _) = call_json(&app, "POST", &format!("{base}/accept"), Some(json!({ "index": 9 }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let (st, _) = call_json(&app, "POST", &format!("{base}/accept"), Some(json!({ "index": 2 }))).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = call_json(&app, "POST", &format!("{base}/accept"), Some(json!({ "index": 2 }))).await;
    assert_eq!(st, StatusCode::CONFLICT, "variants are consumed");
    let (_, png) = call(&app, "GET", &format!("{base}/render.png?size=48"), None).await;
    let expected = cnp_core::render::encode_png(&cnp_core::render::Renderer::default().render_sequence(&variants[2], (48, 48))).unwrap();
    assert_eq!(png, expected);

    let (_, erased) = call_json(&app, "POST", &format!("{base}/erase"), Some(json!({ "cx": 0.5, "cy": 0.5, "side": 0.3 }))).await;
    assert!(erased["erased"].as_u64().unwrap() > 0);
    let (st, _) = call_json(&app, "POST", &format!("{base}/complete"), Some(json!({ "n_variants": 1, "steps": 35 }))).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = call_json(&app, "POST", &format!("{base}/undo"), Some(json!({ "n": 1 }))).await;
    assert_eq!(st, StatusCode::OK);
    let (_, state) = call_json(&app, "GET", &base, None).await;
    assert_eq!(StrokeSequence::from_json(&state["sequence"].to_string()).unwrap(), variants[2]);
    let (st, _) = call_json(&app, "POST", &format!("{base}/undo"), Some(json!({ "n": 0 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    // the on-disk log replays to the live state, and a fresh server reloads it
    let log = Session::load(dir.path().join("sessions").join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(log.seq, variants[2]);
    let restarted = tiny_state(Some(dir.path().to_path_buf()));
    let (st, reloaded) = call_json(&restarted, "GET", &base, None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(reloaded["sequence"], state["sequence"]);

    let (st, _) = call_json(&app, "GET", &format!("{base}/render.png?size=5000"), None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call_json(&app, "GET", "/v1/sessions/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call_json(&app, "POST", &format!("{base}/complete"), Some(json!({ "steps": 10 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn full_block_reports_block_id() {
    let app = tiny_state(None);
    let (_, s) = call_json(&app, "POST", "/v1/sessions", Some(json!({}))).await;
    let uri = format!("/v1/sessions/{}/strokes", s["id"].as_str().unwrap());
    for _ in 0..12 {
        assert_eq!(call_json(&app, "POST", &uri, Some(stroke(0.9, 0.1, 0.25))).await.0, StatusCode::OK);
    }
    let (st, err) = call_json(&app, "POST", &uri, Some(stroke(0.9, 0.1, 0.25))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["kind"], "slot_full");
    assert_eq!((err["level"].as_u64(), err["block"].clone()), (Some(4), json!([0, 3])));
}

#[tokio::test(flavor = "multi_thread")]
async fn stream_pushes_versions() {
    let app = tiny_state(None);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let served = router(app.clone());
    tokio::spawn(async move { axum::serve(listener, served).await });

    let (_, s) = call_json(&app, "POST", "/v1/sessions", Some(json!({}))).await;
    let id = s["id"].as_str().unwrap().to_string();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/v1/sessions/{id}/stream")).await.unwrap();
    let next = |msg: tokio_tungstenite::tungstenite::Message| -> Event { serde_json::from_str(msg.to_text().unwrap()).unwrap() };
    let hello = next(ws.next().await.unwrap().unwrap());
    assert_eq!((hello.event.as_str(), hello.state_version), ("sync", 0));

    call_json(&app, "POST", "/v1/sessions", Some(json!({}))).await;
    call_json(&app, "POST", &format!("/v1/sessions/{id}/strokes"), Some(stroke(0.5, 0.5, 0.5))).await;
    call_json(&app, "POST", &format!("/v1/sessions/{id}/undo"), Some(json!({ "n": 1 }))).await;
    let a = next(ws.next().await.unwrap().unwrap());
    let b = next(ws.next().await.unwrap().unwrap());
    assert_eq!((a.session.as_str(), a.event.as_str(), a.state_version), (id.as_str(), "stroke_added", 1));
    assert_eq!((b.event.as_str(), b.state_version), ("undone", 2));
}
