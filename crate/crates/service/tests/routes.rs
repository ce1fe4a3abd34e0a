use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use critlab_service::{router, AppState};

async fn call(
    state: &AppState,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, value)
}

fn synthetic_config() -> Value {
    json!({
        "data": { "dataset": "synthetic", "synthetic_train": 64, "synthetic_test": 32 },
        "model": { "hidden": [8] },
        "train": { "epochs": 2, "batch_size": 16, "lr0": 0.1, "augment": false, "eval_batch": 32 }
    })
}

async fn wait_done(state: &AppState, id: u64) -> Value {
    for _ in 0..600 {
        let (_, v) = call(state, "GET", &format!("/jobs/{id}"), None).await;
        if v["state"] == "done" || v["state"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn health_reports_version() {
    let state = AppState::new(1);
    let (status, v) = call(&state, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["version"].as_str().unwrap().starts_with("critlab-core "));
}

#[tokio::test]
async fn train_job_runs_to_completion() {
    let state = AppState::new(1);
    let dir = tempfile::tempdir().unwrap();
    let mut config: Value = synthetic_config();
    config["train"]["probe_epochs"] = json!([2]);
    config["timeline"] = json!({ "fisher": { "n_x": 32, "chunk": 16 } });
    let (status, v) = call(
        &state,
        "POST",
        "/jobs",
        Some(json!({ "command": "train", "config": config, "out": dir.path() })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = v["id"].as_u64().unwrap();
    let done = wait_done(&state, id).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["arms_done"], 1);
    assert_eq!(done["manifest"]["command"], "train");
    assert_eq!(done["manifest"]["arms"][0]["status"]["state"], "ok");
    assert_eq!(done["report"]["type"], "train");
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("fisher.csv").exists());

    let (_, list) = call(&state, "GET", "/jobs", None).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert!(list[0]["manifest"].is_null());
}

#[tokio::test]
async fn failing_job_reports_error() {
    let state = AppState::new(1);
    let dir = tempfile::tempdir().unwrap();
    let config = json!({ "data": { "dataset": "mnist", "dir": "/nonexistent/mnist" } });
    let (status, v) = call(
        &state,
        "POST",
        "/jobs",
        Some(json!({ "command": "sweep-removal", "config": config, "out": dir.path() })),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = wait_done(&state, v["id"].as_u64().unwrap()).await;
    assert_eq!(done["state"], "failed");
    assert!(done["error"].as_str().unwrap().contains("nonexistent"));
}

#[tokio::test]
async fn bad_job_requests_are_rejected() {
    let state = AppState::new(1);
    let relative = json!({ "command": "train", "config": {}, "out": "relative/dir" });
    let (status, v) = call(&state, "POST", "/jobs", Some(relative)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("absolute"));

    let invalid =
        json!({ "command": "train", "config": { "train": { "lr0": -1.0 } }, "out": "/tmp/x" });
    let (status, _) = call(&state, "POST", "/jobs", Some(invalid)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let unknown = json!({ "command": "sweep-everything", "config": {}, "out": "/tmp/x" });
    let (status, _) = call(&state, "POST", "/jobs", Some(unknown)).await;
    assert!(status.is_client_error());

    let (status, _) = call(&state, "GET", "/jobs/99", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn analysis_endpoints_answer_directly() {
    let state = AppState::new(1);
    let (status, v) = call(
        &state,
        "POST",
        "/spearman",
        Some(json!({ "x": [1.0, 2.0, 3.0, 4.0], "y": [10.0, 20.0, 15.0, 40.0] })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    // rank differences 0, 1, 1, 0: 1 - 6*2/(4*15)
    assert!((v["rho"].as_f64().unwrap() - 0.8).abs() < 1e-12);

    let s: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let f: Vec<f64> = s.iter().map(|x| 2.0 * (0.3 * x).exp() + 1.0).collect();
    let (status, v) = call(
        &state,
        "POST",
        "/fit/exp-link",
        Some(json!({ "x": s, "y": f })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!((v["c"].as_f64().unwrap() - 0.3).abs() < 1e-6);

    let (status, v) = call(
        &state,
        "POST",
        "/fit/double-exp",
        Some(json!({ "points": [[0.0, 1.0]] })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].is_string());

    let report = |epoch: usize, a: f64, b: f64| {
        json!({
            "epoch": epoch,
            "layers": [
                { "layer_id": 0, "label": "a", "params": 1, "trace": a },
                { "layer_id": 1, "label": "b", "params": 1, "trace": b }
            ],
            "total": a + b, "total_stderr": 0.0, "n_x": 1, "n_y": 1, "seed": 0
        })
    };
    let (status, v) = call(
        &state,
        "POST",
        "/fisher/normalize",
        Some(json!({ "reports": [report(0, 1.0, 3.0), report(1, 2.0, 2.0)], "mode": "per_layer_peak" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v, json!([[0.5, 1.0], [1.0, 2.0 / 3.0]]));
}
