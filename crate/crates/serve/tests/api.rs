use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use crowd_cate::experiment::sha256_hex;
use crowd_cate::model::{fit, FitOptions, ModelKind};
use crowd_cate::scenario::{generate_dataset, sample_occupancy, GenConfig, OutcomeComponent};
use crowd_cate::sim::{build_default_layout, SimConfig, Simulator};
use crowd_cate::Occupancy;
use crowd_cate_serve::{router, ModelSet, Predictor, ServeError, ServiceState, WhatIfResponse};

fn simulator() -> Arc<Simulator> {
    Arc::new(Simulator::new(Arc::new(build_default_layout()), SimConfig::default()).unwrap())
}

/// Ridge checkpoints for max, mean and std written into `dir`.
fn ridge_checkpoints(sim: &Simulator, dir: &std::path::Path) -> [PathBuf; 3] {
    let gen = GenConfig { fixed_rates: Some(vec![0.9; 4]), seeds_per_rate_combo: 30, ..GenConfig::default() };
    let data = generate_dataset(sim, &gen, 5).unwrap();
    OutcomeComponent::ALL.map(|c| {
        let (model, _) = fit(ModelKind::Ridge, sim.layout(), &data.records, c, &FitOptions::default(), "test").unwrap();
        let path = dir.join(format!("ridge_{c}.ckpt"));
        model.save(&path).unwrap();
        path
    })
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn whatif(app: &axum::Router, body: Value) -> (StatusCode, Value) {
    let (status, bytes) = call(app.clone(), "POST", "/whatif", Some(body.to_string())).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn oracle_app() -> axum::Router {
    router(Arc::new(ServiceState::new(simulator(), Some(Predictor::Oracle))))
}

#[tokio::test]
async fn layout_reports_seats_and_exits_stably() {
    let app = oracle_app();
    let (status, first) = call(app.clone(), "GET", "/layout", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, second) = call(app, "GET", "/layout", None).await;
    assert_eq!(first, second);
    let v: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["seat_count"], 868);
    assert_eq!(v["seats"].as_array().unwrap().len(), 868);
    assert_eq!(v["exits"].as_array().unwrap().len(), 6);
    assert_eq!(v["grid"].as_array().unwrap().len(), v["rows"].as_u64().unwrap() as usize);
    let block_total: u64 = v["blocks"].as_array().unwrap().iter().map(|b| b["seats"].as_u64().unwrap()).sum();
    assert_eq!(block_total, 868);
}

#[tokio::test]
async fn unloaded_service_is_unready() {
    let app = router(Arc::new(ServiceState::new(simulator(), None)));
    let (status, body) = call(app.clone(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["ready"], false);
    let (status, _) = whatif(&app, json!({ "rates": [0.5, 0.5, 0.5, 0.5], "seed": 1 })).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn oracle_predictions_equal_simulation() {
    let app = oracle_app();
    let (status, v) = whatif(&app, json!({ "rates": [0.9, 0.5, 0.9, 0.1], "seed": 7, "include_simulation": true })).await;
    assert_eq!(status, StatusCode::OK);
    let resp: WhatIfResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.entries.len(), 30);
    for e in &resp.entries {
        assert_eq!(Some(e.predicted), e.simulated);
    }
    let sim = simulator();
    let occ = sample_occupancy(sim.layout(), &[0.9, 0.5, 0.9, 0.1], 7).unwrap();
    assert_eq!(resp.occupancy, occ.to_base64());
    assert_eq!(resp.occupied, occ.count());
}

#[tokio::test]
async fn trained_models_rank_a_full_house() {
    let sim = simulator();
    let dir = tempfile::tempdir().unwrap();
    let paths = ridge_checkpoints(&sim, dir.path());
    let set = ModelSet::load([&paths[0], &paths[1], &paths[2]], sim.layout()).unwrap();
    let app = router(Arc::new(ServiceState::new(Arc::clone(&sim), Some(Predictor::Models(set)))));

    let (status, body) = call(app.clone(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let health: Value = serde_json::from_slice(&body).unwrap();
    for (i, m) in health["models"].as_array().unwrap().iter().enumerate() {
        assert_eq!(m["file_hash"], sha256_hex(&std::fs::read(&paths[i]).unwrap()));
        assert_eq!(m["method"], "Ridge");
    }

    let request = json!({ "occupancy": vec![1; 868] });
    let (status, v) = whatif(&app, request.clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["model_hash"], health["model_hash"]);
    let resp: WhatIfResponse = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(resp.entries.len(), 30);
    assert_eq!(resp.occupied, 868);
    let mut sorted = resp.ranking.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..30).collect::<Vec<_>>());
    let max_of = |t: usize| resp.entries.iter().find(|e| e.treatment == t).unwrap().predicted.max_time;
    for w in resp.ranking.windows(2) {
        assert!(max_of(w[0]) <= max_of(w[1]));
    }
    let (_, again) = whatif(&app, request).await;
    assert_eq!(v, again);
}

#[tokio::test]
async fn occupancy_forms_agree() {
    let app = oracle_app();
    let sim = simulator();
    let occ: Occupancy = sample_occupancy(sim.layout(), &[0.3, 0.6, 0.2, 0.8], 3).unwrap();
    let bits: Vec<u8> = occ.bits().iter().map(|&b| u8::from(b)).collect();
    let forms = [
        json!({ "occupancy": occ.to_base64(), "treatments": [0, 29] }),
        json!({ "occupancy": occ.bits(), "treatments": [0, 29] }),
        json!({ "occupancy": bits, "treatments": [0, 29] }),
        json!({ "rates": [0.3, 0.6, 0.2, 0.8], "seed": 3, "treatments": [0, 29] }),
    ];
    let mut bodies = Vec::new();
    for f in forms {
        let (status, v) = whatif(&app, f).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["entries"].as_array().unwrap().len(), 2);
        bodies.push(v);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let app = oracle_app();
    let (status, _) = call(app.clone(), "POST", "/whatif", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let cases = [
        json!({}),
        json!({ "rates": [0.5, 0.5, 0.5, 0.5] }),
        json!({ "rates": [0.5, 0.5, 0.5, 0.5], "seed": 1, "occupancy": vec![1; 868] }),
        json!({ "occupancy": vec![1; 10] }),
        json!({ "occupancy": vec![2; 868] }),
        json!({ "rates": [0.5, 0.5], "seed": 1 }),
        json!({ "rates": [0.5, 0.5, 0.5, 1.5], "seed": 1 }),
        json!({ "rates": [0.5, 0.5, 0.5, 0.5], "seed": 1, "treatments": [30] }),
        json!({ "rates": [0.5, 0.5, 0.5, 0.5], "seed": 1, "treatments": [3, 3] }),
        json!({ "rates": [0.5, 0.5, 0.5, 0.5], "seed": 1, "colour": "red" }),
        json!({ "occupancy": vec![0; 868], "include_simulation": true }),
    ];
    for case in cases {
        let (status, v) = whatif(&app, case.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{case} -> {v}");
        assert!(v["error"].is_string());
    }
}

#[test]
fn checkpoint_for_the_wrong_outcome_is_refused() {
    let sim = simulator();
    let dir = tempfile::tempdir().unwrap();
    let paths = ridge_checkpoints(&sim, dir.path());
    let err = ModelSet::load([&paths[1], &paths[0], &paths[2]], sim.layout()).unwrap_err();
    assert!(matches!(err, ServeError::WrongOutcome { .. }), "{err}");
}

#[tokio::test]
async fn simulation_over_budget_is_unavailable() {
    let state = ServiceState::new(simulator(), Some(Predictor::Oracle)).with_sim_budget(std::time::Duration::ZERO);
    let app = router(Arc::new(state));
    let (status, v) = whatif(&app, json!({ "occupancy": vec![1; 868], "include_simulation": true })).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{v}");
    let (status, _) = whatif(&app, json!({ "occupancy": vec![1; 868], "treatments": [0] })).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let app = oracle_app();
    let body = json!({ "rates": [0.9, 0.9, 0.5, 0.5], "seed": 2, "include_simulation": true, "treatments": [1, 5, 9] });
    let calls = (0..4).map(|_| {
        let (app, body) = (app.clone(), body.clone());
        tokio::spawn(async move { whatif(&app, body).await })
    });
    let mut results = Vec::new();
    for c in calls {
        results.push(c.await.unwrap());
    }
    assert!(results.iter().all(|r| r.0 == StatusCode::OK && r.1 == results[0].1));
}
