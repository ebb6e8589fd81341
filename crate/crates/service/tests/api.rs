use std::path::Path;

use active_testing::dataset::{
    synthesize_tag_dataset, Benchmark, DatasetSource, EvaluationPool, ItemId, TagSynthSpec,
};
use active_testing::estimators::true_metric;
use active_testing::metrics::MetricSpec;
use active_testing_service::{
    router, AppState, BatchPayload, BatchStatus, Catalog, CreateSessionResponse, ErrorBody,
    EstimateSnapshot, SubmitResponse,
};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const PRE_VETTED: usize = 6;

/// 2 categories of 12 items, the first few already vetted.
fn pool() -> EvaluationPool {
    let spec = TagSynthSpec {
        n_categories: 2,
        items_per_category: 12,
        positive_rate: 0.4,
        seed: 4,
        ..Default::default()
    };
    let items = synthesize_tag_dataset(&spec)
        .unwrap()
        .items()
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let item = item.clone();
            if i < PRE_VETTED {
                let truth = item.sim_truth.unwrap();
                item.vetted(truth)
            } else {
                item
            }
        })
        .collect();
    EvaluationPool::new(items).unwrap()
}

fn catalog() -> Catalog {
    let mut catalog = Catalog::new();
    catalog.insert("tags", DatasetSource::Tag(pool()));
    catalog
}

fn app(dir: &Path) -> Router {
    router(AppState::open(catalog(), dir).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn session_request(batch_size: usize) -> Value {
    json!({
        "dataset": "tags",
        "metric": { "kind": "average_precision" },
        "estimator": "learned_tag",
        "strategy": { "kind": "meec_ap" },
        "batch_size": batch_size,
    })
}

async fn create(app: &Router, batch_size: usize) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(session_request(batch_size))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    let created: CreateSessionResponse = serde_json::from_value(body).unwrap();
    created.session_id.to_string()
}

async fn batch(app: &Router, id: &str) -> BatchPayload {
    let (status, body) = call(app, "GET", &format!("/sessions/{id}/batch"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    serde_json::from_value(body).unwrap()
}

async fn estimate(app: &Router, id: &str) -> EstimateSnapshot {
    let (status, body) = call(app, "GET", &format!("/sessions/{id}/estimate"), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    serde_json::from_value(body).unwrap()
}

fn truth_of(id: &ItemId) -> bool {
    pool().get(id).unwrap().sim_truth.unwrap()
}

async fn vet(app: &Router, session: &str, item: &ItemId, truth: bool) -> (StatusCode, Value) {
    call(
        app,
        "POST",
        &format!("/sessions/{session}/vets"),
        Some(json!({ "item_id": item, "truth": truth })),
    )
    .await
}

async fn answer_batch(app: &Router, session: &str) -> Option<SubmitResponse> {
    let b = batch(app, session).await;
    let mut last = None;
    for item in &b.items {
        let (status, body) = vet(app, session, &item.id, truth_of(&item.id)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        last = Some(serde_json::from_value(body).unwrap());
    }
    last
}

fn error(body: Value) -> ErrorBody {
    serde_json::from_value(body).unwrap()
}

#[tokio::test]
async fn health_responds() {
    let dir = tempfile::tempdir().unwrap();
    let (status, body) = call(&app(dir.path()), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn fresh_session_reports_the_pre_vetted_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, body) = call(&app, "POST", "/sessions", Some(session_request(5))).await;
    assert_eq!(status, StatusCode::CREATED);
    let created: CreateSessionResponse = serde_json::from_value(body).unwrap();
    assert_eq!(created.estimate.vetted_fraction, PRE_VETTED as f64 / 24.0);
    assert_eq!(created.estimate.history.len(), 1);
    assert_eq!(created.estimate.step, 0);
}

#[tokio::test]
async fn invalid_requests_get_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let (status, body) = call(&app, "POST", "/sessions", Some(session_request(0))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let e = error(body);
    assert_eq!(
        (e.code.as_str(), e.field.as_deref()),
        ("validation", Some("batch_size"))
    );

    let mut unknown = session_request(5);
    unknown["dataset"] = json!("nope");
    let (status, body) = call(&app, "POST", "/sessions", Some(unknown)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error(body).code, "unknown_dataset");

    let (status, body) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({ "dataset": "tags" })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error(body).code, "validation");

    for uri in [
        "/sessions/not-a-uuid/estimate",
        "/sessions/00000000-0000-0000-0000-000000000000/batch",
    ] {
        let (status, body) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(error(body).code, "unknown_session");
    }
}

#[tokio::test]
async fn batches_are_idempotent_until_answered() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 5).await;
    let first = batch(&app, &id).await;
    assert_eq!(first.items.len(), 5);
    assert_eq!(first.status, BatchStatus::Pending);
    assert!(first
        .items
        .iter()
        .all(|i| pool().get(&i.id).unwrap().label.truth().is_none()));
    assert_eq!(batch(&app, &id).await, first);
}

#[tokio::test]
async fn refit_happens_once_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 5).await;
    let before = estimate(&app, &id).await;
    let b = batch(&app, &id).await;

    let (status, body) = vet(&app, &id, &b.items[0].id, truth_of(&b.items[0].id)).await;
    assert_eq!(status, StatusCode::OK);
    let mid: SubmitResponse = serde_json::from_value(body).unwrap();
    assert_eq!(mid.outcome, active_testing::engine::SubmitOutcome::Recorded);
    assert_eq!(mid.estimate.per_category, before.per_category);
    assert_eq!(mid.estimate.vetted_fraction, before.vetted_fraction);
    assert_eq!(mid.estimate.pending.unwrap().answered, 1);

    for item in &b.items[1..] {
        vet(&app, &id, &item.id, truth_of(&item.id)).await;
    }
    let after = estimate(&app, &id).await;
    assert_eq!(after.step, 1);
    assert_eq!(after.history.len(), 2);
    assert_eq!(after.vets, 5);
    assert!(after.pending.is_none());
    assert_ne!(batch(&app, &id).await.items, b.items);
}

#[tokio::test]
async fn resubmissions_replay_or_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 5).await;
    let b = batch(&app, &id).await;
    let item = &b.items[0].id;
    let truth = truth_of(item);
    vet(&app, &id, item, truth).await;

    let (status, body) = vet(&app, &id, item, truth).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["outcome"], "replayed");

    let (status, body) = vet(&app, &id, item, !truth).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error(body).code, "conflict");

    let outsider = pool()
        .unvetted()
        .find(|i| !b.items.iter().any(|x| x.id == i.id))
        .unwrap()
        .id
        .clone();
    let (status, body) = vet(&app, &id, &outsider, true).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error(body).code, "not_pending");

    // only the one real answer was logged
    let (_, history) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let kinds: Vec<&str> = history["events"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["event"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["created", "batch_issued", "vet_submitted"]);
    assert!(history["events"][0]["at"].as_str().unwrap().contains('T'));
}

#[tokio::test]
async fn sessions_on_one_dataset_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let a = create(&app, 5).await;
    let b = create(&app, 5).await;
    answer_batch(&app, &a).await;
    assert_eq!(estimate(&app, &a).await.vets, 5);
    let other = estimate(&app, &b).await;
    assert_eq!(other.vets, 0);
    assert_eq!(other.vetted_fraction, PRE_VETTED as f64 / 24.0);
}

#[tokio::test]
async fn full_vetting_reaches_the_exact_metric() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 5).await;
    let mut sizes = Vec::new();
    loop {
        let b = batch(&app, &id).await;
        if b.status == BatchStatus::Exhausted {
            assert!(b.items.is_empty());
            break;
        }
        sizes.push(b.items.len());
        answer_batch(&app, &id).await;
    }
    // 18 unvetted items in batches of 5
    assert_eq!(sizes, [5, 5, 5, 3]);
    let last = estimate(&app, &id).await;
    assert!(last.finished);
    assert_eq!(last.history.len(), sizes.len() + 1);
    let mut full = pool();
    let ids: Vec<ItemId> = full.unvetted().map(|i| i.id.clone()).collect();
    for item in &ids {
        full.vet_item(item).unwrap();
    }
    let exact =
        true_metric::<f64>(&Benchmark::single(full), &MetricSpec::AveragePrecision).unwrap();
    assert_eq!(last.per_category, exact);
    assert_eq!(last.vetted_fraction, 1.0);
}

#[tokio::test]
async fn restart_replays_sessions_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let first = app(dir.path());
    let id = create(&first, 4).await;
    answer_batch(&first, &id).await;
    let open = batch(&first, &id).await;
    vet(&first, &id, &open.items[0].id, truth_of(&open.items[0].id)).await;
    let open = batch(&first, &id).await;
    assert_eq!(open.answered.len(), 1);
    let estimate_before = estimate(&first, &id).await;
    let (_, history_before) = call(&first, "GET", &format!("/sessions/{id}/history"), None).await;
    drop(first);

    let second = app(dir.path());
    assert_eq!(estimate(&second, &id).await, estimate_before);
    assert_eq!(batch(&second, &id).await, open);
    let (_, history_after) = call(&second, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(history_after, history_before);

    // and it carries on from where it stopped
    for item in &open.items[1..] {
        let (status, _) = vet(&second, &id, &item.id, truth_of(&item.id)).await;
        assert_eq!(status, StatusCode::OK);
    }
    assert_eq!(estimate(&second, &id).await.step, 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_see_whole_steps() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create(&app, 3).await;
    let writer = {
        let (app, id) = (app.clone(), id.clone());
        tokio::spawn(async move {
            for _ in 0..4 {
                answer_batch(&app, &id).await;
            }
        })
    };
    let mut seen = Vec::new();
    while !writer.is_finished() {
        seen.push(estimate(&app, &id).await);
        tokio::task::yield_now().await;
    }
    writer.await.unwrap();
    let last = estimate(&app, &id).await;
    seen.push(last.clone());
    for snap in &seen {
        let point = &last.history[snap.step];
        assert_eq!(
            (snap.vets, snap.vetted_fraction),
            (point.vets, point.vetted_fraction)
        );
        assert_eq!(snap.overall_mean, point.overall_mean);
    }
}
