use std::sync::Arc;
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use srsd::env::make_task;
use srsd::feedback::{LabelSource, Segment};
use srsd::orchestrator::trainer::{Query, SessionRequest};
use srsd::orchestrator::{RunConfig, Trainer};
use srsd::Error;
use srsd_gateway::{spawn, ClassRegistry, Gateway, GatewayFeedback, QuerySession, ServerHandle, StatusSnapshot};

fn start(max_classes: usize) -> (Arc<Gateway>, ServerHandle, String) {
    let gw = Arc::new(Gateway::new(ClassRegistry::new(4, max_classes).unwrap()));
    let server = spawn(gw.clone(), "127.0.0.1:0".parse().unwrap(), None).unwrap();
    let base = format!("http://{}", server.addr);
    (gw, server, base)
}

/// A 25-step spiral so every polyline point is distinct.
fn segment(offset: f64) -> Segment {
    let pts: Vec<[f64; 2]> = (0..=25)
        .map(|i| {
            let r = 0.02 * i as f64 + offset;
            let a = 0.3 * i as f64 + 0.123_456_789;
            [r * a.cos(), r * a.sin()]
        })
        .collect();
    let actions = pts.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect();
    Segment::new(pts[..25].to_vec(), actions, pts[25]).unwrap()
}

fn request(session_id: u64, n: u64) -> SessionRequest {
    SessionRequest {
        session_id,
        step: 5000,
        queries: (0..n).map(|i| Query { query_id: 100 + i, segment: segment(0.01 * i as f64) }).collect(),
        task: make_task(4, 1.0, 100).unwrap(),
        budget_used: 7,
        budget_total: 40,
    }
}

#[test]
fn session_document_carries_polylines() {
    let (gw, _server, base) = start(8);
    let client = Client::new();
    let r = client.get(format!("{base}/api/session/current")).send().unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);

    let req = request(0, 3);
    gw.open_session(&req).unwrap();
    let s: QuerySession = client.get(format!("{base}/api/session/current")).send().unwrap().json().unwrap();
    let by_id: QuerySession = client.get(format!("{base}/api/session/0")).send().unwrap().json().unwrap();
    assert_eq!(s, by_id);
    let ids: Vec<u64> = s.queries.iter().map(|q| q.query_id).collect();
    assert_eq!(ids, vec![100, 101, 102]);
    assert_eq!(s.classes[0].name, "Irrelevant");
    for (wire, q) in s.queries.iter().zip(&req.queries) {
        assert_eq!(wire.polyline.len(), 26);
        let expected = q.segment.polyline();
        assert_eq!(wire.start, expected[0]);
        for (a, b) in wire.polyline.iter().zip(&expected) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    let missing = client.get(format!("{base}/api/session/99")).send().unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
}

#[test]
fn partial_and_invalid_submissions_are_rejected() {
    let (gw, _server, base) = start(6);
    gw.open_session(&request(0, 3)).unwrap();
    let client = Client::new();
    let url = format!("{base}/api/session/0/labels");

    let partial = json!({"session_id": 0, "labels": [
        {"query_id": 100, "label_id": 1}, {"query_id": 102, "label_id": 0}]});
    let r = client.post(&url).json(&partial).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = r.json().unwrap();
    assert_eq!(body["missing_query_ids"], json!([101]));
    assert!(body["error"].as_str().unwrap().contains("101"));

    let unknown = json!({"session_id": 0, "labels": [
        {"query_id": 100, "label_id": 1}, {"query_id": 101, "label_id": 9}, {"query_id": 102, "label_id": 0}]});
    let r = client.post(&url).json(&unknown).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json::<Value>().unwrap()["unknown_label_ids"], json!([9]));

    let too_many = json!({"session_id": 0, "labels": [
        {"query_id": 100, "label_id": 5}, {"query_id": 101, "label_id": 6}, {"query_id": 102, "label_id": 0}],
        "new_classes": [{"id": 5, "name": "north-east"}, {"id": 6, "name": "south-west"}]});
    let r = client.post(&url).json(&too_many).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    // Nothing above may have landed.
    assert!(gw.is_open(0));
    assert_eq!(gw.classes().len(), 5);
    let status: StatusSnapshot = client.get(format!("{base}/api/status")).send().unwrap().json().unwrap();
    assert!(status.awaiting_session);
    assert_eq!(status.session_id, Some(0));
}

#[test]
fn new_class_resolves_and_session_completes() {
    let (gw, _server, base) = start(8);
    gw.open_session(&request(4, 3)).unwrap();
    let client = Client::new();
    let file = json!({"session_id": 4, "labels": [
        {"query_id": 100, "label_id": 5}, {"query_id": 101, "label_id": 2}, {"query_id": 102, "label_id": 0}],
        "new_classes": [{"id": 5, "name": "north-east"}]});
    let r = client.post(format!("{base}/api/session/4/labels")).json(&file).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let classes: Value = client.get(format!("{base}/api/classes")).send().unwrap().json().unwrap();
    assert_eq!(classes.as_array().unwrap().len(), 6);
    assert_eq!(classes[5], json!({"id": 5, "name": "north-east"}));

    let labels = gw.wait_for_labels(4, Duration::from_secs(1)).unwrap();
    assert_eq!(labels.len(), 3);
    assert_eq!(labels[0].label.0, 5);
    assert!(gw.wait_for_labels(4, Duration::ZERO).is_none());

    let again = client.post(format!("{base}/api/session/4/labels")).json(&file).send().unwrap();
    assert_eq!(again.status(), StatusCode::CONFLICT);
    let s: QuerySession = client.get(format!("{base}/api/session/4")).send().unwrap().json().unwrap();
    assert_eq!(s.status, srsd_gateway::wire::SessionStatus::Complete);
}

#[test]
fn classes_endpoint_respects_limit() {
    let (_gw, _server, base) = start(6);
    let client = Client::new();
    let r = client.post(format!("{base}/api/classes")).json(&json!({"name": "top-right"})).send().unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    assert_eq!(r.json::<Value>().unwrap(), json!({"id": 5, "name": "top-right"}));
    let r = client.post(format!("{base}/api/classes")).json(&json!({"name": "left"})).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[test]
fn second_open_session_is_rejected() {
    let (gw, _server, _base) = start(8);
    gw.open_session(&request(0, 1)).unwrap();
    assert!(gw.open_session(&request(1, 1)).is_err());
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 3;
    c.source = srsd::orchestrator::config::FeedbackSourceKind::Human;
    c.train.total_steps = 1200;
    c.train.learning_starts = 300;
    c.train.batch_size = 32;
    c.train.update_every = 50;
    c.feedback.budget = 3;
    c.feedback.queries_per_session = 3;
    c.feedback.start_feedback = 400;
    c.feedback.predictor_epochs = 1;
    c.agent.hidden = 16;
    c.discriminator.hidden = 16;
    c.feedback.ensemble.hidden = 16;
    c
}

/// Plays the annotator: waits for a session, labels every query (one with a
/// freshly added class) after first trying a partial file.
fn annotate(base: String) -> (Vec<u64>, StatusSnapshot) {
    let client = Client::new();
    let session: QuerySession = loop {
        let r = client.get(format!("{base}/api/session/current")).send().unwrap();
        if r.status() == StatusCode::OK {
            break r.json().unwrap();
        }
        thread::sleep(Duration::from_millis(20));
    };
    let status: StatusSnapshot = client.get(format!("{base}/api/status")).send().unwrap().json().unwrap();
    let ids: Vec<u64> = session.queries.iter().map(|q| q.query_id).collect();
    let url = format!("{base}/api/session/{}/labels", session.session_id);

    let partial = json!({"session_id": session.session_id, "labels": [{"query_id": ids[0], "label_id": 1}]});
    let r = client.post(&url).json(&partial).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json::<Value>().unwrap()["missing_query_ids"], json!([ids[1], ids[2]]));

    let full = json!({"session_id": session.session_id,
        "labels": [{"query_id": ids[0], "label_id": 1}, {"query_id": ids[1], "label_id": 0},
                   {"query_id": ids[2], "label_id": 5}],
        "new_classes": [{"id": 5, "name": "north-east"}]});
    let r = client.post(&url).json(&full).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    (ids, status)
}

#[test]
fn trainer_round_trip_through_gateway() {
    let (gw, _server, base) = start(8);
    let client_thread = thread::spawn(move || annotate(base));
    let mut trainer = Trainer::new(small_config()).unwrap();
    let mut source = GatewayFeedback::new(gw.clone(), Duration::from_secs(60));
    trainer.train(&mut source).unwrap();
    let (ids, seen_status) = client_thread.join().unwrap();

    assert!(seen_status.awaiting_session);
    assert_eq!(seen_status.budget_used, 0);
    assert_eq!(seen_status.budget_total, 3);
    assert_eq!(trainer.dataset.len(), 3);
    let got: Vec<u64> = trainer.dataset.items().iter().map(|i| i.query_id).collect();
    assert_eq!(got, ids);
    assert!(trainer.dataset.items().iter().all(|i| i.source == LabelSource::Human));
    assert_eq!(trainer.dataset.items()[2].label.0, 5);
    assert_eq!(trainer.step(), 1200);
    assert_eq!(gw.status().budget_used, trainer.dataset.len());
    assert!(!gw.status().awaiting_session);
}

#[test]
fn timeout_pauses_and_resumes() {
    let (gw, _server, base) = start(8);
    let mut trainer = Trainer::new(small_config()).unwrap();
    let mut source = GatewayFeedback::new(gw.clone(), Duration::from_millis(50));
    match trainer.train(&mut source) {
        Err(Error::FeedbackTimeout { session_id }) => assert_eq!(session_id, 0),
        other => panic!("expected a timeout, got {other:?}"),
    }
    let paused_at = trainer.step();
    assert!(trainer.pending_session().is_some());
    assert!(gw.is_open(0));

    // Retrying re-uses the open session instead of opening another.
    assert!(matches!(trainer.train(&mut source), Err(Error::FeedbackTimeout { session_id: 0 })));
    assert_eq!(trainer.step(), paused_at);

    let (ids, _) = annotate(base);
    trainer.train(&mut source).unwrap();
    assert_eq!(trainer.dataset.len(), 3);
    assert_eq!(trainer.dataset.items().iter().map(|i| i.query_id).collect::<Vec<_>>(), ids);
    assert!(trainer.pending_session().is_none());
}

fn raw_get(addr: std::net::SocketAddr, path: &str) -> String {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn static_assets_are_served_from_the_asset_dir_only() {
    let root = tempfile::tempdir().unwrap();
    let assets = root.path().join("ui");
    std::fs::create_dir(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>labels</html>").unwrap();
    std::fs::write(assets.join("app.js"), "console.log(1)").unwrap();
    std::fs::write(assets.join(".env"), "hidden").unwrap();
    std::fs::write(root.path().join("secret.txt"), "outside").unwrap();

    let gw = Arc::new(Gateway::new(ClassRegistry::new(4, 8).unwrap()));
    let server = spawn(gw, "127.0.0.1:0".parse().unwrap(), Some(assets)).unwrap();
    let base = format!("http://{}", server.addr);
    let client = Client::new();

    let index = client.get(format!("{base}/")).send().unwrap();
    assert_eq!(index.headers()["content-type"], "text/html; charset=utf-8");
    assert_eq!(index.text().unwrap(), "<html>labels</html>");
    let js = client.get(format!("{base}/app.js")).send().unwrap();
    assert!(js.headers()["content-type"].to_str().unwrap().contains("javascript"));
    assert_eq!(client.get(format!("{base}/missing.css")).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(client.get(format!("{base}/api/status")).send().unwrap().status(), StatusCode::OK);

    for path in ["/.env", "/../secret.txt", "/%2e%2e/secret.txt"] {
        let reply = raw_get(server.addr, path);
        assert!(!reply.starts_with("HTTP/1.1 200"), "{path}: {reply}");
        assert!(!reply.contains("outside") && !reply.contains("hidden"), "{path}");
    }
}
