mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use ragmt_service::router;

fn app(dir: &std::path::Path, static_dir: Option<std::path::PathBuf>) -> Router {
    router(Arc::new(common::workbench(dir)), static_dir)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let json = serde_json::from_str(&text).unwrap_or(Value::Null);
    (status, json, text)
}

#[tokio::test]
async fn create_and_fetch() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (status, s, _) = call(&app, "POST", "/sessions", Some(json!({"sl": common::SL}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(s["status"], "open");
    let id = s["session_id"].as_str().unwrap().to_string();

    let (status, got, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got, s);

    let (status, list, _) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list["sessions"], json!([id]));
}

#[tokio::test]
async fn errors_have_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (status, e, _) = call(&app, "POST", "/sessions", Some(json!({"sl": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "validation");

    let (status, e, _) = call(&app, "POST", "/sessions", Some(json!({"text": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "validation");

    let (status, e, _) = call(&app, "GET", "/sessions/s999999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(e["code"], "not_found");

    let (_, s, _) = call(&app, "POST", "/sessions", Some(json!({"sl": common::SL}))).await;
    let id = s["session_id"].as_str().unwrap();
    let (status, e, _) = call(&app, "POST", &format!("/sessions/{id}/compose"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["code"], "missing_prerequisite");
    assert_eq!(e["missing_prerequisite"], "analyze");
    assert!(e["message"].as_str().unwrap().contains("compose requires analyze"));
}

#[tokio::test]
async fn five_step_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (_, s, _) = call(&app, "POST", "/sessions", Some(json!({"sl": common::SL}))).await;
    let id = s["session_id"].as_str().unwrap().to_string();
    let at = |step: &str| format!("/sessions/{id}/{step}");

    let (status, s, _) = call(&app, "POST", &at("analyze"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["analysis"]["a1"], "inner");
    assert_eq!(s["analysis"]["a2"], json!(["nmcc_handling"]));

    let (_, s, _) = call(&app, "POST", &at("retrieve"), None).await;
    let hits = s["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 5);
    for h in hits {
        assert!(h["similarity"].as_f64().unwrap() > 0.0 && h["distance"].as_f64().is_some());
        assert!(h["jp"].is_string() && h["zh"].is_string());
    }
    for rank in 1..=5 {
        let body = json!({"selected": rank != 3, "justification": if rank == 3 { "register mismatch" } else { "same construction" }});
        let (status, _, _) = call(&app, "POST", &at(&format!("hits/{rank}")), Some(body)).await;
        assert_eq!(status, StatusCode::OK);
    }

    let (status, e, _) = call(&app, "POST", &at("generate"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["missing_prerequisite"], "compose");

    let (_, s, _) = call(&app, "POST", &at("compose"), Some(json!({"note": "first try"}))).await;
    assert_eq!(
        s["prompt_versions"][0]["prompt"]["rendered"]
            .as_str()
            .unwrap()
            .matches("(JP)")
            .count(),
        4
    );
    let (_, s, _) = call(&app, "POST", &at("compose"), None).await;
    assert_eq!(s["prompt_versions"].as_array().unwrap().len(), 2);

    let (_, s, _) = call(&app, "POST", &at("generate"), Some(json!({"version": 1}))).await;
    assert_eq!(s["outputs"][0]["prompt_version"], 1);
    let output = s["outputs"][0]["record"]["output_zh"].as_str().unwrap().to_string();

    let (_, s, _) = call(
        &app,
        "POST",
        &at("post_edit"),
        Some(json!({"text": "看书的学生向老师提问了。", "note": "shorter"})),
    )
    .await;
    assert_eq!(s["post_edits"][0]["note"], "shorter");

    let (_, s, _) = call(&app, "POST", &at("score"), Some(json!({"reference": output}))).await;
    assert_eq!(s["scores"][0]["bleu"]["score"], 100.0);
    let (_, s, _) = call(
        &app,
        "POST",
        &at("score"),
        Some(json!({"reference": "看书的学生向老师提问了。", "target": {"kind": "post_edit", "index": 0}})),
    )
    .await;
    assert_eq!(s["scores"][1]["bleu"]["score"], 100.0);

    let (status, s, _) = call(&app, "POST", &at("archive"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["status"], "archived");
    let (status, e, _) = call(&app, "POST", &at("analyze"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["code"], "archived");

    let (status, w, _) = call(&app, "GET", &at("export"), None).await;
    assert_eq!(status, StatusCode::OK);
    for key in [
        "analysis",
        "retrieval_log",
        "prompt_versions",
        "translations",
        "review",
        "markdown",
    ] {
        assert!(!w[key].is_null(), "{key}");
    }

    let (status, _, text) = call(&app, "POST", "/kb/candidates", Some(json!({"session_ids": [id]}))).await;
    assert_eq!(status, StatusCode::OK);
    let line: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(line["target_zh"], "看书的学生向老师提问了。");
    assert_eq!(line["meta"]["provenance_note"], id.as_str());
}

#[tokio::test]
async fn candidates_reject_open_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), None);
    let (_, s, _) = call(&app, "POST", "/sessions", Some(json!({"sl": common::SL}))).await;
    let (status, e, _) = call(
        &app,
        "POST",
        "/kb/candidates",
        Some(json!({"session_ids": [s["session_id"]]})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e["code"], "not_archived");
    let (status, _, text) = call(&app, "POST", "/kb/candidates", Some(json!({"session_ids": []}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(text.is_empty());
}

#[tokio::test]
async fn kb_status_and_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<h1>workbench</h1>").unwrap();
    let app = app(dir.path(), Some(assets.path().to_path_buf()));

    let (status, kb, _) = call(&app, "GET", "/kb/status", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(kb["loaded"], true);
    assert_eq!(kb["size"], 8);
    assert_eq!(kb["k"], 5);
    assert_eq!(kb["encoder_id"], "mock-ngram:d64:s7");

    let (status, _, text) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(text, "<h1>workbench</h1>");
    let (status, _, _) = call(&app, "GET", "/missing.js", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn serves_on_a_real_socket() {
    let dir = tempfile::tempdir().unwrap();
    let wb = Arc::new(common::workbench(dir.path()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(wb, None)).await.unwrap() });

    let response = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        write!(
            stream,
            "GET /kb/status HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"
        )
        .unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(response.starts_with("HTTP/1.1 200"));
    assert!(response.contains("\"loaded\":true"));
}
