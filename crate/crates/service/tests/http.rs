//! Endpoint tests driven through the router without a socket, plus one run
//! of the real server.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value as Json};
use taskflow_core::corpus::{save_dialogues, Speaker};
use taskflow_core::engine::{Engine, FixedClock};
use taskflow_core::synth::{random_flow, synthetic_corpus, ActionSet, CorpusShape, FlowShape};
use taskflow_core::taskflow::{ApiSpec, Condition, Edge, FieldDef, Node, NodeKind, Stub, TaskFlow};
use taskflow_core::value::{Value, ValueType};
use taskflow_service::state::Artifacts;
use taskflow_service::{router, serve, AppState, ServiceConfig};
use tower::ServiceExt;

const NOW: i64 = 1_700_000_000;

fn state_for(tf: TaskFlow, set: &ActionSet, config: ServiceConfig) -> Arc<AppState> {
    let artifacts = Artifacts::build(&set.actions, &set.store, &config).unwrap();
    Arc::new(AppState::new(config, tf, artifacts, Arc::new(FixedClock(NOW))).unwrap())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Json>) -> (StatusCode, Json) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header("content-type", "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    // extractor rejections answer in plain text
    let json = serde_json::from_slice(&bytes).unwrap_or_else(|_| Json::String(String::from_utf8_lossy(&bytes).into()));
    (status, json)
}

/// Greeting, one user action, a status lookup and two staff answers.
fn lock_flow() -> (TaskFlow, ActionSet) {
    let set = ActionSet::from_texts([
        ("user_001".to_string(), Speaker::User, vec!["my car is not locked".to_string()]),
        ("staff_001".to_string(), Speaker::Staff, vec!["hello what can i do for you".to_string()]),
        ("staff_002".to_string(), Speaker::Staff, vec!["your car has been locked successfully".to_string()]),
        ("staff_003".to_string(), Speaker::Staff, vec!["please try to lock it again in the app".to_string()]),
    ]);
    let text = |a: &str| set.catalog.canonical_text(a).map(str::to_string);
    let node = |id: &str, kind, action: Option<&str>, api: Option<&str>| Node {
        id: id.into(),
        kind,
        action_id: action.map(str::to_string),
        api: api.map(str::to_string),
        text: action.and_then(text),
        end: false,
    };
    let status = |lit: bool| {
        serde_json::from_value::<Condition>(json!({"path": "api.Check_Status.status", "op": "==", "lit": lit})).unwrap()
    };
    let edge = |id: &str, from: &str, to: &str, condition: Condition, prob: Option<f64>| Edge {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        condition,
        prob,
    };
    let tf = TaskFlow {
        version: 1,
        scenario: "car".into(),
        nodes: vec![
            node("n0", NodeKind::Root, None, None),
            node("n1", NodeKind::StaffAction, Some("staff_001"), None),
            node("n2", NodeKind::UserAction, Some("user_001"), None),
            node("n3", NodeKind::ApiCall, None, Some("Check_Status")),
            node("n4", NodeKind::StaffAction, Some("staff_002"), None),
            node("n5", NodeKind::StaffAction, Some("staff_003"), None),
        ],
        edges: vec![
            edge("e1", "n0", "n1", Condition::MaxProb, Some(1.0)),
            edge("e2", "n1", "n2", Condition::MaxProb, Some(1.0)),
            edge("e3", "n2", "n3", Condition::Always, None),
            edge("e4", "n3", "n4", status(true), Some(0.5)),
            edge("e5", "n3", "n5", status(false), Some(0.5)),
        ],
        api_specs: vec![ApiSpec {
            name: "Check_Status".into(),
            params: vec![],
            response_fields: vec![FieldDef::new("status", ValueType::Boolean)],
            stub: Stub {
                rules: vec![],
                default: [("status".to_string(), Value::Bool(true))].into(),
            },
        }],
    };
    (tf, set)
}

#[tokio::test]
async fn health_and_taskflow_reads() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf.clone(), &set, ServiceConfig::default()));
    let (status, body) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["taskflow_version"], 1);

    let (status, body) = call(&app, Method::GET, "/api/v1/taskflow", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, serde_json::to_value(&tf).unwrap());
    let (status, _) = call(&app, Method::GET, "/api/v1/taskflow?version=1", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, Method::GET, "/api/v1/taskflow?version=9", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains('9'));
}

#[tokio::test]
async fn chat_round_trip() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf, &set, ServiceConfig::default()));
    let (status, created) = call(&app, Method::POST, "/api/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["turn"]["responses"], json!(["hello what can i do for you"]));
    let id = created["session_id"].as_str().unwrap().to_string();

    let uri = format!("/api/v1/sessions/{id}/messages");
    let (status, turn) = call(&app, Method::POST, &uri, Some(json!({"text": "my car is not locked"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(turn["responses"], json!(["your car has been locked successfully"]));
    assert_eq!(turn["closed"], true);
    assert_eq!(turn["api_calls"][0]["name"], "Check_Status");

    let (status, session) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let texts: Vec<&str> = session["transcript"].as_array().unwrap().iter().map(|t| t["text"].as_str().unwrap()).collect();
    assert_eq!(
        texts,
        ["hello what can i do for you", "my car is not locked", "your car has been locked successfully"]
    );
    assert_eq!(session["closed"], true);

    let (status, _) = call(&app, Method::POST, &uri, Some(json!({"text": "hello"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::GET, "/api/v1/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::POST, "/api/v1/sessions/nope/messages", Some(json!({"text": "x"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn put_flips_branch_and_pins_old_sessions() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf, &set, ServiceConfig::default()));
    let (_, old) = call(&app, Method::POST, "/api/v1/sessions", None).await;

    let (_, mut doc) = call(&app, Method::GET, "/api/v1/taskflow", None).await;
    for e in doc["edges"].as_array_mut().unwrap() {
        if let Some(lit) = e["cond"].get("lit").and_then(Json::as_bool) {
            e["cond"]["lit"] = json!(!lit);
        }
    }
    let (status, body) = call(&app, Method::PUT, "/api/v1/taskflow", Some(doc.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"version": 2}));

    // the same stale document again
    let (status, body) = call(&app, Method::PUT, "/api/v1/taskflow", Some(doc)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!((body["current"].as_u64(), body["candidate"].as_u64()), (Some(2), Some(1)));

    let (_, new) = call(&app, Method::POST, "/api/v1/sessions", None).await;
    assert_eq!(new["taskflow_version"], 2);
    let say = |s: &Json| format!("/api/v1/sessions/{}/messages", s["session_id"].as_str().unwrap());
    let msg = Some(json!({"text": "my car is not locked"}));
    let (_, flipped) = call(&app, Method::POST, &say(&new), msg.clone()).await;
    assert_eq!(flipped["responses"], json!(["please try to lock it again in the app"]));
    let (_, pinned) = call(&app, Method::POST, &say(&old), msg).await;
    assert_eq!(pinned["responses"], json!(["your car has been locked successfully"]));
}

#[tokio::test]
async fn invalid_tree_is_rejected_with_issues() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf, &set, ServiceConfig::default()));
    let (_, mut doc) = call(&app, Method::GET, "/api/v1/taskflow", None).await;
    // orphan the API node and point an edge nowhere
    let edges = doc["edges"].as_array_mut().unwrap();
    edges.retain(|e| e["id"] != "e3");
    edges.push(json!({"id": "e9", "from": "n1", "to": "n42", "cond": "maxprob"}));
    let (status, body) = call(&app, Method::PUT, "/api/v1/taskflow", Some(doc)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let codes: Vec<&str> = body["issues"].as_array().unwrap().iter().map(|i| i["code"].as_str().unwrap()).collect();
    assert!(!codes.is_empty());
    let nodes: Vec<&str> = body["issues"].as_array().unwrap().iter().filter_map(|i| i["node"].as_str()).collect();
    let edges: Vec<&str> = body["issues"].as_array().unwrap().iter().filter_map(|i| i["edge"].as_str()).collect();
    assert!(nodes.contains(&"n3"), "{body}");
    assert!(edges.contains(&"e9"), "{body}");
    let (_, health) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(health["taskflow_version"], 1);

    let (status, _) = call(&app, Method::PUT, "/api/v1/taskflow", Some(json!({"nodes": 3}))).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn actions_are_listed() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf, &set, ServiceConfig::default()));
    let (status, body) = call(&app, Method::GET, "/api/v1/actions", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = body.as_array().unwrap();
    assert_eq!(list.len(), 4);
    let user = list.iter().find(|a| a["id"] == "user_001").unwrap();
    assert_eq!(user["role"], "user");
    assert_eq!(user["canonical_text"], "my car is not locked");
    assert_eq!(user["members"], 1);
}

/// Every response equals the serialized result of the same calls made on an
/// engine directly.
#[tokio::test]
async fn http_adds_no_behavior() {
    for seed in 0..12u64 {
        let flow = random_flow(seed, &FlowShape::default());
        let config = ServiceConfig::default();
        let state = state_for(flow.taskflow.clone(), &flow.actions, config.clone());
        let app = router(Arc::clone(&state));
        let artifacts = Artifacts::build(&flow.actions.actions, &flow.actions.store, &config).unwrap();
        let engine = Engine::new(
            Arc::new(flow.taskflow.clone()),
            artifacts.index,
            config.param_defs.clone(),
            config.engine_config(),
            Arc::new(FixedClock(NOW)),
        )
        .unwrap();

        let mut inputs: Vec<String> = flow.taskflow.nodes.iter().filter_map(|n| n.text.clone()).collect();
        inputs.push("zzz qqq".into());
        inputs.push("user id 7123".into());
        let (_, created) = call(&app, Method::POST, "/api/v1/sessions", None).await;
        let id = created["session_id"].as_str().unwrap().to_string();
        let (mut direct, opening) = engine.create_session(id.clone());
        assert_eq!(created["turn"], serde_json::to_value(&opening).unwrap());

        let uri = format!("/api/v1/sessions/{id}/messages");
        for step in 0..10usize {
            let text = &inputs[(seed as usize * 7 + step * 5) % inputs.len()];
            let (status, body) = call(&app, Method::POST, &uri, Some(json!({ "text": text }))).await;
            match engine.step(&mut direct, text) {
                Ok(turn) => {
                    assert_eq!(status, StatusCode::OK);
                    assert_eq!(body, serde_json::to_value(&turn).unwrap(), "seed {seed} step {step}");
                }
                Err(_) => {
                    assert_eq!(status, StatusCode::CONFLICT);
                    break;
                }
            }
        }
        let (_, session) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}"), None).await;
        assert_eq!(session, serde_json::to_value(&direct).unwrap(), "seed {seed}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_stay_apart() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf, &set, ServiceConfig::default()));
    let mut handles = Vec::new();
    for i in 0..24 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            let (_, created) = call(&app, Method::POST, "/api/v1/sessions", None).await;
            let id = created["session_id"].as_str().unwrap().to_string();
            let text = if i % 2 == 0 { "my car is not locked" } else { "gibberish words here" };
            call(&app, Method::POST, &format!("/api/v1/sessions/{id}/messages"), Some(json!({ "text": text }))).await;
            let (_, session) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}"), None).await;
            (i, id, session)
        }));
    }
    let mut ids = std::collections::BTreeSet::new();
    for h in handles {
        let (i, id, session) = h.await.unwrap();
        assert!(ids.insert(id.clone()));
        assert_eq!(session["id"], id.as_str());
        let transcript = session["transcript"].as_array().unwrap();
        assert_eq!(transcript.len(), 3);
        if i % 2 == 0 {
            assert_eq!(session["closed"], true);
            assert_eq!(session["bindings"]["api.Check_Status.status"], true);
        } else {
            assert_eq!(transcript[1]["text"], "gibberish words here");
            assert_eq!(session["closed"], false);
            assert!(session.get("bindings").is_none_or(|b| b.as_object().is_none_or(|m| m.is_empty())));
        }
    }
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (tf, set) = lock_flow();
    let state = state_for(tf, &set, ServiceConfig::default());
    let app = router(Arc::clone(&state));
    let (_, created) = call(&app, Method::POST, "/api/v1/sessions", None).await;
    let id = created["session_id"].as_str().unwrap();
    assert_eq!(state.expire_idle(Duration::from_secs(1800)), 0);
    tokio::time::sleep(Duration::from_millis(20)).await;
    assert_eq!(state.expire_idle(Duration::from_millis(1)), 1);
    assert_eq!(state.session_count(), 0);
    let (status, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

fn pipeline_config(dir: &std::path::Path) -> ServiceConfig {
    let corpus = synthetic_corpus(
        3,
        &CorpusShape {
            user_actions: 6,
            staff_actions: 6,
            utterances: 800,
            ..CorpusShape::default()
        },
    );
    let path = dir.join("corpus.jsonl");
    save_dialogues(&path, &corpus.dialogues).unwrap();
    let mut config = ServiceConfig {
        corpus: Some(path),
        artifact_dir: dir.join("artifacts"),
        ..ServiceConfig::default()
    };
    config.pipeline.user_k = 6;
    config.pipeline.staff_k = 6;
    config
}

#[tokio::test]
async fn pipeline_run_installs_a_new_version() {
    let dir = tempfile::tempdir().unwrap();
    let config = pipeline_config(dir.path());
    // first load builds the artifacts itself
    let state = Arc::new(AppState::load(config.clone()).unwrap());
    assert!(config.artifact_dir.join("taskflow.json").exists());
    let app = router(Arc::clone(&state));
    let (_, before) = call(&app, Method::GET, "/api/v1/taskflow", None).await;

    let (status, summary) = call(&app, Method::POST, "/api/v1/pipeline/run", None).await;
    assert_eq!(status, StatusCode::OK, "{summary}");
    assert_eq!(summary["taskflow_version"], 2);
    assert_eq!(summary["metadata"]["params"]["user_k"], 6);
    assert_eq!(summary["metadata"]["counts"]["user_actions"], 6);
    let (_, after) = call(&app, Method::GET, "/api/v1/taskflow", None).await;
    assert_eq!(after["version"], 2);
    // same seed and corpus: same tree under a new version
    assert_eq!(after["nodes"], before["nodes"]);
    assert_eq!(after["edges"], before["edges"]);
    let (_, actions) = call(&app, Method::GET, "/api/v1/actions", None).await;
    assert_eq!(actions.as_array().unwrap().len(), 12);
    let (status, created) = call(&app, Method::POST, "/api/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["taskflow_version"], 2);
}

#[tokio::test]
async fn pipeline_run_without_corpus_is_a_client_error() {
    let (tf, set) = lock_flow();
    let app = router(state_for(tf, &set, ServiceConfig::default()));
    let (status, body) = call(&app, Method::POST, "/api/v1/pipeline/run", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("corpus"));
}

#[tokio::test]
async fn real_server_answers_and_shuts_down() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let (tf, set) = lock_flow();
    let state = state_for(tf, &set, ServiceConfig::default());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(state, listener, async {
        let _ = stopped.await;
    }));

    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"GET /healthz HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).await.unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"ok\""));

    stop.send(()).unwrap();
    tokio::time::timeout(Duration::from_secs(5), server).await.unwrap().unwrap().unwrap();
}
