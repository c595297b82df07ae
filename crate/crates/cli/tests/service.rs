use std::path::PathBuf;
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tod_cli::server::{router, AppState};
use tod_core::{CorpusCache, DialogueSystem, EncoderConfig, Model, ModelConfig, MultiWozVersion, Ontology};

fn system() -> DialogueSystem {
    static SYS: OnceLock<DialogueSystem> = OnceLock::new();
    SYS.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/multiwoz");
        let cache = CorpusCache::build(dir, MultiWozVersion::V21, Ontology::bundled()).unwrap();
        let enc = EncoderConfig {
            hidden_size: 8,
            num_heads: 2,
            num_layers: 1,
            intermediate_size: 16,
            dropout: 0.0,
            ..EncoderConfig::tiny(cache.tokenizer.vocab_size())
        };
        let mut cfg = ModelConfig::new(enc, &cache.ontology);
        cfg.max_action_len = 12;
        cfg.max_response_len = 16;
        let m = Model::new(cfg, 5).unwrap();
        DialogueSystem::new(m, cache.tokenizer, cache.ontology, cache.db)
    })
    .clone()
}

fn app() -> Router {
    router(AppState::new(system(), true, 100))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn create(app: &Router, body: Option<Value>) -> String {
    let (s, v) = call(app, Method::POST, "/sessions", body).await;
    assert_eq!(s, StatusCode::CREATED);
    v["id"].as_str().unwrap().to_string()
}

async fn turn(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/turns"), Some(body)).await
}

#[tokio::test]
async fn health_reports_ok() {
    let app = app();
    let (s, v) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["sessions"], 0);
    assert_eq!(v["control_default"], true);
    assert!(v["model"].as_str().is_some_and(|h| !h.is_empty()));
}

#[tokio::test]
async fn session_lifecycle() {
    let app = app();
    let id = create(&app, None).await;
    let (s, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["turn"], 0);
    assert_eq!(v["control"], true);
    assert_eq!(v["transcript"].as_array().unwrap().len(), 0);

    let (s, r) = turn(&app, &id, json!({"utterance": "i need a cheap hotel in the north"})).await;
    assert_eq!(s, StatusCode::OK);
    for key in [
        "domain_state",
        "belief_state",
        "db_summary",
        "actions_raw",
        "actions_controlled",
        "response_delex",
        "response",
    ] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["turn"], 1);

    let (_, v) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(v["transcript"].as_array().unwrap().len(), 1);
    assert_eq!(v["transcript"][0], r);
    assert_eq!(v["belief_state"], r["belief_state"]);

    let (_, h) = call(&app, Method::GET, "/health", None).await;
    assert_eq!(h["sessions"], 1);

    let (s, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, e) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(e["error"].as_str().unwrap().contains(&id));
    let (s, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_sessions_and_bad_bodies_are_rejected() {
    let app = app();
    let (s, _) = turn(&app, "missing", json!({"utterance": "hi"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = create(&app, None).await;
    let (s, _) = turn(&app, &id, json!({"text": "hi"})).await;
    assert!(s.is_client_error(), "{s}");
    let (s, _) = call(&app, Method::POST, "/sessions", Some(json!({"colour": 1}))).await;
    assert!(s.is_client_error(), "{s}");
    let (s, _) = call(&app, Method::GET, "/nowhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_utterance_is_a_valid_turn() {
    let app = app();
    let id = create(&app, None).await;
    let (s, r) = turn(&app, &id, json!({"utterance": ""})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["utterance"], "");
    assert_eq!(r["turn"], 1);
}

#[tokio::test]
async fn same_seed_replays_identically_and_sessions_are_isolated() {
    let app = app();
    let utterances = [
        "i want an expensive restaurant",
        "in the east please",
        "book a table for 7",
    ];
    let a = create(&app, Some(json!({"seed": 7}))).await;
    let b = create(&app, Some(json!({"seed": 7}))).await;
    let other = create(&app, Some(json!({"seed": 8}))).await;
    for u in utterances {
        let (_, ra) = turn(&app, &a, json!({"utterance": u})).await;
        turn(&app, &other, json!({"utterance": "i need a taxi to the station"})).await;
        let (_, rb) = turn(&app, &b, json!({"utterance": u})).await;
        assert_eq!(ra, rb);
    }
    let (_, ta) = call(&app, Method::GET, &format!("/sessions/{a}"), None).await;
    let (_, tb) = call(&app, Method::GET, &format!("/sessions/{b}"), None).await;
    assert_eq!(ta["transcript"], tb["transcript"]);
    assert_eq!(ta["turn"], 3);
}

#[tokio::test]
async fn control_flag_follows_the_session() {
    let app = app();
    let id = create(&app, Some(json!({"control": false}))).await;
    let (_, r) = turn(&app, &id, json!({"utterance": "tell me about a restaurant"})).await;
    assert_eq!(r["actions_raw"], r["actions_controlled"]);
    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s["control"], false);

    turn(&app, &id, json!({"utterance": "and its phone", "control": true})).await;
    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s["control"], true);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_turns_on_one_session_are_serialized() {
    let app = app();
    let id = create(&app, None).await;
    let calls: Vec<_> = (0..4)
        .map(|i| {
            let app = app.clone();
            let id = id.clone();
            tokio::spawn(async move { turn(&app, &id, json!({"utterance": format!("utterance {i}")})).await })
        })
        .collect();
    let mut turns: Vec<u64> = Vec::new();
    for c in calls {
        let (s, r) = c.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        turns.push(r["turn"].as_u64().unwrap());
    }
    turns.sort();
    assert_eq!(turns, [1, 2, 3, 4]);
    let (_, s) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(s["transcript"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn sessions_get_distinct_ids_and_seeds() {
    let app = app();
    let (_, a) = call(&app, Method::POST, "/sessions", None).await;
    let (_, b) = call(&app, Method::POST, "/sessions", None).await;
    assert_ne!(a["id"], b["id"]);
    assert_eq!(a["seed"], 100);
    assert_eq!(b["seed"], 101);
}
