use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::cors::CorsLayer;

use tod_core::{step_turn, DialogueSystem, Session, TurnResult};

use crate::args::ServeArgs;
use crate::commands::load_system;

type SessionMap = HashMap<String, Arc<Mutex<Session>>>;

#[derive(Clone)]
pub struct AppState {
    system: Arc<DialogueSystem>,
    sessions: Arc<RwLock<SessionMap>>,
    control_default: bool,
    next_seed: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(system: DialogueSystem, control_default: bool, first_seed: u64) -> Self {
        AppState {
            system: Arc::new(system),
            sessions: Arc::default(),
            control_default,
            next_seed: Arc::new(AtomicU64::new(first_seed)),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(id: &str) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: format!("no session {id}"),
        }
    }
}

/// Parses a JSON body; an empty body reads as `T::default()` when given.
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8], empty: Option<T>) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        if let Some(d) = empty {
            return Ok(d);
        }
    }
    serde_json::from_slice(body).map_err(|e| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        message: format!("invalid request body: {e}"),
    })
}

impl From<tod_core::Error> for ApiError {
    fn from(e: tod_core::Error) -> Self {
        let status = match e {
            tod_core::Error::Contract(_) | tod_core::Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub control: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub control: bool,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub utterance: String,
    /// Sets the session's control flag for this and later turns.
    pub control: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
    pub control_default: bool,
    pub model: String,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .fallback(|| async {
            ApiError {
                status: StatusCode::NOT_FOUND,
                message: "no such route".into(),
            }
        })
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        sessions: s.sessions.read().expect("session map poisoned").len(),
        control_default: s.control_default,
        model: s.system.model.param_hash(None),
    })
}

async fn create_session(State(s): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req: CreateSession = parse_body(&body, Some(CreateSession::default()))?;
    let id = uuid::Uuid::new_v4().to_string();
    let control = req.control.unwrap_or(s.control_default);
    let seed = req.seed.unwrap_or_else(|| s.next_seed.fetch_add(1, Ordering::Relaxed));
    let session = Session::new(id.clone(), &s.system.ontology, control, seed);
    s.sessions
        .write()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(Created { id, control, seed })))
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    let session = s.session(&id)?;
    let guard = session.lock().await;
    Ok(Json(guard.clone()))
}

async fn delete_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    s.sessions
        .write()
        .expect("session map poisoned")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found(&id))
}

async fn post_turn(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<TurnResult>, ApiError> {
    let req: TurnRequest = parse_body(&body, None)?;
    let session = s.session(&id)?;
    let mut guard = session.lock_owned().await;
    let system = s.system.clone();
    let result = tokio::task::spawn_blocking(move || {
        if let Some(c) = req.control {
            guard.control = c;
        }
        step_turn(&system, &mut guard, &req.utterance)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
    })??;
    Ok(Json(result))
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let system = load_system(&a.model, &a.corpus.corpus, &a.control)?;
    let state = AppState::new(system, a.control.control.enabled(), a.seed);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
