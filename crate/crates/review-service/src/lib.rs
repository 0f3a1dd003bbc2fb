//! Review service for merge proposals.
//!
//! Routes (all JSON, every response carries `schema_version`):
//!
//! | method | path                          | body / result                                        |
//! |--------|-------------------------------|------------------------------------------------------|
//! | GET    | `/sessions`                   | `{sessions: [id]}`                                   |
//! | GET    | `/sessions/{id}/pending`      | `{template_version, proposals: [ProposalView]}`      |
//! | POST   | `/sessions/{id}/decisions`    | `{proposal_id, decision, reviewer}` → `{template_version}` |
//! | GET    | `/sessions/{id}/template`     | `{template_version, template}`                       |
//!
//! Errors are `{schema_version, error, message}` with status 404 for an
//! unknown session or proposal, 409 when the proposal is no longer pending
//! or refers to a removed item, 400 for a malformed body.
//!
//! Decisions on one session are serialized through a mutex; the session's
//! append-only log is written before the response is sent.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crfforge::crfgen::{split_values, CrfItem, CrfTemplate};
use crfforge::revise::{
    list_sessions, session_path, Decision, MergeProposal, ReviewSession, ReviseError,
};

pub const SCHEMA_VERSION: u32 = 1;

/// How many example gold values per item a proposal view carries.
const EXAMPLES: usize = 5;

#[derive(Clone)]
pub struct AppState {
    dir: PathBuf,
    sessions: Arc<Mutex<HashMap<String, Arc<Mutex<ReviewSession>>>>>,
}

impl AppState {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            sessions: Arc::default(),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<ReviewSession>>, ApiError> {
        let mut open = self.sessions.lock().expect("session table");
        if let Some(s) = open.get(id) {
            return Ok(s.clone());
        }
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(ApiError::not_found(format!("no session {id}")));
        }
        let path = session_path(&self.dir, id);
        if !path.is_file() {
            return Err(ApiError::not_found(format!("no session {id}")));
        }
        let session = ReviewSession::open(&path).map_err(ApiError::from)?;
        let s = Arc::new(Mutex::new(session));
        open.insert(id.to_string(), s.clone());
        Ok(s)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", get(sessions))
        .route("/sessions/{id}/pending", get(pending))
        .route("/sessions/{id}/template", get(template))
        .route("/sessions/{id}/decisions", post(decide))
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(dir: PathBuf, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, dir = %dir.display(), "review service listening");
    axum::serve(listener, router(AppState::new(dir))).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message,
        }
    }
}

impl From<ReviseError> for ApiError {
    fn from(e: ReviseError) -> Self {
        let (status, kind) = match &e {
            ReviseError::UnknownProposal(_) => (StatusCode::NOT_FOUND, "unknown_proposal"),
            ReviseError::ProposalNotPending { .. } => (StatusCode::CONFLICT, "not_pending"),
            ReviseError::StaleProposal(_) => (StatusCode::CONFLICT, "stale_proposal"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "review session failure");
        }
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body =
            json!({"schema_version": SCHEMA_VERSION, "error": self.kind, "message": self.message});
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item: CrfItem,
    /// Gold values from documents of the group, first few distinct.
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalView {
    #[serde(flatten)]
    pub proposal: MergeProposal,
    pub source: Option<ItemView>,
    pub target: Option<ItemView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub template_version: u64,
    pub item_count: usize,
    pub proposals: Vec<ProposalView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub template_version: u64,
    pub template: CrfTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub proposal_id: String,
    pub decision: Decision,
    pub reviewer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub schema_version: u32,
    pub template_version: u64,
}

async fn sessions(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let ids = list_sessions(&state.dir).unwrap_or_default();
    Ok(Json(
        json!({"schema_version": SCHEMA_VERSION, "sessions": ids}),
    ))
}

fn item_view(session: &ReviewSession, id: &str) -> Option<ItemView> {
    let item = session.template.item(id)?.clone();
    let mut examples: Vec<String> = Vec::new();
    for f in &session.filled {
        if let Some(v) = f.values.get(id) {
            for part in split_values(v) {
                if examples.len() < EXAMPLES && !examples.iter().any(|e| e == part) {
                    examples.push(part.to_string());
                }
            }
        }
    }
    Some(ItemView { item, examples })
}

async fn pending(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<PendingResponse>, ApiError> {
    let s = state.session(&id)?;
    let session = s.lock().expect("session");
    let proposals = session
        .list_pending()
        .into_iter()
        .map(|p| ProposalView {
            proposal: p.clone(),
            source: item_view(&session, &p.source_item),
            target: item_view(&session, &p.target_item),
        })
        .collect();
    Ok(Json(PendingResponse {
        schema_version: SCHEMA_VERSION,
        session_id: id,
        template_version: session.template_version(),
        item_count: session.template.len(),
        proposals,
    }))
}

async fn template(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<TemplateResponse>, ApiError> {
    let s = state.session(&id)?;
    let session = s.lock().expect("session");
    Ok(Json(TemplateResponse {
        schema_version: SCHEMA_VERSION,
        session_id: id,
        template_version: session.template_version(),
        template: session.template.clone(),
    }))
}

async fn decide(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> Result<Json<DecisionResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        kind: "bad_request",
        message: e.body_text(),
    })?;
    if req.reviewer.trim().is_empty() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request",
            message: "reviewer must not be empty".into(),
        });
    }
    let s = state.session(&id)?;
    let mut session = s.lock().expect("session");
    let version = session.apply_decision(&req.proposal_id, req.decision, req.reviewer.trim())?;
    Ok(Json(DecisionResponse {
        schema_version: SCHEMA_VERSION,
        template_version: version,
    }))
}
