use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};
use crate::results::StudyResults;
use crate::store::{ChoiceAck, QuestionView, StudyStore};

#[derive(Debug, Default, Deserialize)]
pub struct NewSession {
    #[serde(default)]
    pub participant_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub question_count: usize,
}

#[derive(Debug, Deserialize)]
pub struct Choice {
    pub position: usize,
}

/// Parses an optional JSON body; an empty body means defaults.
fn parse_body<T: Default + serde::de::DeserializeOwned>(body: &Bytes) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    Ok(serde_json::from_slice(body)?)
}

async fn create_session(State(store): State<Arc<StudyStore>>, body: Bytes) -> Result<impl IntoResponse> {
    let req: NewSession = parse_body(&body)?;
    let s = store.create_session(req.participant_label)?;
    let created = SessionCreated {
        session_id: s.session_id,
        question_count: store.question_count(),
    };
    Ok((StatusCode::CREATED, Json(created)))
}

fn parse_index(raw: &str) -> Result<usize> {
    raw.parse()
        .map_err(|_| StudyError::BadRequest(format!("question index {raw:?} is not a number")))
}

async fn question(
    State(store): State<Arc<StudyStore>>,
    Path((id, index)): Path<(String, String)>,
) -> Result<Json<QuestionView>> {
    Ok(Json(store.question(&id, parse_index(&index)?)?))
}

async fn choice(
    State(store): State<Arc<StudyStore>>,
    Path((id, index)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<ChoiceAck>> {
    let index = parse_index(&index)?;
    let c: Choice = serde_json::from_slice(&body)?;
    Ok(Json(store.submit(&id, index, c.position)?))
}

async fn results(State(store): State<Arc<StudyStore>>) -> Json<StudyResults> {
    Json(store.results())
}

async fn image(State(store): State<Arc<StudyStore>>, Path(file): Path<String>) -> Result<impl IntoResponse> {
    let bytes = store.image(&file)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

async fn not_found(uri: axum::http::Uri) -> StudyError {
    StudyError::NoRoute(uri.path().to_string())
}

pub fn router(store: Arc<StudyStore>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/questions/{index}", get(question))
        .route("/api/sessions/{id}/questions/{index}/choice", post(choice))
        .route("/api/results", get(results))
        .route("/images/{file}", get(image))
        .fallback(not_found)
        .with_state(store)
}

/// Serves until Ctrl-C.
pub async fn serve(store: Arc<StudyStore>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("study service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
