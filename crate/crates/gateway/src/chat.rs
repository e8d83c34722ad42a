//! Multi-model chat sessions. One user message fans out to every participant
//! and the replies come back over a single SSE stream, tagged by participant
//! index.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use proctor_core::client::{ChatMessage, ClientError, EndpointConfig, InferenceClient};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use crate::error::{ApiError, ErrorCode};
use crate::AppState;

pub const MAX_PARTICIPANTS: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct Participant {
    pub index: usize,
    pub model_name: String,
    pub base_url: String,
}

#[derive(Debug)]
struct Session {
    endpoints: Vec<EndpointConfig>,
    transcripts: Vec<Vec<ChatMessage>>,
    busy: bool,
}

impl Session {
    fn participants(&self) -> Vec<Participant> {
        self.endpoints
            .iter()
            .enumerate()
            .map(|(index, ep)| Participant { index, model_name: ep.model_name.clone(), base_url: ep.base_url.clone() })
            .collect()
    }
}

#[derive(Default)]
pub struct Sessions {
    inner: Mutex<HashMap<String, Session>>,
    client: InferenceClient,
}

impl Sessions {
    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Session>> {
        self.inner.lock().expect("chat sessions poisoned")
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub participants: Vec<EndpointConfig>,
    #[serde(default)]
    pub system_prompt: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub content: String,
}

pub fn routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/api/chat/sessions", post(create_session))
        .route("/api/chat/sessions/{id}", get(get_session).delete(delete_session))
        .route("/api/chat/sessions/{id}/messages", post(post_message))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let n = req.participants.len();
    if n == 0 {
        return Err(ApiError::invalid("a session needs at least one participant"));
    }
    if n > MAX_PARTICIPANTS {
        return Err(ApiError::new(
            ErrorCode::TooManyParticipants,
            format!("{n} participants requested, at most {MAX_PARTICIPANTS} allowed"),
        ));
    }
    for (i, ep) in req.participants.iter().enumerate() {
        ep.validate().map_err(|e| ApiError::invalid(format!("participant {i}: {e}")))?;
        if ep.model_name.is_empty() {
            return Err(ApiError::invalid(format!("participant {i}: model_name must not be empty")));
        }
    }
    let seed: Vec<ChatMessage> = req.system_prompt.into_iter().filter(|s| !s.is_empty()).map(ChatMessage::system).collect();
    let session = Session { transcripts: vec![seed; n], endpoints: req.participants, busy: false };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let participants = session.participants();
    state.chats.lock().insert(id.clone(), session);
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id, "participants": participants }))))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let sessions = state.chats.lock();
    let s = sessions.get(&id).ok_or_else(|| ApiError::not_found(format!("session `{id}`")))?;
    Ok(Json(json!({
        "session_id": id,
        "participants": s.participants(),
        "transcripts": s.transcripts,
        "busy": s.busy,
    })))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.chats.lock().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("session `{id}`"))),
    }
}

fn error_event(participant: usize, e: &ClientError) -> Event {
    let code = match e {
        ClientError::Unreachable { .. } => ErrorCode::UpstreamUnreachable,
        _ => ErrorCode::UpstreamError,
    };
    let mut body = json!({
        "participant": participant,
        "code": code.as_str(),
        "http_status": code.status().as_u16(),
        "message": e.to_string(),
    });
    if let ClientError::StreamInterrupted { partial, .. } = e {
        body["partial"] = json!(partial);
    }
    Event::default().event("error").json_data(body).expect("serializable")
}

/// Streams one participant's reply into `tx`. Returns the full reply text.
async fn relay(
    client: InferenceClient,
    ep: EndpointConfig,
    index: usize,
    history: Vec<ChatMessage>,
    tx: mpsc::Sender<Event>,
) -> Result<String, ClientError> {
    let outcome = async {
        let stream = client.chat_stream(&ep, &history).await?;
        futures::pin_mut!(stream);
        let mut full = String::new();
        while let Some(fragment) = stream.next().await {
            let fragment = fragment?;
            full.push_str(&fragment);
            // a gone client is not a failure; keep collecting for the transcript
            let ev = Event::default().event("delta").json_data(json!({ "participant": index, "content": fragment }));
            let _ = tx.send(ev.expect("serializable")).await;
        }
        Ok(full)
    }
    .await;
    let ev = match &outcome {
        Ok(full) => Event::default().event("done").json_data(json!({ "participant": index, "content": full })).expect("serializable"),
        Err(e) => error_event(index, e),
    };
    let _ = tx.send(ev).await;
    outcome
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let Json(msg) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    if msg.content.trim().is_empty() {
        return Err(ApiError::invalid("content must not be empty"));
    }
    let (endpoints, histories) = {
        let mut sessions = state.chats.lock();
        let s = sessions.get_mut(&id).ok_or_else(|| ApiError::not_found(format!("session `{id}`")))?;
        if s.busy {
            return Err(ApiError::new(ErrorCode::SessionBusy, "a turn is already in progress for this session"));
        }
        s.busy = true;
        for t in &mut s.transcripts {
            t.push(ChatMessage::user(msg.content.clone()));
        }
        (s.endpoints.clone(), s.transcripts.clone())
    };

    let (tx, rx) = mpsc::channel::<Event>(256);
    let st = state.clone();
    tokio::spawn(async move {
        let client = st.chats.client.clone();
        let relays = endpoints
            .into_iter()
            .zip(histories)
            .enumerate()
            .map(|(i, (ep, history))| relay(client.clone(), ep, i, history, tx.clone()));
        let results = futures::future::join_all(relays).await;

        let failed: Vec<usize> = results.iter().enumerate().filter(|(_, r)| r.is_err()).map(|(i, _)| i).collect();
        {
            let mut sessions = st.chats.lock();
            // the session may have been deleted mid-turn
            if let Some(s) = sessions.get_mut(&id) {
                for (t, r) in s.transcripts.iter_mut().zip(&results) {
                    if let Ok(reply) = r {
                        t.push(ChatMessage::assistant(reply.clone()));
                    }
                }
                s.busy = false;
            }
        }
        let end = json!({ "participants": results.len(), "failed": failed });
        let _ = tx.send(Event::default().event("end").json_data(end).expect("serializable")).await;
    });

    let events = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|ev| (Ok(ev), rx)) });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
