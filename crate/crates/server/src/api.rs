//! HTTP+JSON API: cart health, control, live preview, patient metrics and
//! annotations.
//!
//! | Route | |
//! |---|---|
//! | `GET /carts` | health of every known cart |
//! | `GET /carts/{id}/health` | one cart |
//! | `POST /carts/{id}/control` | body `{"command":"Pan","delta":30}`; returns the acknowledged state |
//! | `GET /carts/{id}/preview` | server-sent events: `frame` (latest RGB, ≤ 1 FPS), final `status` when the cart goes offline |
//! | `GET /patients/{study_id}/metrics[?metric=noise]` | MetricPoint array |
//! | `POST /annotations/{face\|depth}` | append an annotation |
//! | `GET /annotations/{face\|depth}/queue` | ranked active-learning queue |
//! | `GET /annotations/summary?week_start=ms` | weekly face-annotation summary |

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use icu_analytics::{AlConfig, AnnotationStore, AuAnnotation, BoxAnnotation, Task};
use icu_core::ControlCommand;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::control::{ControlError, ControlHub, CONTROL_TIMEOUT};
use crate::health::{HealthRegistry, HealthState};
use crate::preview::PreviewHub;

#[derive(Clone)]
pub struct ApiState {
    pub health: Arc<HealthRegistry>,
    pub control: Arc<ControlHub>,
    pub preview: Arc<PreviewHub>,
    /// Holds `<study_id>.jsonl` metric files.
    pub metrics_dir: PathBuf,
    pub annotations: Arc<AnnotationStore>,
    pub al: AlConfig,
    /// How often an open preview stream re-checks cart health.
    pub preview_poll: Duration,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(what: String) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what)
}

fn bad_request(e: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.to_string())
}

fn internal(e: impl ToString) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/carts", get(list_carts))
        .route("/carts/{id}/health", get(cart_health))
        .route("/carts/{id}/control", post(control))
        .route("/carts/{id}/preview", get(preview))
        .route("/patients/{study_id}/metrics", get(metrics))
        .route("/annotations/summary", get(summary))
        .route("/annotations/{task}", post(annotate))
        .route("/annotations/{task}/queue", get(queue))
        .with_state(state)
}

async fn list_carts(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.health.carts())
}

async fn cart_health(State(s): State<ApiState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    s.health.cart(&id).map(Json).ok_or_else(|| not_found(format!("unknown cart {id}")))
}

#[derive(Serialize, Deserialize)]
pub struct ControlResponse {
    pub cart_id: String,
    pub state: icu_core::CartState,
}

async fn control(State(s): State<ApiState>, Path(id): Path<String>, Json(cmd): Json<ControlCommand>) -> Result<Json<ControlResponse>, ApiError> {
    let hub = s.control.clone();
    let cart = id.clone();
    let result = tokio::task::spawn_blocking(move || hub.send(&cart, cmd, CONTROL_TIMEOUT))
        .await
        .map_err(internal)?;
    match result {
        Ok(state) => Ok(Json(ControlResponse { cart_id: id, state })),
        Err(e @ ControlError::Offline(_)) => Err(ApiError(StatusCode::CONFLICT, e.to_string())),
        Err(e @ ControlError::Timeout(..)) => Err(ApiError(StatusCode::GATEWAY_TIMEOUT, e.to_string())),
        Err(e @ ControlError::Rejected { .. }) => Err(ApiError(StatusCode::BAD_GATEWAY, e.to_string())),
    }
}

fn offline_event(cart: &str) -> Event {
    Event::default()
        .event("status")
        .data(json!({ "cart_id": cart, "state": HealthState::Offline }).to_string())
}

async fn preview(State(s): State<ApiState>, Path(id): Path<String>) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    if s.health.cart(&id).is_none() {
        return Err(not_found(format!("unknown cart {id}")));
    }
    let rx = s.preview.subscribe(&id);
    let init = (rx, s.health.clone(), id, s.preview_poll, true, false);
    let stream = futures::stream::unfold(init, |(mut rx, health, cart, poll, first, done)| async move {
        if done {
            return None;
        }
        if first {
            // deliver the current frame right away, if any
            let current = rx.borrow_and_update().clone();
            if let Some(f) = current {
                let ev = Event::default().event("frame").data(serde_json::to_string(&*f).expect("frame serializes"));
                return Some((Ok(ev), (rx, health, cart, poll, false, false)));
            }
        }
        loop {
            if !health.is_online(&cart) {
                return Some((Ok(offline_event(&cart)), (rx, health, cart, poll, false, true)));
            }
            tokio::select! {
                changed = rx.changed() => {
                    if changed.is_err() {
                        return Some((Ok(offline_event(&cart)), (rx, health, cart, poll, false, true)));
                    }
                    let frame = rx.borrow_and_update().clone();
                    if let Some(f) = frame {
                        let ev = Event::default().event("frame").data(serde_json::to_string(&*f).expect("frame serializes"));
                        return Some((Ok(ev), (rx, health, cart, poll, false, false)));
                    }
                }
                _ = tokio::time::sleep(poll) => {}
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// Study ids are 16 lowercase hex characters; anything else is refused
/// before touching the filesystem.
pub fn valid_study_id(s: &str) -> bool {
    s.len() == icu_core::pseudonym::STUDY_ID_HEX_LEN && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Deserialize)]
struct MetricQuery {
    metric: Option<String>,
}

async fn metrics(State(s): State<ApiState>, Path(study): Path<String>, Query(q): Query<MetricQuery>) -> Result<Json<Vec<Value>>, ApiError> {
    if !valid_study_id(&study) {
        return Err(bad_request(format!("malformed study id {study:?}")));
    }
    let path = s.metrics_dir.join(format!("{study}.jsonl"));
    let text = match tokio::fs::read_to_string(&path).await {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(internal(e)),
    };
    let points = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter(|v| q.metric.as_deref().is_none_or(|m| v.get("metric").and_then(Value::as_str) == Some(m)))
        .collect();
    Ok(Json(points))
}

fn parse_task(t: &str) -> Result<Task, ApiError> {
    t.parse().map_err(|e: String| not_found(e))
}

async fn annotate(State(s): State<ApiState>, Path(task): Path<String>, Json(body): Json<Value>) -> Result<impl IntoResponse, ApiError> {
    let store = s.annotations.clone();
    let saved = match parse_task(&task)? {
        Task::Face => {
            let a: AuAnnotation = serde_json::from_value(body).map_err(bad_request)?;
            tokio::task::spawn_blocking(move || store.append_au(&a).map(|_| serde_json::to_value(a)))
        }
        Task::Depth => {
            let a: BoxAnnotation = serde_json::from_value(body).map_err(bad_request)?;
            tokio::task::spawn_blocking(move || store.append_box(&a).map(|_| serde_json::to_value(a)))
        }
    }
    .await
    .map_err(internal)?
    .map_err(|e| match e {
        icu_analytics::StoreError::Invalid(e) => bad_request(e),
        other => internal(other),
    })?
    .map_err(internal)?;
    Ok((StatusCode::CREATED, Json(saved)))
}

async fn queue(State(s): State<ApiState>, Path(task): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let task = parse_task(&task)?;
    let store = s.annotations.clone();
    let cfg = s.al.clone();
    let entries = tokio::task::spawn_blocking(move || -> Result<_, icu_analytics::StoreError> {
        Ok(match task {
            Task::Face => icu_analytics::face_queue(&store.load_au()?, &store.load_au_predictions()?, &cfg).entries,
            Task::Depth => icu_analytics::depth_queue(&store.load_box()?, &store.load_box_predictions()?, &Default::default(), &cfg),
        })
    })
    .await
    .map_err(internal)?
    .map_err(internal)?;
    Ok(Json(entries))
}

#[derive(Deserialize)]
struct WeekQuery {
    week_start: i64,
}

async fn summary(State(s): State<ApiState>, Query(q): Query<WeekQuery>) -> Result<impl IntoResponse, ApiError> {
    let store = s.annotations.clone();
    let all = tokio::task::spawn_blocking(move || store.load_au()).await.map_err(internal)?.map_err(internal)?;
    Ok(Json(icu_analytics::weekly_summary(&all, q.week_start)))
}
