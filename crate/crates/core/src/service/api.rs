//! HTTP + JSON API and the server-sent event stream.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Serialize;
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::watch;

use crate::analytics::RateScale;
use crate::clock::{day_start, Timestamp};
use crate::gateway::ControlCommand;
use crate::store::StoreError;

use super::alerts::{AlertRequest, ALL_HOUSES};
use super::{ServiceError, ServiceEvent, ServiceState};

type Params = Query<HashMap<String, String>>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownHouse(_) | ServiceError::Store(StoreError::UnknownHouse(_)) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_)
            | ServiceError::Analytics(_)
            | ServiceError::Store(StoreError::InvalidBucket(_) | StoreError::InvalidWindow(..)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::GatewayDown(_) => StatusCode::CONFLICT,
            ServiceError::BrokerUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ServiceError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body {
            error: String,
        }
        (self.status, Json(Body { error: self.message })).into_response()
    }
}

fn presented_token<'a>(headers: &'a HeaderMap, params: &'a HashMap<String, String>) -> Option<&'a str> {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .or_else(|| params.get("token").map(String::as_str))
}

fn is_admin(state: &ServiceState, token: Option<&str>) -> bool {
    match &state.config.admin_token {
        None => true,
        Some(admin) => token == Some(admin.as_str()),
    }
}

/// 404 for unknown houses, 401 when the house has a token that was not
/// presented (the admin token opens every house).
fn authorize_house(state: &ServiceState, house: &str, token: Option<&str>) -> Result<(), ApiError> {
    let entry = state
        .config
        .house(house)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown house {house}")))?;
    let admin_ok = state.config.admin_token.as_deref().is_some_and(|a| token == Some(a));
    match &entry.token {
        Some(t) if token != Some(t.as_str()) && !admin_ok => {
            Err(ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong house token"))
        }
        _ => Ok(()),
    }
}

fn param<T: std::str::FromStr>(params: &HashMap<String, String>, name: &str) -> Result<Option<T>, ApiError> {
    params
        .get(name)
        .map(|v| {
            v.parse()
                .map_err(|_| ApiError::unprocessable(format!("invalid {name}: {v:?}")))
        })
        .transpose()
}

async fn live(
    State(state): State<Arc<ServiceState>>,
    Path(house): Path<String>,
    headers: HeaderMap,
    Query(params): Params,
) -> Result<impl IntoResponse, ApiError> {
    authorize_house(&state, &house, presented_token(&headers, &params))?;
    Ok(Json(state.live_view(&house)?))
}

async fn history(
    State(state): State<Arc<ServiceState>>,
    Path(house): Path<String>,
    headers: HeaderMap,
    Query(params): Params,
) -> Result<impl IntoResponse, ApiError> {
    authorize_house(&state, &house, presented_token(&headers, &params))?;
    let now = state.clock.now();
    let from: Timestamp = param(&params, "from")?.unwrap_or_else(|| day_start(now));
    let to: Timestamp = param(&params, "to")?.unwrap_or(now + 1);
    let bucket: i64 = param(&params, "bucket")?.unwrap_or(state.config.bucket_s);
    if from >= to {
        return Err(ApiError::unprocessable(format!("empty window [{from}, {to})")));
    }
    Ok(Json(state.history_view(&house, from, to, bucket)?))
}

async fn summary(State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    Json(state.summary())
}

async fn rates(State(state): State<Arc<ServiceState>>, Query(params): Params) -> Result<impl IntoResponse, ApiError> {
    let scale: RateScale = params
        .get("scale")
        .map(String::as_str)
        .unwrap_or("period")
        .parse()
        .map_err(ApiError::unprocessable)?;
    let from: Option<Timestamp> = param(&params, "from")?;
    let to: Option<Timestamp> = param(&params, "to")?;
    let window = match (from, to) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(ApiError::unprocessable("from and to go together")),
    };
    Ok(Json(state.rates(scale, window)?))
}

async fn status(State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    Json(state.statuses())
}

async fn ingest_stats(State(state): State<Arc<ServiceState>>) -> impl IntoResponse {
    Json(state.stats.snapshot())
}

#[derive(Serialize)]
struct ControlAck {
    status: &'static str,
    topic: String,
    command: ControlCommand,
}

async fn control(
    State(state): State<Arc<ServiceState>>,
    Path(house): Path<String>,
    headers: HeaderMap,
    Query(params): Params,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    authorize_house(&state, &house, presented_token(&headers, &params))?;
    let command = ControlCommand::decode(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let topic = state.send_control(&house, &command).await?;
    Ok(Json(ControlAck {
        status: "sent",
        topic,
        command,
    }))
}

async fn post_alert(
    State(state): State<Arc<ServiceState>>,
    headers: HeaderMap,
    Query(params): Params,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    if !is_admin(&state, presented_token(&headers, &params)) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "admin token required"));
    }
    let req: AlertRequest = serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    if !state.alerts.knows_house(&req.house) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown house {}", req.house),
        ));
    }
    #[derive(Serialize)]
    struct Dispatched {
        alert: super::AlertMessage,
        deliveries: Vec<super::DeliveryRecord>,
    }
    let (alert, deliveries) = state.alerts.dispatch(req).await;
    Ok(Json(Dispatched { alert, deliveries }))
}

async fn list_alerts(
    State(state): State<Arc<ServiceState>>,
    headers: HeaderMap,
    Query(params): Params,
) -> Result<impl IntoResponse, ApiError> {
    let token = presented_token(&headers, &params);
    let house = params.get("house").map(String::as_str);
    match house {
        Some(h) if h != ALL_HOUSES => authorize_house(&state, h, token)?,
        _ if !is_admin(&state, token) => return Err(ApiError::new(StatusCode::UNAUTHORIZED, "admin token required")),
        _ => {}
    }
    Ok(Json(state.alerts.records(house.filter(|h| *h != ALL_HOUSES))))
}

fn json_event(name: &str, value: &impl Serialize) -> Event {
    Event::default()
        .event(name)
        .data(serde_json::to_string(value).unwrap_or_else(|_| "null".into()))
}

fn operation_events(state: &ServiceState) -> Vec<Event> {
    vec![
        json_event("status", &state.statuses()),
        json_event("summary", &state.summary()),
    ]
}

/// Push stream with the same payloads as the polling endpoints: `status`
/// and `summary` after every supervision pass, plus `live` for the house
/// named in `?house=` (token required) after each of its readings.
async fn events(
    State(state): State<Arc<ServiceState>>,
    headers: HeaderMap,
    Query(params): Params,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let house = params.get("house").cloned();
    if let Some(h) = &house {
        authorize_house(&state, h, presented_token(&headers, &params))?;
    }
    let rx = state.events.subscribe();
    let mut queue: VecDeque<Event> = operation_events(&state).into();
    if let Some(h) = &house {
        if let Ok(v) = state.live_view(h) {
            queue.push_back(json_event("live", &v));
        }
    }
    let stream = futures::stream::unfold(
        (rx, state, house, queue),
        |(mut rx, state, house, mut queue)| async move {
            loop {
                if let Some(ev) = queue.pop_front() {
                    return Some((Ok(ev), (rx, state, house, queue)));
                }
                match rx.recv().await {
                    Ok(ServiceEvent::Status) => queue.extend(operation_events(&state)),
                    Ok(ServiceEvent::Telemetry { house: h, .. }) if house.as_deref() == Some(h.as_str()) => {
                        if let Ok(v) = state.live_view(&h) {
                            queue.push_back(json_event("live", &v));
                        }
                    }
                    Ok(ServiceEvent::Shutdown) | Err(RecvError::Closed) => return None,
                    Ok(_) | Err(RecvError::Lagged(_)) => {}
                }
            }
        },
    );
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/house/{id}/live", get(live))
        .route("/api/house/{id}/history", get(history))
        .route("/api/house/{id}/control", post(control))
        .route("/api/operation/summary", get(summary))
        .route("/api/operation/rates", get(rates))
        .route("/api/operation/status", get(status))
        .route("/api/operation/ingest", get(ingest_stats))
        .route("/api/alerts", post(post_alert).get(list_alerts))
        .route("/api/events", get(events))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<ServiceState>, mut shutdown: watch::Receiver<bool>) {
    let app = router(state);
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = shutdown.wait_for(|s| *s).await;
        })
        .await;
    if let Err(e) = result {
        tracing::error!("http server failed: {e}");
    }
}
