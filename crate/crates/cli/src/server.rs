//! HTTP front end. Every handler runs the shared core on a blocking thread,
//! so a request gives the same JSON as the matching CLI verb.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hybrag_core::{Error, Workspace};
use serde::Deserialize;
use serde_json::{json, Value};

type Shared = Arc<Workspace>;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::InvalidRequest { .. } | Error::Config { .. } | Error::MalformedInput(_) => {
            StatusCode::BAD_REQUEST
        }
        Error::UnknownChunk(_) | Error::UnknownTable(_) | Error::UnknownEntity(_) => StatusCode::NOT_FOUND,
        Error::ProviderUnavailable(_) | Error::FixtureMissing(_) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.0.to_string(), "key": self.0.key() });
        (status_for(&self.0), Json(body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(Error::invalid_request("body", e.to_string())))
}

async fn blocking<T, F>(ws: Shared, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Workspace) -> hybrag_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&ws))
        .await
        .map_err(|e| ApiError(Error::Parse(format!("worker panicked: {e}"))))?
        .map(Json)
        .map_err(ApiError)
}

async fn health(State(ws): State<Shared>) -> Json<Value> {
    Json(serde_json::to_value(ws.health()).unwrap_or(Value::Null))
}

async fn search(State(ws): State<Shared>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let body: Value = parse_body(&body)?;
    blocking(ws, move |ws| {
        let req = ws.request_from_json(body)?;
        Ok(serde_json::to_value(ws.search(&req)?)?)
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AskBody {
    question: String,
}

async fn ask(State(ws): State<Shared>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let AskBody { question } = parse_body(&body)?;
    blocking(ws, move |ws| Ok(serde_json::to_value(ws.ask(&question)?)?)).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportBody {
    query: String,
}

async fn report(State(ws): State<Shared>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let ReportBody { query } = parse_body(&body)?;
    blocking(ws, move |ws| Ok(serde_json::to_value(ws.report(&query)?)?)).await
}

pub fn router(ws: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/search", post(search))
        .route("/v1/ask", post(ask))
        .route("/v1/report", post(report))
        .with_state(ws)
}

/// Bind, report the bound address through `on_bound`, then serve until
/// ctrl-c.
pub async fn serve(
    ws: Workspace,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(Arc::new(ws)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
