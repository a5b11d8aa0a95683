//! Cloud coordinator HTTP service.

use crate::client::unroute;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use fedcare_core::cloud::Cloud;
use fedcare_core::protocol::ApiError;
use fedcare_core::Error;
use std::sync::{Arc, Mutex};

pub type SharedCloud = Arc<Mutex<Cloud>>;

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Validation(_) | Error::Decode(_) | Error::SchemaMismatch(_) | Error::Keygen(_) | Error::Merge(_) => StatusCode::BAD_REQUEST,
        Error::Auth(_) => StatusCode::UNAUTHORIZED,
        Error::FeatureDisabled(_) => StatusCode::FORBIDDEN,
        Error::NotFound(_) | Error::UnknownAggregator(_) => StatusCode::NOT_FOUND,
        Error::DuplicateEdge(_) | Error::StaleRound { .. } | Error::Protocol(_) => StatusCode::CONFLICT,
        Error::EmptyDataset | Error::Divergence(_) => StatusCode::UNPROCESSABLE_ENTITY,
        Error::Unreachable(_) => StatusCode::BAD_GATEWAY,
        Error::HeTimeout(_) | Error::SurrogateTrainingTimeout(_) => StatusCode::GATEWAY_TIMEOUT,
        Error::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn error_response(e: &Error) -> Response {
    (status_for(e), Json(ApiError::from(e))).into_response()
}

pub fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

/// Runs a blocking closure off the async workers and renders its result.
pub async fn blocking<T, F>(f: F) -> Response
where
    T: serde::Serialize + Send + 'static,
    F: FnOnce() -> fedcare_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error_response(&e),
        Err(join) => error_response(&Error::Storage(format!("handler panicked: {join}"))),
    }
}

async fn dispatch(cloud: SharedCloud, headers: HeaderMap, op: &'static str, params: Vec<(&'static str, String)>, body: Bytes) -> Response {
    let token = bearer(&headers).map(str::to_owned);
    blocking(move || {
        let request = unroute(op, &params, &body)?;
        cloud.lock().unwrap_or_else(|p| p.into_inner()).handle(token.as_deref(), request)
    })
    .await
}

pub fn router(cloud: SharedCloud) -> Router {
    Router::new()
        .route("/edges", post(|State(c): State<SharedCloud>, h: HeaderMap, b: Bytes| dispatch(c, h, "register", vec![], b)))
        .route(
            "/edges/{id}",
            delete(|State(c): State<SharedCloud>, h: HeaderMap, Path(id): Path<String>| {
                dispatch(c, h, "deregister", vec![("edge_id", id)], Bytes::new())
            }),
        )
        .route(
            "/federation/{key}/declare",
            post(|State(c): State<SharedCloud>, h: HeaderMap, Path(key): Path<String>, b: Bytes| {
                dispatch(c, h, "declare", vec![("model_key", key)], b)
            }),
        )
        .route(
            "/federation/{key}/update",
            post(|State(c): State<SharedCloud>, h: HeaderMap, Path(key): Path<String>, b: Bytes| {
                dispatch(c, h, "update", vec![("model_key", key)], b)
            }),
        )
        .route(
            "/models/{key}",
            get(|State(c): State<SharedCloud>, h: HeaderMap, Path(key): Path<String>| {
                dispatch(c, h, "fetch_models", vec![("model_key", key)], Bytes::new())
            }),
        )
        .route("/he/datasets", post(|State(c): State<SharedCloud>, h: HeaderMap, b: Bytes| dispatch(c, h, "upload_encrypted", vec![], b)))
        .route("/he/inference", post(|State(c): State<SharedCloud>, h: HeaderMap, b: Bytes| dispatch(c, h, "submit_inference", vec![], b)))
        .route(
            "/he/inference/{id}",
            get(|State(c): State<SharedCloud>, h: HeaderMap, Path(id): Path<String>| {
                dispatch(c, h, "poll_inference", vec![("request_id", id)], Bytes::new())
            }),
        )
        .route(
            "/surrogates/{key}",
            post(|State(c): State<SharedCloud>, h: HeaderMap, Path(key): Path<String>, b: Bytes| {
                dispatch(c, h, "surrogate", vec![("model_key", key)], b)
            }),
        )
        .route("/tasks", get(|State(c): State<SharedCloud>, h: HeaderMap| dispatch(c, h, "poll_tasks", vec![], Bytes::new())))
        .with_state(cloud)
}
