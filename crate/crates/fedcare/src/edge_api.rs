//! Edge node HTTP service consumed by the dashboard.

use crate::cloud_api::{bearer, blocking, error_response};
use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{delete, get, post};
use axum::Router;
use fedcare_core::domain::{ModelKey, Pseudonym, OVERALL_QOL};
use fedcare_core::edge::EdgeNode;
use fedcare_core::{Error, Result};
use serde::Deserialize;
use std::collections::BTreeSet;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::Duration;

pub const DEFAULT_HORIZON: usize = 3;
const MIN_SERVE_POLL_MS: u64 = 100;

#[derive(Clone)]
pub struct EdgeState {
    node: Arc<RwLock<EdgeNode>>,
    client_token: Option<String>,
}

impl EdgeState {
    pub fn new(node: Arc<RwLock<EdgeNode>>) -> Self {
        let client_token = node.read().unwrap_or_else(|p| p.into_inner()).config().client_token.clone();
        Self { node, client_token }
    }

    fn read(&self) -> RwLockReadGuard<'_, EdgeNode> {
        self.node.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, EdgeNode> {
        self.node.write().unwrap_or_else(|p| p.into_inner())
    }
}

/// Runs `ensure_model` one exchange at a time so readers are not blocked
/// while the edge waits on a federation round.
pub fn ensure_stepwise(state: &EdgeState, key: &ModelKey) -> Result<fedcare_core::edge::ModelSelection> {
    let mut job = state.write().ensure_begin(key)?;
    let (max_steps, poll_ms) = {
        let node = state.read();
        (node.config().ensure_max_steps, node.config().poll_interval_ms.max(MIN_SERVE_POLL_MS))
    };
    let mut steps = 0;
    while !state.write().ensure_step(&mut job)? {
        steps += 1;
        if steps >= max_steps {
            job.abandon(format!("gave up waiting for federation after {steps} polls"));
            break;
        }
        if job.waiting {
            std::thread::sleep(Duration::from_millis(poll_ms));
        }
    }
    state.write().ensure_finish(job)
}

fn pseudonym(s: &str) -> Result<Pseudonym> {
    Pseudonym::parse(s)
}

fn model_key(s: &str) -> Result<ModelKey> {
    s.parse()
}

fn target_list(raw: Option<&str>) -> Vec<String> {
    raw.map(|s| s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_owned).collect()).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
struct TimelineQuery {
    targets: Option<String>,
    horizon: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct WhatIfBody {
    #[serde(default)]
    intervention_ids: BTreeSet<String>,
    #[serde(default)]
    targets: Vec<String>,
    horizon: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct SuggestionQuery {
    target: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WearableBody {
    device_id: String,
}

async fn require_client_token(State(s): State<EdgeState>, req: Request, next: Next) -> Response {
    let Some(expected) = &s.client_token else { return next.run(req).await };
    if req.uri().path() == "/health" || bearer(req.headers()) == Some(expected.as_str()) {
        next.run(req).await
    } else {
        error_response(&Error::Auth("missing or invalid bearer token".into()))
    }
}

pub fn router(state: EdgeState) -> Router {
    Router::new()
        .route("/ingest/his", post(|State(s): State<EdgeState>, b: Bytes| blocking(move || s.write().ingest_his_bytes(&b))))
        .route(
            "/ingest/aggregator/{source}",
            post(|State(s): State<EdgeState>, Path(source): Path<String>, b: Bytes| {
                blocking(move || s.write().ingest_aggregator_bytes(&source, &b))
            }),
        )
        .route(
            "/models/{key}/ensure",
            post(|State(s): State<EdgeState>, Path(key): Path<String>| blocking(move || ensure_stepwise(&s, &model_key(&key)?))),
        )
        .route("/patients", get(|State(s): State<EdgeState>| blocking(move || Ok(s.read().patients()))))
        .route(
            "/patients/{p}/timeline",
            get(|State(s): State<EdgeState>, Path(p): Path<String>, Query(q): Query<TimelineQuery>| {
                blocking(move || {
                    let targets = target_list(q.targets.as_deref());
                    s.read().get_timeline(&pseudonym(&p)?, &targets, q.horizon.unwrap_or(DEFAULT_HORIZON))
                })
            }),
        )
        .route(
            "/patients/{p}/what-if",
            post(|State(s): State<EdgeState>, Path(p): Path<String>, b: Bytes| {
                blocking(move || {
                    let body: WhatIfBody = serde_json::from_slice(&b)?;
                    let horizon = body.horizon.unwrap_or(DEFAULT_HORIZON);
                    s.read().what_if(&pseudonym(&p)?, &body.intervention_ids, &body.targets, horizon)
                })
            }),
        )
        .route(
            "/patients/{p}/suggestions",
            get(|State(s): State<EdgeState>, Path(p): Path<String>, Query(q): Query<SuggestionQuery>| {
                blocking(move || {
                    let target = q.target.unwrap_or_else(|| OVERALL_QOL.to_owned());
                    s.read().suggest_interventions(&pseudonym(&p)?, &target)
                })
            }),
        )
        .route(
            "/patients/{p}/wearables",
            get(|State(s): State<EdgeState>, Path(p): Path<String>| blocking(move || s.read().wearables(&pseudonym(&p)?))).post(
                |State(s): State<EdgeState>, Path(p): Path<String>, b: Bytes| {
                    blocking(move || {
                        let body: WearableBody = serde_json::from_slice(&b)?;
                        let p = pseudonym(&p)?;
                        let mut node = s.write();
                        node.register_wearable(&p, &body.device_id)?;
                        node.wearables(&p)
                    })
                },
            ),
        )
        .route(
            "/patients/{p}/wearables/{device}",
            delete(|State(s): State<EdgeState>, Path((p, device)): Path<(String, String)>| {
                blocking(move || {
                    let p = pseudonym(&p)?;
                    let mut node = s.write();
                    node.deregister_wearable(&p, &device)?;
                    node.wearables(&p)
                })
            }),
        )
        .route("/health", get(|State(s): State<EdgeState>| blocking(move || Ok(s.read().health()))))
        .layer(middleware::from_fn_with_state(state.clone(), require_client_token))
        .with_state(state)
}
