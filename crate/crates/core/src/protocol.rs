//! Edge-to-cloud messages, error encoding, clocks and the transport log.
//!
//! Every exchange is a request sent by an edge and a response on the same
//! connection. The cloud never initiates; [`EventLog`] records who opened
//! each connection so harnesses can assert it.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ModelKey, Timestamp};
use crate::error::{Error, Result};
use crate::explain::SurrogateKind;
use crate::ml::Model;
use crate::more::{Ciphertext, EncryptedDataset, EncryptedLinearModel};

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall-clock UTC seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs() as Timestamp).unwrap_or(0)
    }
}

/// Manually advanced clock shared between simulated nodes.
#[derive(Debug, Clone, Default)]
pub struct SimClock(Arc<AtomicI64>);

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        Self(Arc::new(AtomicI64::new(start)))
    }

    pub fn advance(&self, seconds: i64) {
        self.0.fetch_add(seconds, Ordering::SeqCst);
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FederationMode {
    Idle,
    Incremental,
    SemiConcurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub event: String,
    pub edge_id: String,
    pub at: Timestamp,
}

/// A versioned final global model as stored by the knowledge manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModelRecord {
    pub model_key: ModelKey,
    pub version: u64,
    /// Canonical model JSON, kept verbatim.
    pub model_bytes: String,
    pub contributing_edges: BTreeSet<String>,
    pub history: Vec<HistoryEvent>,
}

impl GlobalModelRecord {
    pub fn model(&self) -> Result<Model> {
        crate::ml::deserialize_model(self.model_bytes.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeModelRecord {
    pub model_key: ModelKey,
    pub version: u64,
    pub model: EncryptedLinearModel,
    /// Learning rate actually used after the randomization-safety clamp.
    pub effective_learning_rate: f64,
    pub epochs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRegistration {
    pub edge_id: String,
    pub bearer_token: String,
    pub status: EdgeStatus,
    pub joined_at: Timestamp,
    pub departed_at: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    Active,
    Departed,
}

/// What the coordinator tells a declaring edge to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub mode: FederationMode,
    pub session: u64,
    pub round: u32,
    pub rounds_total: u32,
    /// Model to train from; absent means train from scratch.
    pub base: Option<Model>,
    pub base_version: Option<u64>,
    /// The edge already submitted for this round and should poll again.
    pub submitted: bool,
    pub round_deadline: Option<Timestamp>,
    /// Set when the followed session has finished.
    pub global: Option<GlobalModelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum UpdateOutcome {
    /// Buffered; wait for the other trainers.
    Ack {
        round: u32,
    },
    NextRound {
        round: u32,
        base: Model,
    },
    Final {
        record: GlobalModelRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsView {
    pub global: Option<GlobalModelRecord>,
    pub he: Option<HeModelRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Queued,
    AwaitingModel,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePoll {
    pub request_id: String,
    pub status: TicketStatus,
    pub encrypted_result: Option<Ciphertext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTask {
    pub task_id: u64,
    pub model_key: ModelKey,
    pub kind: SurrogateKind,
    pub primary_version: u64,
    /// Label through encrypted inference rather than a plaintext copy.
    pub encrypted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSubmission {
    pub task_id: u64,
    pub model: Model,
    pub fidelity_r2: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSurrogate {
    pub model_key: ModelKey,
    pub kind: SurrogateKind,
    pub version: u64,
    pub primary_version: u64,
    pub model: Model,
    pub fidelity_r2: f64,
    pub contributing_edges: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum SurrogateAction {
    Start { kind: SurrogateKind },
    Submit(SurrogateSubmission),
    Fetch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CloudRequest {
    Register { edge_id: String, admission_secret: String },
    Deregister { edge_id: String },
    Declare { model_key: ModelKey, follow_session: Option<u64> },
    Update { model_key: ModelKey, model: Model, sample_count: u64, round: Option<u32>, session: u64 },
    FetchModels { model_key: ModelKey },
    UploadEncrypted { dataset: EncryptedDataset },
    SubmitInference { model_key: ModelKey, features: Vec<Ciphertext> },
    PollInference { request_id: String },
    Surrogate { model_key: ModelKey, action: SurrogateAction },
    PollTasks,
}

impl CloudRequest {
    pub fn operation(&self) -> &'static str {
        match self {
            CloudRequest::Register { .. } => "register",
            CloudRequest::Deregister { .. } => "deregister",
            CloudRequest::Declare { .. } => "declare",
            CloudRequest::Update { .. } => "update",
            CloudRequest::FetchModels { .. } => "fetch_models",
            CloudRequest::UploadEncrypted { .. } => "upload_encrypted",
            CloudRequest::SubmitInference { .. } => "submit_inference",
            CloudRequest::PollInference { .. } => "poll_inference",
            CloudRequest::Surrogate { .. } => "surrogate",
            CloudRequest::PollTasks => "poll_tasks",
        }
    }

    /// Requests that change cloud state.
    pub fn is_mutating(&self) -> bool {
        !matches!(
            self,
            CloudRequest::FetchModels { .. }
                | CloudRequest::PollInference { .. }
                | CloudRequest::PollTasks
                | CloudRequest::Surrogate { action: SurrogateAction::Fetch, .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum CloudResponse {
    Registered(EdgeRegistration),
    Ack,
    Directive(Directive),
    Update(UpdateOutcome),
    Models(ModelsView),
    InferenceSubmitted { request_id: String },
    Inference(InferencePoll),
    Tasks(Vec<SurrogateTask>),
    Surrogates(Vec<GlobalSurrogate>),
}

/// Error body on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_round: Option<u32>,
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let current_round = match e {
            Error::StaleRound { current } => Some(*current),
            _ => None,
        };
        ApiError { code: e.code().to_owned(), message: detail(e), current_round }
    }
}

fn detail(e: &Error) -> String {
    match e {
        Error::Validation(m)
        | Error::SchemaMismatch(m)
        | Error::Divergence(m)
        | Error::Decode(m)
        | Error::Merge(m)
        | Error::Auth(m)
        | Error::DuplicateEdge(m)
        | Error::Protocol(m)
        | Error::NotFound(m)
        | Error::SurrogateTrainingTimeout(m)
        | Error::UnknownAggregator(m)
        | Error::FeatureDisabled(m)
        | Error::Unreachable(m)
        | Error::Storage(m) => m.clone(),
        Error::Keygen(n) => n.to_string(),
        Error::HeTimeout(n) => n.to_string(),
        Error::EmptyDataset => String::new(),
        Error::StaleRound { current } => current.to_string(),
    }
}

impl From<ApiError> for Error {
    fn from(a: ApiError) -> Self {
        let m = a.message;
        match a.code.as_str() {
            "validation" => Error::Validation(m),
            "empty_dataset" => Error::EmptyDataset,
            "schema_mismatch" => Error::SchemaMismatch(m),
            "divergence" => Error::Divergence(m),
            "decode" => Error::Decode(m),
            "keygen" => Error::Keygen(m.parse().unwrap_or(0)),
            "merge" => Error::Merge(m),
            "auth" => Error::Auth(m),
            "duplicate_edge" => Error::DuplicateEdge(m),
            "stale_round" => Error::StaleRound { current: a.current_round.unwrap_or_else(|| m.parse().unwrap_or(0)) },
            "not_found" => Error::NotFound(m),
            "surrogate_timeout" => Error::SurrogateTrainingTimeout(m),
            "unknown_aggregator" => Error::UnknownAggregator(m),
            "he_timeout" => Error::HeTimeout(m.parse().unwrap_or(0)),
            "feature_disabled" => Error::FeatureDisabled(m),
            "unreachable" => Error::Unreachable(m),
            "storage" => Error::Storage(m),
            _ => Error::Protocol(m),
        }
    }
}

/// Outcome of one exchange as carried between transport and cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Ok(CloudResponse),
    Err(ApiError),
}

impl Reply {
    pub fn into_result(self) -> Result<CloudResponse> {
        match self {
            Reply::Ok(r) => Ok(r),
            Reply::Err(e) => Err(e.into()),
        }
    }
}

impl From<Result<CloudResponse>> for Reply {
    fn from(r: Result<CloudResponse>) -> Self {
        match r {
            Ok(r) => Reply::Ok(r),
            Err(e) => Reply::Err(ApiError::from(&e)),
        }
    }
}

/// An edge's connection to the cloud.
pub trait CloudTransport: Send + Sync {
    fn send(&mut self, token: Option<&str>, request: &CloudRequest) -> Result<CloudResponse>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Edge,
    Cloud,
}

/// One connection in the transport log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportEvent {
    pub seq: u64,
    pub initiator: Party,
    pub edge_id: String,
    pub operation: String,
    pub request_bytes: usize,
    pub request_sha256: String,
    pub response_bytes: usize,
    pub status: String,
}

#[derive(Debug, Default)]
struct LogInner {
    events: Vec<TransportEvent>,
    payloads: Vec<Vec<u8>>,
    capture_payloads: bool,
}

/// Shared connection-direction log. Cloud-bound payloads can optionally be
/// kept in memory for the privacy scan.
#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<LogInner>>);

impl EventLog {
    pub fn new(capture_payloads: bool) -> Self {
        Self(Arc::new(Mutex::new(LogInner { capture_payloads, ..Default::default() })))
    }

    pub fn record(&self, initiator: Party, edge_id: &str, operation: &str, request: &[u8], response_bytes: usize, status: &str) {
        let mut inner = self.0.lock().unwrap_or_else(|p| p.into_inner());
        let seq = inner.events.len() as u64;
        inner.events.push(TransportEvent {
            seq,
            initiator,
            edge_id: edge_id.to_owned(),
            operation: operation.to_owned(),
            request_bytes: request.len(),
            request_sha256: hex::encode(Sha256::digest(request)),
            response_bytes,
            status: status.to_owned(),
        });
        if inner.capture_payloads {
            inner.payloads.push(request.to_vec());
        }
    }

    pub fn events(&self) -> Vec<TransportEvent> {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).events.clone()
    }

    /// Returns every captured payload containing any of `needles`, as
    /// (event seq, needle) pairs.
    pub fn scan(&self, needles: &[String]) -> Vec<(u64, String)> {
        let needles: Vec<&String> = needles.iter().filter(|n| !n.is_empty()).collect();
        let Ok(matcher) = aho_corasick::AhoCorasick::new(&needles) else { return Vec::new() };
        let inner = self.0.lock().unwrap_or_else(|p| p.into_inner());
        let mut hits = Vec::new();
        for (seq, payload) in inner.payloads.iter().enumerate() {
            let found: BTreeSet<usize> = matcher.find_overlapping_iter(payload).map(|m| m.pattern().as_usize()).collect();
            hits.extend(found.into_iter().map(|i| (seq as u64, needles[i].clone())));
        }
        hits
    }

    pub fn captured_bytes(&self) -> usize {
        self.0.lock().unwrap_or_else(|p| p.into_inner()).payloads.iter().map(Vec::len).sum()
    }
}

/// Wraps a transport and records every exchange it carries.
pub struct LoggingTransport<T> {
    inner: T,
    edge_id: String,
    log: EventLog,
}

impl CloudTransport for Box<dyn CloudTransport> {
    fn send(&mut self, token: Option<&str>, request: &CloudRequest) -> Result<CloudResponse> {
        (**self).send(token, request)
    }
}

impl<T: CloudTransport> LoggingTransport<T> {
    pub fn new(inner: T, edge_id: &str, log: EventLog) -> Self {
        Self { inner, edge_id: edge_id.to_owned(), log }
    }
}

impl<T: CloudTransport> CloudTransport for LoggingTransport<T> {
    fn send(&mut self, token: Option<&str>, request: &CloudRequest) -> Result<CloudResponse> {
        let bytes = serde_json::to_vec(request)?;
        let result = self.inner.send(token, request);
        let (size, status) = match &result {
            Ok(r) => (serde_json::to_vec(r).map(|v| v.len()).unwrap_or(0), "ok".to_owned()),
            Err(e) => (0, e.code().to_owned()),
        };
        self.log.record(Party::Edge, &self.edge_id, request.operation(), &bytes, size, &status);
        result
    }
}
