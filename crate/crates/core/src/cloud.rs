//! The cloud coordinator: edge admission, federated averaging in incremental
//! and semi-concurrent modes, the global model registry, encrypted dataset
//! aggregation and training, the encrypted inference queue and global
//! surrogate tasking.
//!
//! All state lives in one serializable [`CloudState`]. Mutations are
//! appended to an operation log and periodically folded into a snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::domain::{ModelFamily, ModelKey, Task, Timestamp};
use crate::error::{Error, Result};
use crate::explain::SurrogateKind;
use crate::ml::{average_models, serialize_model, LinearModel, Model, TrainingConfig};
use crate::more::{
    merge_encrypted_datasets, predict_encrypted, randomization_safe_learning_rate, train_encrypted_linear, Ciphertext, EncryptedDataset,
};
use crate::protocol::{
    Clock, CloudRequest, CloudResponse, CloudTransport, Directive, EdgeRegistration, EdgeStatus, FederationMode, GlobalModelRecord,
    GlobalSurrogate, HeModelRecord, HistoryEvent, InferencePoll, ModelsView, Reply, SurrogateAction, SurrogateSubmission, SurrogateTask,
    TicketStatus, UpdateOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudConfig {
    pub admission_secret: String,
    /// Keys bearer-token derivation; falls back to the admission secret.
    pub token_secret: Option<String>,
    pub rounds: u32,
    pub round_deadline_secs: i64,
    pub weighted_averaging: bool,
    pub he_training: TrainingConfig,
    pub data_dir: Option<PathBuf>,
    pub snapshot_every: u64,
    pub listen_address: String,
    /// Seconds between background encrypted-training sweeps when serving.
    pub he_sweep_secs: u64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            admission_secret: String::new(),
            token_secret: None,
            rounds: 5,
            round_deadline_secs: 30,
            weighted_averaging: true,
            he_training: TrainingConfig { epochs: 3000, ..TrainingConfig::default() },
            data_dir: None,
            snapshot_every: 64,
            listen_address: "127.0.0.1:8700".into(),
            he_sweep_secs: 1,
        }
    }
}

impl CloudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.admission_secret.is_empty() {
            return Err(Error::Validation("admission_secret must be set".into()));
        }
        if self.rounds < 1 {
            return Err(Error::Validation("rounds must be >= 1".into()));
        }
        if self.round_deadline_secs < 1 {
            return Err(Error::Validation("round_deadline_secs must be >= 1".into()));
        }
        self.he_training.validate()
    }
}

/// Per-key coordinator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub mode: FederationMode,
    pub session: u64,
    pub round: u32,
    pub round_deadline: Option<Timestamp>,
    pub pending_updates: BTreeMap<String, (LinearModel, u64)>,
    pub declared_trainers: BTreeSet<String>,
    pub base: Option<LinearModel>,
    pub base_version: Option<u64>,
    pub session_contributors: BTreeSet<String>,
}

impl Default for FederationState {
    fn default() -> Self {
        Self {
            mode: FederationMode::Idle,
            session: 0,
            round: 0,
            round_deadline: None,
            pending_updates: BTreeMap::new(),
            declared_trainers: BTreeSet::new(),
            base: None,
            base_version: None,
            session_contributors: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTicket {
    pub request_id: String,
    pub edge_id: String,
    pub model_key: ModelKey,
    pub features: Vec<Ciphertext>,
    pub status: TicketStatus,
    pub encrypted_result: Option<Ciphertext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task: SurrogateTask,
    pub assigned: BTreeSet<String>,
    pub submissions: BTreeMap<String, SurrogateSubmission>,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EdgeEntry {
    registration: EdgeRegistration,
    registrations: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CloudState {
    edges: BTreeMap<String, EdgeEntry>,
    federation: BTreeMap<ModelKey, FederationState>,
    globals: BTreeMap<ModelKey, GlobalModelRecord>,
    he_contributions: BTreeMap<ModelKey, BTreeMap<String, EncryptedDataset>>,
    he_stale: BTreeSet<ModelKey>,
    he_models: BTreeMap<ModelKey, HeModelRecord>,
    tickets: BTreeMap<String, InferenceTicket>,
    next_ticket: u64,
    tasks: BTreeMap<u64, TaskState>,
    next_task: u64,
    surrogates: BTreeMap<ModelKey, BTreeMap<SurrogateKind, GlobalSurrogate>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogOp {
    Request { at: Timestamp, token: Option<String>, request: CloudRequest },
    Tick { at: Timestamp },
    TrainHe { at: Timestamp },
}

const SNAPSHOT_FILE: &str = "snapshot.json";
const LOG_FILE: &str = "oplog.jsonl";

pub struct Cloud {
    config: CloudConfig,
    clock: Arc<dyn Clock>,
    state: CloudState,
    log: Option<File>,
    ops_since_snapshot: u64,
}

impl Cloud {
    /// Opens a cloud, recovering state from `config.data_dir` if present.
    pub fn open(config: CloudConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        config.validate()?;
        let mut cloud = Cloud { config, clock, state: CloudState::default(), log: None, ops_since_snapshot: 0 };
        if let Some(dir) = cloud.config.data_dir.clone() {
            fs::create_dir_all(&dir)?;
            let snap = dir.join(SNAPSHOT_FILE);
            if snap.exists() {
                cloud.state = serde_json::from_slice(&fs::read(&snap)?)?;
            }
            let log_path = dir.join(LOG_FILE);
            if log_path.exists() {
                for line in BufReader::new(File::open(&log_path)?).lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    // A torn final line from a crash is dropped.
                    let Ok(op) = serde_json::from_str::<LogOp>(&line) else { break };
                    cloud.replay(op);
                    cloud.ops_since_snapshot += 1;
                }
            }
            cloud.log = Some(OpenOptions::new().create(true).append(true).open(&log_path)?);
        }
        Ok(cloud)
    }

    pub fn in_memory(config: CloudConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        Self::open(CloudConfig { data_dir: None, ..config }, clock)
    }

    pub fn config(&self) -> &CloudConfig {
        &self.config
    }

    pub fn state(&self) -> &CloudState {
        &self.state
    }

    fn replay(&mut self, op: LogOp) {
        let result = match op {
            LogOp::Request { at, token, request } => self.apply(token.as_deref(), request, at).map(|_| ()),
            LogOp::Tick { at } => self.expire(at).map(|_| ()),
            LogOp::TrainHe { at } => {
                self.sweep_he(at);
                Ok(())
            }
        };
        if let Err(e) = result {
            log::warn!("replayed operation failed: {e}");
        }
    }

    fn persist(&mut self, op: &LogOp) -> Result<()> {
        let Some(file) = self.log.as_mut() else { return Ok(()) };
        let mut line = serde_json::to_vec(op)?;
        line.push(b'\n');
        file.write_all(&line)?;
        file.flush()?;
        self.ops_since_snapshot += 1;
        if self.ops_since_snapshot >= self.config.snapshot_every {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Folds the operation log into a fresh snapshot.
    pub fn snapshot(&mut self) -> Result<()> {
        let Some(dir) = self.config.data_dir.clone() else { return Ok(()) };
        let tmp = dir.join("snapshot.json.tmp");
        fs::write(&tmp, serde_json::to_vec(&self.state)?)?;
        fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        self.log = Some(File::create(dir.join(LOG_FILE))?);
        self.ops_since_snapshot = 0;
        Ok(())
    }

    /// Handles one request from an edge.
    pub fn handle(&mut self, token: Option<&str>, request: CloudRequest) -> Result<CloudResponse> {
        let now = self.clock.now();
        if self.expire(now)? {
            self.persist(&LogOp::Tick { at: now })?;
        }
        let mutating = request.is_mutating();
        let logged = mutating.then(|| request.clone());
        let response = self.apply(token, request, now)?;
        if let Some(request) = logged {
            self.persist(&LogOp::Request { at: now, token: token.map(str::to_owned), request })?;
        }
        Ok(response)
    }

    /// Wire entry point: JSON request bytes in, JSON [`Reply`] bytes out.
    pub fn handle_bytes(&mut self, token: Option<&str>, request: &[u8]) -> Vec<u8> {
        let result = serde_json::from_slice::<CloudRequest>(request).map_err(Error::from).and_then(|r| self.handle(token, r));
        serde_json::to_vec(&Reply::from(result)).unwrap_or_default()
    }

    fn apply(&mut self, token: Option<&str>, request: CloudRequest, now: Timestamp) -> Result<CloudResponse> {
        match request {
            CloudRequest::Register { edge_id, admission_secret } => {
                self.register(&edge_id, &admission_secret, now).map(CloudResponse::Registered)
            }
            CloudRequest::Deregister { edge_id } => {
                let caller = self.authenticate(token)?;
                if caller != edge_id {
                    return Err(Error::Auth(format!("edge `{caller}` cannot deregister `{edge_id}`")));
                }
                self.deregister(&edge_id, now)?;
                Ok(CloudResponse::Ack)
            }
            CloudRequest::Declare { model_key, follow_session } => {
                let edge = self.authenticate(token)?;
                self.declare(&edge, &model_key, follow_session, now).map(CloudResponse::Directive)
            }
            CloudRequest::Update { model_key, model, sample_count, round, session } => {
                let edge = self.authenticate(token)?;
                self.submit_update(&edge, &model_key, model, sample_count, round, session, now).map(CloudResponse::Update)
            }
            CloudRequest::FetchModels { model_key } => {
                self.authenticate(token)?;
                Ok(CloudResponse::Models(ModelsView {
                    global: self.state.globals.get(&model_key).cloned(),
                    he: self.state.he_models.get(&model_key).cloned(),
                }))
            }
            CloudRequest::UploadEncrypted { dataset } => {
                let edge = self.authenticate(token)?;
                self.ingest_encrypted_dataset(&edge, dataset)?;
                Ok(CloudResponse::Ack)
            }
            CloudRequest::SubmitInference { model_key, features } => {
                let edge = self.authenticate(token)?;
                let request_id = self.submit_inference(&edge, &model_key, features)?;
                Ok(CloudResponse::InferenceSubmitted { request_id })
            }
            CloudRequest::PollInference { request_id } => {
                let edge = self.authenticate(token)?;
                self.poll_inference(&edge, &request_id).map(CloudResponse::Inference)
            }
            CloudRequest::Surrogate { model_key, action } => {
                let edge = self.authenticate(token)?;
                match action {
                    SurrogateAction::Start { kind } => {
                        self.coordinate_global_surrogate(&model_key, kind).map(|t| CloudResponse::Tasks(vec![t]))
                    }
                    SurrogateAction::Submit(sub) => {
                        self.submit_surrogate(&edge, &model_key, sub)?;
                        Ok(CloudResponse::Ack)
                    }
                    SurrogateAction::Fetch => Ok(CloudResponse::Surrogates(
                        self.state.surrogates.get(&model_key).map(|m| m.values().cloned().collect()).unwrap_or_default(),
                    )),
                }
            }
            CloudRequest::PollTasks => {
                let edge = self.authenticate(token)?;
                Ok(CloudResponse::Tasks(self.tasks_for(&edge)))
            }
        }
    }

    fn authenticate(&self, token: Option<&str>) -> Result<String> {
        let token = token.ok_or_else(|| Error::Auth("missing bearer token".into()))?;
        self.state
            .edges
            .values()
            .find(|e| e.registration.status == EdgeStatus::Active && e.registration.bearer_token == token)
            .map(|e| e.registration.edge_id.clone())
            .ok_or_else(|| Error::Auth("unknown or revoked bearer token".into()))
    }

    fn issue_token(&self, edge_id: &str, counter: u32) -> String {
        let secret = self.config.token_secret.as_deref().unwrap_or(&self.config.admission_secret);
        let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(secret.as_bytes()).expect("hmac accepts any key length");
        mac.update(edge_id.as_bytes());
        mac.update(&counter.to_be_bytes());
        hex::encode(mac.finalize().into_bytes())
    }

    pub fn register(&mut self, edge_id: &str, admission_secret: &str, now: Timestamp) -> Result<EdgeRegistration> {
        if admission_secret != self.config.admission_secret {
            return Err(Error::Auth("wrong admission secret".into()));
        }
        if edge_id.is_empty() {
            return Err(Error::Validation("edge_id must be non-empty".into()));
        }
        let registrations = match self.state.edges.get(edge_id) {
            Some(e) if e.registration.status == EdgeStatus::Active => return Err(Error::DuplicateEdge(edge_id.to_owned())),
            Some(e) => e.registrations + 1,
            None => 1,
        };
        let registration = EdgeRegistration {
            edge_id: edge_id.to_owned(),
            bearer_token: self.issue_token(edge_id, registrations),
            status: EdgeStatus::Active,
            joined_at: now,
            departed_at: None,
        };
        self.state.edges.insert(edge_id.to_owned(), EdgeEntry { registration: registration.clone(), registrations });
        Ok(registration)
    }

    /// Marks the edge departed. Stored models are left exactly as they are.
    pub fn deregister(&mut self, edge_id: &str, now: Timestamp) -> Result<()> {
        let entry = self.state.edges.get_mut(edge_id).ok_or_else(|| Error::NotFound(format!("edge `{edge_id}`")))?;
        entry.registration.status = EdgeStatus::Departed;
        entry.registration.departed_at = Some(now);
        Ok(())
    }

    pub fn registration(&self, edge_id: &str) -> Option<&EdgeRegistration> {
        self.state.edges.get(edge_id).map(|e| &e.registration)
    }

    pub fn global(&self, key: &ModelKey) -> Option<&GlobalModelRecord> {
        self.state.globals.get(key)
    }

    pub fn globals(&self) -> &BTreeMap<ModelKey, GlobalModelRecord> {
        &self.state.globals
    }

    pub fn federation_state(&self, key: &ModelKey) -> Option<&FederationState> {
        self.state.federation.get(key)
    }

    pub fn he_model(&self, key: &ModelKey) -> Option<&HeModelRecord> {
        self.state.he_models.get(key)
    }

    pub fn surrogates(&self, key: &ModelKey) -> Vec<GlobalSurrogate> {
        self.state.surrogates.get(key).map(|m| m.values().cloned().collect()).unwrap_or_default()
    }

    fn directive(&self, edge: &str, key: &ModelKey) -> Directive {
        let st = &self.state.federation[key];
        Directive {
            mode: st.mode,
            session: st.session,
            round: st.round,
            rounds_total: if st.mode == FederationMode::SemiConcurrent { self.config.rounds } else { 1 },
            base: st.base.clone().map(Model::Linear),
            base_version: st.base_version,
            submitted: st.pending_updates.contains_key(edge),
            round_deadline: st.round_deadline,
            global: None,
        }
    }

    fn finished_directive(&self, key: &ModelKey, session: u64) -> Directive {
        Directive {
            mode: FederationMode::Idle,
            session,
            round: 0,
            rounds_total: 0,
            base: None,
            base_version: None,
            submitted: false,
            round_deadline: None,
            global: self.state.globals.get(key).cloned(),
        }
    }

    fn current_global_linear(&self, key: &ModelKey) -> Result<(Option<LinearModel>, Option<u64>)> {
        match self.state.globals.get(key) {
            None => Ok((None, None)),
            Some(rec) => match rec.model()? {
                Model::Linear(m) => Ok((Some(m), Some(rec.version))),
                Model::Tree(_) => Err(Error::Protocol(format!("global for {key} is not linear"))),
            },
        }
    }

    pub fn declare(&mut self, edge: &str, key: &ModelKey, follow_session: Option<u64>, now: Timestamp) -> Result<Directive> {
        if key.family != ModelFamily::Linear {
            return Err(Error::Protocol(format!("{key}: only the linear family is federated")));
        }
        let st = self.state.federation.entry(key.clone()).or_default();
        if let Some(s) = follow_session {
            let member = s == st.session && st.mode != FederationMode::Idle && st.declared_trainers.contains(edge);
            return Ok(if member { self.directive(edge, key) } else { self.finished_directive(key, s) });
        }
        match st.mode {
            FederationMode::Idle => {
                let (base, base_version) = self.current_global_linear(key)?;
                let deadline = now + self.config.round_deadline_secs;
                let st = self.state.federation.get_mut(key).expect("entry created above");
                *st = FederationState {
                    mode: FederationMode::Incremental,
                    session: st.session + 1,
                    round: 0,
                    round_deadline: Some(deadline),
                    declared_trainers: BTreeSet::from([edge.to_owned()]),
                    base,
                    base_version,
                    ..FederationState::default()
                };
            }
            FederationMode::Incremental if !st.declared_trainers.contains(edge) => {
                st.mode = FederationMode::SemiConcurrent;
                st.round = 1;
                st.round_deadline = Some(now + self.config.round_deadline_secs);
                st.declared_trainers.insert(edge.to_owned());
            }
            FederationMode::SemiConcurrent => {
                st.declared_trainers.insert(edge.to_owned());
            }
            FederationMode::Incremental => {}
        }
        Ok(self.directive(edge, key))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn submit_update(
        &mut self,
        edge: &str,
        key: &ModelKey,
        model: Model,
        sample_count: u64,
        round: Option<u32>,
        session: u64,
        now: Timestamp,
    ) -> Result<UpdateOutcome> {
        let Model::Linear(model) = model else {
            return Err(Error::Protocol("only linear models can be submitted".into()));
        };
        model.validate()?;
        if model.task != key.task {
            return Err(Error::SchemaMismatch(format!("{key} expects task {}", key.task.as_str())));
        }
        let st = self
            .state
            .federation
            .get(key)
            .filter(|st| st.mode != FederationMode::Idle && st.session == session && st.declared_trainers.contains(edge))
            .ok_or_else(|| Error::Protocol(format!("edge `{edge}` has no active declaration for {key} session {session}")))?;
        let reference = st.base.as_ref().or_else(|| st.pending_updates.values().next().map(|(m, _)| m));
        if let Some(r) = reference {
            if r.schema_hash != model.schema_hash || r.arity() != model.arity() {
                return Err(Error::SchemaMismatch(format!("update schema {} != {}", model.schema_hash, r.schema_hash)));
            }
        }
        match st.mode {
            FederationMode::Incremental => {
                if round.is_some() {
                    return Err(Error::StaleRound { current: 0 });
                }
                let st = self.state.federation.get_mut(key).expect("checked above");
                let mut contributors = std::mem::take(&mut st.session_contributors);
                contributors.insert(edge.to_owned());
                st.mode = FederationMode::Idle;
                st.declared_trainers.clear();
                st.round_deadline = None;
                st.base = None;
                st.base_version = None;
                let record = self.store_global(key, &model, contributors, "incremental_update", edge, now);
                Ok(UpdateOutcome::Final { record })
            }
            FederationMode::SemiConcurrent => {
                if round != Some(st.round) {
                    return Err(Error::StaleRound { current: st.round });
                }
                if st.pending_updates.contains_key(edge) {
                    return Err(Error::Protocol(format!("edge `{edge}` already submitted round {}", st.round)));
                }
                let st = self.state.federation.get_mut(key).expect("checked above");
                st.pending_updates.insert(edge.to_owned(), (model, sample_count));
                let complete = st.declared_trainers.iter().all(|e| st.pending_updates.contains_key(e));
                if complete {
                    self.complete_round(key, edge, now)
                } else {
                    Ok(UpdateOutcome::Ack { round: st.round })
                }
            }
            FederationMode::Idle => unreachable!("filtered above"),
        }
    }

    /// Averages the buffered updates and either opens the next round or,
    /// after the last round or when fewer than two trainers remain,
    /// publishes the aggregate as the new global version.
    fn complete_round(&mut self, key: &ModelKey, trigger: &str, now: Timestamp) -> Result<UpdateOutcome> {
        let weighted = self.config.weighted_averaging;
        let rounds = self.config.rounds;
        let deadline = self.config.round_deadline_secs;
        let st = self.state.federation.get_mut(key).expect("caller holds a session");
        let pending = std::mem::take(&mut st.pending_updates);
        let models: Vec<LinearModel> = pending.values().map(|(m, _)| m.clone()).collect();
        let counts: Vec<u64> = pending.values().map(|(_, n)| *n).collect();
        let mut aggregate = average_models(&models, weighted.then_some(counts.as_slice()))?;
        if !weighted {
            aggregate.trained_on_n = counts.iter().sum();
        }
        st.session_contributors.extend(pending.keys().cloned());
        if st.round >= rounds || st.declared_trainers.len() < 2 {
            let contributors = std::mem::take(&mut st.session_contributors);
            *st = FederationState { session: st.session, ..FederationState::default() };
            let record = self.store_global(key, &aggregate, contributors, "semi_concurrent_final", trigger, now);
            Ok(UpdateOutcome::Final { record })
        } else {
            st.round += 1;
            st.round_deadline = Some(now + deadline);
            st.base = Some(aggregate.clone());
            Ok(UpdateOutcome::NextRound { round: st.round, base: Model::Linear(aggregate) })
        }
    }

    fn store_global(
        &mut self,
        key: &ModelKey,
        model: &LinearModel,
        contributors: BTreeSet<String>,
        event: &str,
        edge: &str,
        now: Timestamp,
    ) -> GlobalModelRecord {
        let bytes = serialize_model(&Model::Linear(model.clone()));
        let prev = self.state.globals.get(key);
        let mut contributing_edges = prev.map(|p| p.contributing_edges.clone()).unwrap_or_default();
        contributing_edges.extend(contributors);
        let mut history = prev.map(|p| p.history.clone()).unwrap_or_default();
        history.push(HistoryEvent { event: event.to_owned(), edge_id: edge.to_owned(), at: now });
        let record = GlobalModelRecord {
            model_key: key.clone(),
            version: prev.map_or(1, |p| p.version + 1),
            model_bytes: String::from_utf8(bytes).expect("model JSON is UTF-8"),
            contributing_edges,
            history,
        };
        self.state.globals.insert(key.clone(), record.clone());
        record
    }

    /// Applies round deadlines that have passed by `now`. Returns whether
    /// any state changed.
    pub fn expire(&mut self, now: Timestamp) -> Result<bool> {
        let mut changed = false;
        let keys: Vec<ModelKey> = self.state.federation.keys().cloned().collect();
        for key in keys {
            loop {
                let st = &self.state.federation[&key];
                let due = st.mode != FederationMode::Idle && st.round_deadline.is_some_and(|d| now >= d);
                if !due {
                    break;
                }
                changed = true;
                let st = self.state.federation.get_mut(&key).expect("key listed above");
                if st.mode == FederationMode::Incremental {
                    log::info!("{key}: incremental session {} expired", st.session);
                    *st = FederationState { session: st.session, ..FederationState::default() };
                    break;
                }
                let submitted: BTreeSet<String> = st.pending_updates.keys().cloned().collect();
                let dropped: Vec<String> = st.declared_trainers.difference(&submitted).cloned().collect();
                if !dropped.is_empty() {
                    log::info!("{key}: round {} deadline dropped {dropped:?}", st.round);
                }
                st.declared_trainers = submitted;
                if st.pending_updates.is_empty() {
                    *st = FederationState { session: st.session, ..FederationState::default() };
                    break;
                }
                let deadline = st.round_deadline.expect("due implies deadline");
                // Later rounds inherit the missed deadline so a long gap
                // resolves every round it spans.
                if let UpdateOutcome::NextRound { .. } = self.complete_round(&key, "deadline", deadline)? {
                    continue;
                }
                break;
            }
        }
        Ok(changed)
    }

    pub fn ingest_encrypted_dataset(&mut self, edge: &str, dataset: EncryptedDataset) -> Result<()> {
        dataset.validate()?;
        let key = ModelKey::linear_regression(dataset.cancer_type, &dataset.target_variable);
        let contributions = self.state.he_contributions.entry(key.clone()).or_default();
        if let Some(other) = contributions.iter().find(|(e, _)| e.as_str() != edge).map(|(_, d)| d) {
            if !other.same_kind(&dataset) {
                return Err(Error::Merge(format!(
                    "upload schema {} does not match aggregate schema {}",
                    dataset.schema_hash, other.schema_hash
                )));
            }
        }
        // An edge's newer upload replaces its earlier one.
        contributions.insert(edge.to_owned(), dataset);
        self.state.he_stale.insert(key);
        Ok(())
    }

    /// The merged encrypted dataset for a key.
    pub fn aggregate(&self, key: &ModelKey) -> Result<Option<EncryptedDataset>> {
        let Some(parts) = self.state.he_contributions.get(key) else { return Ok(None) };
        let mut iter = parts.values();
        let Some(first) = iter.next() else { return Ok(None) };
        let mut acc = first.clone();
        for d in iter {
            acc = merge_encrypted_datasets(&acc, d)?;
        }
        Ok(Some(acc))
    }

    /// Retrains every stale encrypted model and answers tickets waiting on
    /// them. Returns the number of models refreshed.
    pub fn train_he_models(&mut self) -> Result<usize> {
        let now = self.clock.now();
        let n = self.sweep_he(now);
        self.persist(&LogOp::TrainHe { at: now })?;
        Ok(n)
    }

    fn sweep_he(&mut self, _now: Timestamp) -> usize {
        let stale: Vec<ModelKey> = std::mem::take(&mut self.state.he_stale).into_iter().collect();
        let mut refreshed = 0;
        for key in stale {
            match self.train_one_he(&key) {
                Ok(record) => {
                    self.state.he_models.insert(key, record);
                    refreshed += 1;
                }
                Err(e) => log::warn!("{key}: encrypted training failed: {e}"),
            }
        }
        self.resolve_tickets();
        refreshed
    }

    fn train_one_he(&self, key: &ModelKey) -> Result<HeModelRecord> {
        let agg = self.aggregate(key)?.ok_or_else(|| Error::NotFound(format!("no encrypted data for {key}")))?;
        let base = &self.config.he_training;
        let safe = randomization_safe_learning_rate(&agg.feature_stats, base.ridge_lambda);
        let cfg = TrainingConfig { learning_rate: base.learning_rate.min(safe), task: Task::Regression, ..base.clone() };
        let model = train_encrypted_linear(&agg, &cfg)?;
        Ok(HeModelRecord {
            model_key: key.clone(),
            version: self.state.he_models.get(key).map_or(1, |r| r.version + 1),
            model,
            effective_learning_rate: cfg.learning_rate,
            epochs: cfg.epochs,
        })
    }

    fn resolve_tickets(&mut self) {
        let models = &self.state.he_models;
        for t in self.state.tickets.values_mut().filter(|t| t.status != TicketStatus::Done) {
            if let Some(rec) = models.get(&t.model_key) {
                match predict_encrypted(&rec.model, &t.features) {
                    Ok(c) => {
                        t.encrypted_result = Some(c);
                        t.status = TicketStatus::Done;
                    }
                    Err(e) => log::warn!("ticket {}: {e}", t.request_id),
                }
            }
        }
    }

    pub fn submit_inference(&mut self, edge: &str, key: &ModelKey, features: Vec<Ciphertext>) -> Result<String> {
        if key.family != ModelFamily::Linear || key.task != Task::Regression {
            return Err(Error::FeatureDisabled(format!("encrypted models serve linear regression only, not {key}")));
        }
        if features.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite ciphertext".into()));
        }
        let arity = match self.state.he_models.get(key) {
            Some(r) => Some(r.model.arity()),
            None => self.aggregate(key)?.map(|a| a.arity()),
        };
        if let Some(a) = arity {
            crate::ml::check_arity(a, features.len())?;
        }
        self.state.next_ticket += 1;
        let request_id = format!("req-{:08}", self.state.next_ticket);
        self.state.tickets.insert(
            request_id.clone(),
            InferenceTicket {
                request_id: request_id.clone(),
                edge_id: edge.to_owned(),
                model_key: key.clone(),
                features,
                status: TicketStatus::AwaitingModel,
                encrypted_result: None,
            },
        );
        self.resolve_tickets();
        Ok(request_id)
    }

    pub fn poll_inference(&self, edge: &str, request_id: &str) -> Result<InferencePoll> {
        let t = self.state.tickets.get(request_id).ok_or_else(|| Error::NotFound(format!("request `{request_id}`")))?;
        if t.edge_id != edge {
            return Err(Error::Auth(format!("request `{request_id}` belongs to another edge")));
        }
        Ok(InferencePoll { request_id: t.request_id.clone(), status: t.status, encrypted_result: t.encrypted_result })
    }

    /// Opens a surrogate-training task that active edges pick up on their
    /// next task poll.
    pub fn coordinate_global_surrogate(&mut self, key: &ModelKey, kind: SurrogateKind) -> Result<SurrogateTask> {
        let (primary_version, encrypted) = match (self.state.globals.get(key), self.state.he_models.get(key)) {
            (Some(g), _) => (g.version, false),
            (None, Some(h)) => (h.version, true),
            (None, None) => return Err(Error::NotFound(format!("no global model for {key}"))),
        };
        self.state.next_task += 1;
        let task = SurrogateTask { task_id: self.state.next_task, model_key: key.clone(), kind, primary_version, encrypted };
        let assigned = self
            .state
            .edges
            .values()
            .filter(|e| e.registration.status == EdgeStatus::Active)
            .map(|e| e.registration.edge_id.clone())
            .collect();
        self.state.tasks.insert(task.task_id, TaskState { task: task.clone(), assigned, submissions: BTreeMap::new(), open: true });
        Ok(task)
    }

    fn tasks_for(&self, edge: &str) -> Vec<SurrogateTask> {
        self.state
            .tasks
            .values()
            .filter(|t| t.open && t.assigned.contains(edge) && !t.submissions.contains_key(edge))
            .map(|t| t.task.clone())
            .collect()
    }

    fn submit_surrogate(&mut self, edge: &str, key: &ModelKey, sub: SurrogateSubmission) -> Result<()> {
        let task_state = self.state.tasks.get(&sub.task_id).ok_or_else(|| Error::NotFound(format!("task {}", sub.task_id)))?;
        if &task_state.task.model_key != key {
            return Err(Error::Protocol(format!("task {} is for {}", sub.task_id, task_state.task.model_key)));
        }
        if !task_state.assigned.contains(edge) {
            return Err(Error::Protocol(format!("task {} was not assigned to `{edge}`", sub.task_id)));
        }
        let kind = task_state.task.kind;
        if sub.model.family() != kind.family() {
            return Err(Error::Protocol(format!("task {} expects a {:?} surrogate", sub.task_id, kind)));
        }
        sub.model.validate()?;
        if !sub.fidelity_r2.is_finite() {
            return Err(Error::Validation("fidelity must be finite".into()));
        }
        let primary_version = task_state.task.primary_version;
        let weighted = self.config.weighted_averaging;
        let task_state = self.state.tasks.get_mut(&sub.task_id).expect("looked up above");
        task_state.submissions.insert(edge.to_owned(), sub);
        let subs = &task_state.submissions;
        let contributing_edges: BTreeSet<String> = subs.keys().cloned().collect();
        let (model, fidelity_r2) = match kind {
            SurrogateKind::Linear => {
                let models: Vec<LinearModel> = subs.values().filter_map(|s| s.model.as_linear().cloned()).collect();
                let counts: Vec<u64> = subs.values().map(|s| s.sample_count).collect();
                let avg = average_models(&models, weighted.then_some(counts.as_slice()))?;
                let total: f64 = counts.iter().map(|&c| c.max(1) as f64).sum();
                let fid = subs.values().map(|s| s.fidelity_r2 * s.sample_count.max(1) as f64).sum::<f64>() / total;
                (Model::Linear(avg), fid)
            }
            SurrogateKind::Tree => {
                // Highest reported fidelity wins; ties go to the smallest edge id.
                let best = subs.values().reduce(|a, b| if b.fidelity_r2 > a.fidelity_r2 { b } else { a }).expect("just inserted");
                (best.model.clone(), best.fidelity_r2)
            }
        };
        let active: BTreeSet<&String> =
            self.state.edges.values().filter(|e| e.registration.status == EdgeStatus::Active).map(|e| &e.registration.edge_id).collect();
        task_state.open = task_state.assigned.iter().any(|e| active.contains(e) && !task_state.submissions.contains_key(e));
        let slot = self.state.surrogates.entry(key.clone()).or_default();
        let version = slot.get(&kind).map_or(1, |s| s.version + 1);
        slot.insert(
            kind,
            GlobalSurrogate { model_key: key.clone(), kind, version, primary_version, model, fidelity_r2, contributing_edges },
        );
        Ok(())
    }
}

/// Same-process transport: requests and replies still cross as JSON bytes.
#[derive(Clone)]
pub struct LocalTransport {
    cloud: Arc<Mutex<Cloud>>,
}

impl LocalTransport {
    pub fn new(cloud: Arc<Mutex<Cloud>>) -> Self {
        Self { cloud }
    }
}

impl CloudTransport for LocalTransport {
    fn send(&mut self, token: Option<&str>, request: &CloudRequest) -> Result<CloudResponse> {
        let bytes = serde_json::to_vec(request)?;
        let reply = self.cloud.lock().unwrap_or_else(|p| p.into_inner()).handle_bytes(token, &bytes);
        serde_json::from_slice::<Reply>(&reply)?.into_result()
    }
}
