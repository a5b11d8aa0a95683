//! The per-hospital edge node: pseudonymizing ingest, the redacted patient
//! store, model management with best-fit selection, and the prediction,
//! explanation and what-if queries behind the dashboard.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    active_interventions, extract_training_dataset_with_interventions, intervention_feature, lenient_f64_map, lenient_f64_map_ser,
    pseudonymize, validate_record, CancerType, FeatureSchema, Intervention, ModelFamily, ModelKey, PatientRecord, Pseudonym, PseudonymKey,
    QoLObservation, Task, Timestamp, TrainingDataset, DEFAULT_ISSUES, SECONDS_PER_DAY, TIME_FEATURE,
};
use crate::error::{Error, Result};
use crate::explain::{
    encrypted_predict, name_values, shapley, simulate_interventions, surrogate_via_encrypted_labels, train_surrogate, Attribution,
    EncryptedInference, InterventionSuggestion, PrimaryRef, ShapleyOptions, SurrogateKind,
};
use crate::ml::{evaluate, train_linear_with_backoff, train_tree, Metrics, Model, TrainingConfig};
use crate::more::{decrypt_model, encrypt_dataset, Ciphertext, MoreKey};
use crate::protocol::{
    Clock, CloudRequest, CloudResponse, CloudTransport, Directive, FederationMode, GlobalSurrogate, ModelsView, SurrogateAction,
    SurrogateSubmission, SurrogateTask, TicketStatus, UpdateOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeConfig {
    pub edge_id: String,
    pub cloud_base_url: Option<String>,
    pub admission_secret: String,
    /// 64 hex characters.
    pub pseudonymization_key: String,
    pub more_key_path: Option<PathBuf>,
    pub federation_enabled: bool,
    pub he_enabled: bool,
    pub schema_path: Option<PathBuf>,
    pub listen_address: String,
    pub data_dir: Option<PathBuf>,
    /// Bearer token expected from dashboard clients.
    pub client_token: Option<String>,
    pub aggregator_sources: Vec<String>,
    pub issues: Vec<String>,
    pub training: TrainingConfig,
    pub surrogate_training: TrainingConfig,
    pub split_seed: u64,
    pub max_combo: usize,
    pub step_days: i64,
    pub he_max_polls: u32,
    /// Base delay between polls; 0 polls back to back.
    pub poll_interval_ms: u64,
    /// Upper bound on protocol steps spent in one blocking `ensure_model`.
    pub ensure_max_steps: u32,
    pub shapley: ShapleyOptions,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            edge_id: String::new(),
            cloud_base_url: None,
            admission_secret: String::new(),
            pseudonymization_key: String::new(),
            more_key_path: None,
            federation_enabled: false,
            he_enabled: false,
            schema_path: None,
            listen_address: "127.0.0.1:8800".into(),
            data_dir: None,
            client_token: None,
            aggregator_sources: vec!["wearable".into()],
            issues: DEFAULT_ISSUES.iter().map(|s| s.to_string()).collect(),
            training: TrainingConfig::default(),
            surrogate_training: TrainingConfig { epochs: 3000, learning_rate: 0.3, ..TrainingConfig::default() },
            split_seed: 0,
            max_combo: 2,
            step_days: 30,
            he_max_polls: 20,
            poll_interval_ms: 0,
            ensure_max_steps: 10_000,
            shapley: ShapleyOptions::default(),
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.edge_id.is_empty() {
            return Err(Error::Validation("edge_id must be set".into()));
        }
        PseudonymKey::from_hex(&self.pseudonymization_key)?;
        if self.step_days < 1 {
            return Err(Error::Validation("step_days must be >= 1".into()));
        }
        if self.max_combo < 1 {
            return Err(Error::Validation("max_combo must be >= 1".into()));
        }
        self.training.validate()?;
        self.surrogate_training.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub patient_id: String,
    pub cancer_type: CancerType,
    #[serde(deserialize_with = "lenient_f64_map", serialize_with = "lenient_f64_map_ser")]
    pub features: BTreeMap<String, f64>,
    pub recorded_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObservation {
    pub patient_id: String,
    pub measured_at: Timestamp,
    pub overall_qol: f64,
    #[serde(default)]
    pub issue_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawIntervention {
    pub patient_id: String,
    #[serde(flatten)]
    pub intervention: Intervention,
}

/// Hospital information system export.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HisPayload {
    #[serde(default)]
    pub records: Vec<RawRecord>,
    #[serde(default)]
    pub observations: Vec<RawObservation>,
    #[serde(default)]
    pub interventions: Vec<RawIntervention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorEntry {
    pub patient_id: String,
    pub device_id: String,
    pub recorded_at: Timestamp,
    #[serde(deserialize_with = "lenient_f64_map", serialize_with = "lenient_f64_map_ser")]
    pub features: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregatorPayload {
    pub entries: Vec<AggregatorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub section: String,
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub ingested: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum StoreEvent {
    Record(PatientRecord),
    Observation(QoLObservation),
    Intervention { pseudonym: Pseudonym, intervention: Intervention },
    Merge { pseudonym: Pseudonym, recorded_at: Timestamp, features: BTreeMap<String, f64> },
    WearableAdded { pseudonym: Pseudonym, device_id: String },
    WearableRemoved { pseudonym: Pseudonym, device_id: String },
}

/// Redacted patient data: everything is keyed by pseudonym.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientStore {
    pub records: Vec<PatientRecord>,
    pub observations: Vec<QoLObservation>,
    pub interventions: BTreeMap<Pseudonym, Vec<Intervention>>,
    pub wearables: BTreeMap<Pseudonym, BTreeSet<String>>,
    pub revision: u64,
}

impl PatientStore {
    fn apply(&mut self, event: StoreEvent) {
        self.revision += 1;
        match event {
            StoreEvent::Record(r) => self.records.push(r),
            StoreEvent::Observation(o) => self.observations.push(o),
            StoreEvent::Intervention { pseudonym, intervention } => {
                let list = self.interventions.entry(pseudonym).or_default();
                match list.iter_mut().find(|iv| iv.id == intervention.id) {
                    Some(existing) => *existing = intervention,
                    None => list.push(intervention),
                }
            }
            StoreEvent::Merge { pseudonym, recorded_at, features } => {
                if let Some(r) = self
                    .records
                    .iter_mut()
                    .filter(|r| r.pseudonym == pseudonym && r.recorded_at <= recorded_at)
                    .max_by_key(|r| r.recorded_at)
                {
                    r.features.extend(features);
                }
            }
            StoreEvent::WearableAdded { pseudonym, device_id } => {
                self.wearables.entry(pseudonym).or_default().insert(device_id);
            }
            StoreEvent::WearableRemoved { pseudonym, device_id } => {
                if let Some(set) = self.wearables.get_mut(&pseudonym) {
                    set.remove(&device_id);
                }
            }
        }
    }

    pub fn latest_record(&self, p: &Pseudonym) -> Option<&PatientRecord> {
        self.records.iter().filter(|r| &r.pseudonym == p).max_by_key(|r| r.recorded_at)
    }

    pub fn pseudonyms(&self) -> BTreeSet<&Pseudonym> {
        self.records.iter().map(|r| &r.pseudonym).collect()
    }

    pub fn interventions_of(&self, p: &Pseudonym) -> &[Intervention] {
        self.interventions.get(p).map(Vec::as_slice).unwrap_or(&[])
    }

    fn observations_of(&self, p: &Pseudonym) -> Vec<QoLObservation> {
        let mut obs: Vec<QoLObservation> = self.observations.iter().filter(|o| &o.pseudonym == p).cloned().collect();
        obs.sort_by_key(|o| o.measured_at);
        obs
    }

    /// The patient's "now": latest observation or record time.
    fn reference_time(&self, p: &Pseudonym) -> Option<Timestamp> {
        let rec = self.latest_record(p)?.recorded_at;
        let obs = self.observations.iter().filter(|o| &o.pseudonym == p).map(|o| o.measured_at).max();
        Some(obs.map_or(rec, |o| o.max(rec)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Local,
    FederatedGlobal,
    HeGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub source: CandidateSource,
    pub metrics: Metrics,
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelection {
    pub model_key: ModelKey,
    pub candidates: Vec<Candidate>,
    pub chosen: CandidateSource,
    pub evaluated_at: Timestamp,
    /// Set when the cloud could not be reached and only local results count.
    pub degraded: bool,
    pub warnings: Vec<String>,
}

impl ModelSelection {
    pub fn candidate(&self, source: CandidateSource) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.source == source)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub selection: ModelSelection,
    pub chosen: Model,
    pub models: BTreeMap<CandidateSource, Model>,
    /// Bumped on every selection.
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub time: Timestamp,
    pub target_variable: String,
    pub value: f64,
    pub assuming: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub pseudonym: Pseudonym,
    pub observations: Vec<QoLObservation>,
    pub interventions: Vec<Intervention>,
    pub predictions: Vec<PredictedPoint>,
    pub attributions: BTreeMap<String, Attribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub pseudonym: Pseudonym,
    pub cancer_type: CancerType,
    pub last_recorded_at: Timestamp,
    pub observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub edge_id: String,
    pub patients: usize,
    pub models: usize,
    pub federation_enabled: bool,
    pub he_enabled: bool,
    pub registered: bool,
}

/// Authenticated link to the cloud.
pub struct CloudClient {
    transport: Box<dyn CloudTransport>,
    edge_id: String,
    admission_secret: String,
    token: Option<String>,
    poll_interval_ms: u64,
}

impl CloudClient {
    pub fn new(transport: Box<dyn CloudTransport>, edge_id: &str, admission_secret: &str) -> Self {
        Self { transport, edge_id: edge_id.to_owned(), admission_secret: admission_secret.to_owned(), token: None, poll_interval_ms: 0 }
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn set_token(&mut self, token: Option<String>) {
        self.token = token;
    }

    pub fn register(&mut self) -> Result<()> {
        let req = CloudRequest::Register { edge_id: self.edge_id.clone(), admission_secret: self.admission_secret.clone() };
        match self.transport.send(None, &req)? {
            CloudResponse::Registered(reg) => {
                self.token = Some(reg.bearer_token);
                Ok(())
            }
            other => Err(unexpected(&other)),
        }
    }

    pub fn call(&mut self, request: &CloudRequest) -> Result<CloudResponse> {
        if self.token.is_none() {
            self.register()?;
        }
        self.transport.send(self.token.as_deref(), request)
    }

    pub fn deregister(&mut self) -> Result<()> {
        let req = CloudRequest::Deregister { edge_id: self.edge_id.clone() };
        self.call(&req)?;
        self.token = None;
        Ok(())
    }
}

fn unexpected(r: &CloudResponse) -> Error {
    Error::Protocol(format!("unexpected cloud response {r:?}"))
}

impl EncryptedInference for CloudClient {
    fn submit(&mut self, model_key: &ModelKey, features: Vec<Ciphertext>) -> Result<String> {
        match self.call(&CloudRequest::SubmitInference { model_key: model_key.clone(), features })? {
            CloudResponse::InferenceSubmitted { request_id } => Ok(request_id),
            other => Err(unexpected(&other)),
        }
    }

    fn poll(&mut self, request_id: &str) -> Result<Option<Ciphertext>> {
        match self.call(&CloudRequest::PollInference { request_id: request_id.to_owned() })? {
            CloudResponse::Inference(p) if p.status == TicketStatus::Done => Ok(p.encrypted_result),
            CloudResponse::Inference(_) => Ok(None),
            other => Err(unexpected(&other)),
        }
    }

    fn backoff(&mut self, attempt: u32) {
        if self.poll_interval_ms > 0 {
            let ms = self.poll_interval_ms.saturating_mul(1 << attempt.min(5));
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Declare,
    Follow(u64),
    Train(Box<Directive>),
    Done,
}

/// An `ensure_model` call in progress. Harnesses step several of these in
/// turn so their edges train concurrently.
#[derive(Debug, Clone)]
pub struct EnsureJob {
    key: ModelKey,
    train: TrainingDataset,
    holdout: TrainingDataset,
    local: Model,
    federated: Option<(Model, u64)>,
    phase: Phase,
    /// Submitted for the current round; nothing to do until others submit
    /// or the deadline passes.
    pub waiting: bool,
    degraded: bool,
    warnings: Vec<String>,
}

impl EnsureJob {
    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn key(&self) -> &ModelKey {
        &self.key
    }

    /// Stops waiting on the cloud; the job finishes with what it has.
    pub fn abandon(&mut self, reason: String) {
        self.warnings.push(reason);
        self.degraded = true;
        self.phase = Phase::Done;
    }
}

pub struct EdgeNode {
    config: EdgeConfig,
    schema: FeatureSchema,
    pkey: PseudonymKey,
    more_key: Option<MoreKey>,
    cloud: Option<CloudClient>,
    clock: Arc<dyn Clock>,
    store: PatientStore,
    store_log: Option<File>,
    models: BTreeMap<ModelKey, ModelEntry>,
    he_uploaded: BTreeMap<ModelKey, u64>,
    suggestion_cache: Mutex<BTreeMap<(Pseudonym, String), (String, Vec<InterventionSuggestion>)>>,
    model_evaluations: AtomicU64,
}

impl EdgeNode {
    pub fn new(
        config: EdgeConfig,
        schema: FeatureSchema,
        more_key: Option<MoreKey>,
        cloud: Option<CloudClient>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        config.validate()?;
        if config.he_enabled && more_key.is_none() {
            return Err(Error::Validation("he_enabled requires a MORE key".into()));
        }
        let pkey = PseudonymKey::from_hex(&config.pseudonymization_key)?;
        let cloud = cloud.map(|mut c| {
            c.poll_interval_ms = config.poll_interval_ms;
            c
        });
        let mut node = EdgeNode {
            config,
            schema,
            pkey,
            more_key,
            cloud,
            clock,
            store: PatientStore::default(),
            store_log: None,
            models: BTreeMap::new(),
            he_uploaded: BTreeMap::new(),
            suggestion_cache: Mutex::new(BTreeMap::new()),
            model_evaluations: AtomicU64::new(0),
        };
        if let Some(dir) = node.config.data_dir.clone() {
            fs::create_dir_all(&dir)?;
            let path = dir.join("patients.jsonl");
            if path.exists() {
                for line in BufReader::new(File::open(&path)?).lines() {
                    let line = line?;
                    let Ok(event) = serde_json::from_str::<StoreEvent>(&line) else { break };
                    node.store.apply(event);
                }
            }
            node.store_log = Some(OpenOptions::new().create(true).append(true).open(path)?);
            let token_path = dir.join("cloud_token");
            if let (Some(c), Ok(tok)) = (node.cloud.as_mut(), fs::read_to_string(&token_path)) {
                c.set_token(Some(tok.trim().to_owned()));
            }
        }
        Ok(node)
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn store(&self) -> &PatientStore {
        &self.store
    }

    pub fn model_entry(&self, key: &ModelKey) -> Option<&ModelEntry> {
        self.models.get(key)
    }

    pub fn model_entries(&self) -> &BTreeMap<ModelKey, ModelEntry> {
        &self.models
    }

    pub fn model_evaluations(&self) -> u64 {
        self.model_evaluations.load(Ordering::Relaxed)
    }

    pub fn pseudonym_of(&self, patient_id: &str) -> Result<Pseudonym> {
        pseudonymize(patient_id, &self.pkey)
    }

    /// SHA-256 over the stored patient data and model selections.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.store).unwrap_or_default());
        h.update(serde_json::to_vec(&self.models).unwrap_or_default());
        hex::encode(h.finalize())
    }

    pub fn health(&self) -> Health {
        Health {
            edge_id: self.config.edge_id.clone(),
            patients: self.store.pseudonyms().len(),
            models: self.models.len(),
            federation_enabled: self.config.federation_enabled,
            he_enabled: self.config.he_enabled,
            registered: self.cloud.as_ref().is_some_and(|c| c.token().is_some()),
        }
    }

    fn commit(&mut self, event: StoreEvent) -> Result<()> {
        if let Some(f) = self.store_log.as_mut() {
            let mut line = serde_json::to_vec(&event)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        self.store.apply(event);
        Ok(())
    }

    pub fn ingest_his_bytes(&mut self, payload: &[u8]) -> Result<IngestReport> {
        let payload: HisPayload = serde_json::from_slice(payload)?;
        self.ingest_his_payload(payload)
    }

    /// Validates, pseudonymizes and stores every entry; bad entries are
    /// rejected one by one.
    pub fn ingest_his_payload(&mut self, payload: HisPayload) -> Result<IngestReport> {
        let mut report = IngestReport::default();
        let mut reject =
            |section: &str, index: usize, reason: String| report.rejections.push(Rejection { section: section.into(), index, reason });
        let mut accepted = Vec::new();
        let mut latest: BTreeMap<Pseudonym, Timestamp> = BTreeMap::new();
        for (i, raw) in payload.records.into_iter().enumerate() {
            let pseudonym = match pseudonymize(&raw.patient_id, &self.pkey) {
                Ok(p) => p,
                Err(e) => {
                    reject("records", i, e.to_string());
                    continue;
                }
            };
            let record = PatientRecord { pseudonym, cancer_type: raw.cancer_type, features: raw.features, recorded_at: raw.recorded_at };
            let violations = validate_record(&record, &self.schema);
            if !violations.is_empty() {
                let reasons: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                reject("records", i, reasons.join("; "));
                continue;
            }
            let prev =
                latest.get(&record.pseudonym).copied().or_else(|| self.store.latest_record(&record.pseudonym).map(|r| r.recorded_at));
            if prev.is_some_and(|p| record.recorded_at < p) {
                reject("records", i, format!("recorded_at {} precedes the patient's latest record", record.recorded_at));
                continue;
            }
            latest.insert(record.pseudonym.clone(), record.recorded_at);
            accepted.push(StoreEvent::Record(record));
        }
        for (i, raw) in payload.observations.into_iter().enumerate() {
            let pseudonym = match pseudonymize(&raw.patient_id, &self.pkey) {
                Ok(p) => p,
                Err(e) => {
                    reject("observations", i, e.to_string());
                    continue;
                }
            };
            if let Some(unknown) = raw.issue_scores.keys().find(|k| !self.config.issues.contains(k)) {
                reject("observations", i, format!("unknown issue `{unknown}`"));
                continue;
            }
            let obs =
                QoLObservation { pseudonym, measured_at: raw.measured_at, overall_qol: raw.overall_qol, issue_scores: raw.issue_scores };
            if let Err(e) = obs.validate() {
                reject("observations", i, e.to_string());
                continue;
            }
            accepted.push(StoreEvent::Observation(obs));
        }
        for (i, raw) in payload.interventions.into_iter().enumerate() {
            let pseudonym = match pseudonymize(&raw.patient_id, &self.pkey) {
                Ok(p) => p,
                Err(e) => {
                    reject("interventions", i, e.to_string());
                    continue;
                }
            };
            if let Err(e) = raw.intervention.validate() {
                reject("interventions", i, e.to_string());
                continue;
            }
            accepted.push(StoreEvent::Intervention { pseudonym, intervention: raw.intervention });
        }
        report.ingested = accepted.len();
        for e in accepted {
            self.commit(e)?;
        }
        Ok(report)
    }

    pub fn ingest_aggregator_bytes(&mut self, source: &str, payload: &[u8]) -> Result<IngestReport> {
        if !self.config.aggregator_sources.iter().any(|s| s == source) {
            return Err(Error::UnknownAggregator(source.to_owned()));
        }
        let payload: AggregatorPayload = serde_json::from_slice(payload)?;
        self.ingest_aggregator_payload(source, payload)
    }

    /// Merges device data into the patient's latest record at or before the
    /// entry's timestamp. Only registered devices of known patients pass.
    pub fn ingest_aggregator_payload(&mut self, source: &str, payload: AggregatorPayload) -> Result<IngestReport> {
        if !self.config.aggregator_sources.iter().any(|s| s == source) {
            return Err(Error::UnknownAggregator(source.to_owned()));
        }
        let mut report = IngestReport::default();
        for (i, entry) in payload.entries.into_iter().enumerate() {
            let outcome = (|| -> Result<StoreEvent> {
                let pseudonym = pseudonymize(&entry.patient_id, &self.pkey)?;
                if self.store.latest_record(&pseudonym).is_none() {
                    return Err(Error::NotFound("unknown patient".into()));
                }
                if !self.store.wearables.get(&pseudonym).is_some_and(|d| d.contains(&entry.device_id)) {
                    return Err(Error::Validation(format!("device `{}` is not registered", entry.device_id)));
                }
                if !self.store.records.iter().any(|r| r.pseudonym == pseudonym && r.recorded_at <= entry.recorded_at) {
                    return Err(Error::Validation("no record at or before the entry time".into()));
                }
                for (name, v) in &entry.features {
                    if self.schema.index_of(name).is_none() {
                        return Err(Error::SchemaMismatch(format!("unknown feature `{name}`")));
                    }
                    if !v.is_finite() {
                        return Err(Error::Validation(format!("feature `{name}` is not finite")));
                    }
                }
                Ok(StoreEvent::Merge { pseudonym, recorded_at: entry.recorded_at, features: entry.features.clone() })
            })();
            match outcome {
                Ok(event) => {
                    self.commit(event)?;
                    report.ingested += 1;
                }
                Err(e) => report.rejections.push(Rejection { section: "entries".into(), index: i, reason: e.to_string() }),
            }
        }
        Ok(report)
    }

    fn require_patient(&self, p: &Pseudonym) -> Result<&PatientRecord> {
        self.store.latest_record(p).ok_or_else(|| Error::NotFound(format!("patient {p}")))
    }

    pub fn register_wearable(&mut self, p: &Pseudonym, device_id: &str) -> Result<()> {
        self.require_patient(p)?;
        if device_id.is_empty() {
            return Err(Error::Validation("device_id must be non-empty".into()));
        }
        if self.store.wearables.get(p).is_some_and(|d| d.contains(device_id)) {
            return Ok(());
        }
        self.commit(StoreEvent::WearableAdded { pseudonym: p.clone(), device_id: device_id.to_owned() })
    }

    pub fn deregister_wearable(&mut self, p: &Pseudonym, device_id: &str) -> Result<()> {
        self.require_patient(p)?;
        if !self.store.wearables.get(p).is_some_and(|d| d.contains(device_id)) {
            return Ok(());
        }
        self.commit(StoreEvent::WearableRemoved { pseudonym: p.clone(), device_id: device_id.to_owned() })
    }

    pub fn wearables(&self, p: &Pseudonym) -> Result<BTreeSet<String>> {
        self.require_patient(p)?;
        Ok(self.store.wearables.get(p).cloned().unwrap_or_default())
    }

    pub fn patients(&self) -> Vec<PatientSummary> {
        self.store
            .pseudonyms()
            .into_iter()
            .filter_map(|p| {
                let r = self.store.latest_record(p)?;
                Some(PatientSummary {
                    pseudonym: p.clone(),
                    cancer_type: r.cancer_type,
                    last_recorded_at: r.recorded_at,
                    observations: self.store.observations.iter().filter(|o| &o.pseudonym == p).count(),
                })
            })
            .collect()
    }

    /// The local training dataset for a key. Classification keys label
    /// scores at or above 50 as the positive class.
    pub fn local_dataset(&self, key: &ModelKey) -> Result<TrainingDataset> {
        let mut ds = extract_training_dataset_with_interventions(
            &self.store.records,
            &self.store.observations,
            &self.store.interventions,
            &self.schema,
            key.cancer_type,
            &key.target_variable,
        )?;
        if key.task == Task::Classification {
            ds.targets.iter_mut().for_each(|t| *t = if *t >= 50.0 { 1.0 } else { 0.0 });
        }
        Ok(ds)
    }

    /// Seeded 80/20 split into (train, holdout).
    pub fn split(&self, ds: &TrainingDataset) -> (TrainingDataset, TrainingDataset) {
        if ds.n < 2 {
            return (ds.clone(), ds.clone());
        }
        let mut idx: Vec<usize> = (0..ds.n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.split_seed));
        let holdout_n = ((ds.n as f64 * 0.2).round() as usize).clamp(1, ds.n - 1);
        let (hold, train) = idx.split_at(holdout_n);
        let mut train = train.to_vec();
        let mut hold = hold.to_vec();
        train.sort_unstable();
        hold.sort_unstable();
        (ds.select(&train), ds.select(&hold))
    }

    fn training_config(&self, key: &ModelKey) -> TrainingConfig {
        TrainingConfig { task: key.task, ..self.config.training.clone() }
    }

    fn train_local(&self, key: &ModelKey, train: &TrainingDataset, init: Option<&Model>) -> Result<Model> {
        let cfg = self.training_config(key);
        match key.family {
            ModelFamily::Linear => Ok(Model::Linear(train_linear_with_backoff(train, &cfg, init.and_then(Model::as_linear))?)),
            ModelFamily::Tree => Ok(Model::Tree(train_tree(train, &cfg)?)),
        }
    }

    fn federates(&self, key: &ModelKey) -> bool {
        self.config.federation_enabled && self.cloud.is_some() && key.family == ModelFamily::Linear
    }

    fn he_applies(&self, key: &ModelKey) -> bool {
        self.config.he_enabled && self.cloud.is_some() && key.family == ModelFamily::Linear && key.task == Task::Regression
    }

    /// Extracts and splits local data, trains the local candidate, uploads
    /// encrypted training data when enabled and prepares federation.
    pub fn ensure_begin(&mut self, key: &ModelKey) -> Result<EnsureJob> {
        let ds = self.local_dataset(key)?;
        let (train, holdout) = self.split(&ds);
        let local = self.train_local(key, &train, None)?;
        let mut job = EnsureJob {
            key: key.clone(),
            train,
            holdout,
            local,
            federated: None,
            phase: if self.federates(key) { Phase::Declare } else { Phase::Done },
            waiting: false,
            degraded: false,
            warnings: Vec::new(),
        };
        if self.he_applies(key) && self.he_uploaded.get(key) != Some(&self.store.revision) {
            if let Err(e) = self.upload_encrypted(&job.train) {
                self.note_cloud_failure(&mut job, "encrypted upload", e)?;
            } else {
                self.he_uploaded.insert(key.clone(), self.store.revision);
            }
        }
        Ok(job)
    }

    fn upload_encrypted(&mut self, train: &TrainingDataset) -> Result<()> {
        let key = self.more_key.as_ref().ok_or_else(|| Error::FeatureDisabled("no MORE key".into()))?;
        let mut seed = Sha256::new();
        seed.update(self.config.edge_id.as_bytes());
        seed.update(self.store.revision.to_be_bytes());
        seed.update(self.config.split_seed.to_be_bytes());
        let seed: [u8; 32] = seed.finalize().into();
        let dataset = encrypt_dataset(key, train, &mut ChaCha8Rng::from_seed(seed))?;
        self.cloud_call(&CloudRequest::UploadEncrypted { dataset })?;
        Ok(())
    }

    fn cloud_call(&mut self, request: &CloudRequest) -> Result<CloudResponse> {
        let cloud = self.cloud.as_mut().ok_or_else(|| Error::Unreachable("no cloud configured".into()))?;
        let result = cloud.call(request);
        if let (Some(dir), Some(tok)) = (self.config.data_dir.as_ref(), cloud.token()) {
            let _ = fs::write(dir.join("cloud_token"), tok);
        }
        result
    }

    /// Records a cloud failure on the job and falls back to local-only.
    /// Errors other than unreachability and protocol/auth conflicts propagate.
    fn note_cloud_failure(&self, job: &mut EnsureJob, what: &str, e: Error) -> Result<()> {
        match e {
            Error::Unreachable(_) | Error::Auth(_) | Error::Protocol(_) | Error::Decode(_) | Error::Storage(_) => {
                log::warn!("{}: {what} failed, continuing locally: {e}", self.config.edge_id);
                job.degraded = true;
                job.warnings.push(format!("{what}: {e}"));
                job.phase = Phase::Done;
                job.waiting = false;
                Ok(())
            }
            other => Err(other),
        }
    }

    /// Performs one protocol exchange for `job`. Returns true when done.
    pub fn ensure_step(&mut self, job: &mut EnsureJob) -> Result<bool> {
        let follow = match std::mem::replace(&mut job.phase, Phase::Done) {
            Phase::Done => return Ok(true),
            Phase::Declare => None,
            Phase::Follow(s) => Some(s),
            Phase::Train(d) => {
                if let Err(e) = self.train_and_update(job, *d) {
                    self.note_cloud_failure(job, "federated update", e)?;
                }
                return Ok(job.is_done());
            }
        };
        let req = CloudRequest::Declare { model_key: job.key.clone(), follow_session: follow };
        let outcome = match self.cloud_call(&req) {
            Ok(CloudResponse::Directive(d)) => self.follow_directive(job, d),
            Ok(other) => Err(unexpected(&other)),
            Err(e) => Err(e),
        };
        if let Err(e) = outcome {
            self.note_cloud_failure(job, "declare", e)?;
        }
        Ok(job.is_done())
    }

    fn follow_directive(&mut self, job: &mut EnsureJob, d: Directive) -> Result<()> {
        job.waiting = false;
        match d.mode {
            FederationMode::Idle => {
                if let Some(rec) = d.global {
                    job.federated = Some((rec.model()?, rec.version));
                }
                job.phase = Phase::Done;
            }
            _ if d.submitted => {
                job.phase = Phase::Follow(d.session);
                job.waiting = true;
            }
            _ => job.phase = Phase::Train(Box::new(d)),
        }
        Ok(())
    }

    fn train_and_update(&mut self, job: &mut EnsureJob, d: Directive) -> Result<()> {
        let model = match &d.base {
            None => job.local.clone(),
            Some(base) => self.train_local(&job.key, &job.train, Some(base))?,
        };
        let round = (d.mode == FederationMode::SemiConcurrent).then_some(d.round);
        let req = CloudRequest::Update { model_key: job.key.clone(), model, sample_count: job.train.n as u64, round, session: d.session };
        job.phase = Phase::Follow(d.session);
        match self.cloud_call(&req) {
            Ok(CloudResponse::Update(UpdateOutcome::Final { record })) => {
                job.federated = Some((record.model()?, record.version));
                job.phase = Phase::Done;
            }
            Ok(CloudResponse::Update(UpdateOutcome::Ack { .. })) => job.waiting = true,
            Ok(CloudResponse::Update(UpdateOutcome::NextRound { .. })) => {}
            Ok(other) => return Err(unexpected(&other)),
            // The session moved on; the next declare fetches where it stands.
            Err(Error::StaleRound { .. }) | Err(Error::Protocol(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Evaluates every available candidate on the holdout split and records
    /// the best one.
    pub fn ensure_finish(&mut self, mut job: EnsureJob) -> Result<ModelSelection> {
        let mut models: BTreeMap<CandidateSource, (Model, Option<u64>)> = BTreeMap::new();
        models.insert(CandidateSource::Local, (job.local.clone(), None));
        if let Some((m, v)) = job.federated.take() {
            if m.schema_hash() == job.holdout.schema_hash && m.arity() == job.holdout.arity() {
                models.insert(CandidateSource::FederatedGlobal, (m, Some(v)));
            } else {
                job.warnings.push("federated global has a different schema".into());
            }
        }
        if self.he_applies(&job.key) {
            match self.fetch_models(&job.key) {
                Ok(view) => {
                    if let (Some(rec), Some(key)) = (view.he, self.more_key.as_ref()) {
                        let m = Model::Linear(decrypt_model(key, &rec.model));
                        if m.validate().is_ok() && m.arity() == job.holdout.arity() {
                            models.insert(CandidateSource::HeGlobal, (m, Some(rec.version)));
                        } else {
                            job.warnings.push("encrypted global decrypted to an invalid model".into());
                        }
                    }
                }
                Err(e) => self.note_cloud_failure(&mut job, "fetch encrypted model", e)?,
            }
        }
        let mut candidates = Vec::new();
        let mut best: Option<(CandidateSource, Metrics)> = None;
        for (source, (model, version)) in &models {
            let metrics = evaluate(model, &job.holdout)?;
            if best.as_ref().is_none_or(|(_, b)| metrics.better_than(b)) {
                best = Some((*source, metrics));
            }
            candidates.push(Candidate { source: *source, metrics, version: *version });
        }
        let chosen = best.expect("local candidate always present").0;
        let selection = ModelSelection {
            model_key: job.key.clone(),
            candidates,
            chosen,
            evaluated_at: self.clock.now(),
            degraded: job.degraded,
            warnings: job.warnings,
        };
        let version = self.models.get(&job.key).map_or(1, |e| e.version + 1);
        self.models.insert(
            job.key.clone(),
            ModelEntry {
                selection: selection.clone(),
                chosen: models[&chosen].0.clone(),
                models: models.into_iter().map(|(s, (m, _))| (s, m)).collect(),
                version,
            },
        );
        Ok(selection)
    }

    /// Blocking model refresh: local training, federation, selection.
    pub fn ensure_model(&mut self, key: &ModelKey) -> Result<ModelSelection> {
        let mut job = self.ensure_begin(key)?;
        let mut steps = 0;
        while !self.ensure_step(&mut job)? {
            steps += 1;
            if steps >= self.config.ensure_max_steps {
                job.abandon(format!("gave up waiting for federation after {steps} polls"));
                break;
            }
            if job.waiting && self.config.poll_interval_ms > 0 {
                std::thread::sleep(std::time::Duration::from_millis(self.config.poll_interval_ms));
            }
        }
        self.ensure_finish(job)
    }

    /// Adopts an externally trained model as the local candidate for `key`,
    /// scored on the local holdout split.
    pub fn install_model(&mut self, key: &ModelKey, model: Model) -> Result<ModelSelection> {
        model.validate()?;
        if model.arity() != self.schema.arity() || model.schema_hash() != self.schema.hash() {
            return Err(Error::SchemaMismatch(format!("model does not match the edge schema for {key}")));
        }
        let ds = self.local_dataset(key)?;
        let metrics = evaluate(&model, &self.split(&ds).1)?;
        let selection = ModelSelection {
            model_key: key.clone(),
            candidates: vec![Candidate { source: CandidateSource::Local, metrics, version: None }],
            chosen: CandidateSource::Local,
            evaluated_at: self.clock.now(),
            degraded: false,
            warnings: vec!["installed model".into()],
        };
        let version = self.models.get(key).map_or(1, |e| e.version + 1);
        let entry = ModelEntry {
            selection: selection.clone(),
            chosen: model.clone(),
            models: BTreeMap::from([(CandidateSource::Local, model)]),
            version,
        };
        self.models.insert(key.clone(), entry);
        Ok(selection)
    }

    /// The feature vector used for a patient's current prediction under
    /// `key`'s chosen model.
    pub fn prediction_features(&self, p: &Pseudonym, key: &ModelKey) -> Result<Vec<f64>> {
        let entry = self.models.get(key).ok_or_else(|| Error::NotFound(format!("model {key} not ensured")))?;
        let t0 = self.store.reference_time(p).ok_or_else(|| Error::NotFound(format!("patient {p}")))?;
        self.feature_vector(p, &entry.chosen, t0, &active_interventions(self.store.interventions_of(p), t0))
    }

    pub fn fetch_models(&mut self, key: &ModelKey) -> Result<ModelsView> {
        match self.cloud_call(&CloudRequest::FetchModels { model_key: key.clone() })? {
            CloudResponse::Models(v) => Ok(v),
            other => Err(unexpected(&other)),
        }
    }

    /// Chosen model for a patient's cancer type and target: the first
    /// ensured key in key order, regression preferred.
    fn model_for(&self, cancer_type: CancerType, target: &str) -> Option<(&ModelKey, &ModelEntry)> {
        let matching = || self.models.iter().filter(move |(k, _)| k.cancer_type == cancer_type && k.target_variable == target);
        matching().find(|(k, _)| k.task == Task::Regression).or_else(|| matching().next())
    }

    /// Feature vector of a patient at time `at` with the given intervention
    /// indicators switched on and all others off.
    pub fn feature_vector(&self, p: &Pseudonym, model: &Model, at: Timestamp, on: &BTreeSet<String>) -> Result<Vec<f64>> {
        let rec = self
            .store
            .records
            .iter()
            .filter(|r| &r.pseudonym == p && r.recorded_at <= at)
            .max_by_key(|r| r.recorded_at)
            .or_else(|| self.store.latest_record(p))
            .ok_or_else(|| Error::NotFound(format!("patient {p}")))?;
        let means = model.feature_means();
        let mut x: Vec<f64> = self
            .schema
            .names()
            .enumerate()
            .map(|(j, name)| rec.features.get(name).copied().filter(|v| v.is_finite()).unwrap_or(means[j]))
            .collect();
        if let Some(i) = self.schema.index_of(TIME_FEATURE) {
            if rec.features.get(TIME_FEATURE).is_some_and(|v| v.is_finite()) {
                x[i] += (at - rec.recorded_at) as f64 / SECONDS_PER_DAY as f64;
            }
        }
        for id in self.schema.intervention_ids() {
            if let Some(j) = self.schema.intervention_index(&id) {
                x[j] = if on.contains(&id) { 1.0 } else { 0.0 };
            }
        }
        Ok(x)
    }

    fn check_intervention_ids(&self, ids: &BTreeSet<String>) -> Result<()> {
        match ids.iter().find(|id| self.schema.index_of(&intervention_feature(id)).is_none()) {
            Some(id) => Err(Error::SchemaMismatch(format!("intervention `{id}` has no indicator feature"))),
            None => Ok(()),
        }
    }

    fn trajectory(
        &self,
        p: &Pseudonym,
        targets: &[String],
        horizon: usize,
        assuming: &BTreeSet<String>,
    ) -> Result<(Vec<PredictedPoint>, BTreeMap<String, Attribution>)> {
        let rec = self.require_patient(p)?;
        let t0 = self.store.reference_time(p).expect("patient exists");
        let step = self.config.step_days * SECONDS_PER_DAY;
        let mut points = Vec::new();
        let mut attributions = BTreeMap::new();
        for target in targets {
            let Some((_, entry)) = self.model_for(rec.cancer_type, target) else { continue };
            let model = &entry.chosen;
            let mut last = None;
            for k in 1..=horizon {
                let time = t0 + k as i64 * step;
                let x = self.feature_vector(p, model, time, assuming)?;
                let value = model.predict(&x)?;
                points.push(PredictedPoint { time, target_variable: target.clone(), value, assuming: assuming.clone() });
                last = Some(x);
            }
            if let Some(x) = last {
                let predict = |v: &[f64]| model.predict(v).unwrap_or(f64::NAN);
                let sv = shapley(&predict, &x, model.feature_means(), &self.config.shapley)?;
                attributions.insert(target.clone(), name_values(&self.schema, sv));
            }
        }
        Ok((points, attributions))
    }

    fn default_targets(&self, targets: &[String]) -> Vec<String> {
        if targets.is_empty() {
            std::iter::once(crate::domain::OVERALL_QOL.to_owned()).chain(self.config.issues.iter().cloned()).collect()
        } else {
            targets.to_vec()
        }
    }

    pub fn active_set(&self, p: &Pseudonym) -> Result<BTreeSet<String>> {
        self.require_patient(p)?;
        let t0 = self.store.reference_time(p).expect("patient exists");
        Ok(active_interventions(self.store.interventions_of(p), t0))
    }

    /// Recorded data plus predictions assuming currently active
    /// interventions persist. Empty `targets` means overall QoL and every
    /// configured issue.
    pub fn get_timeline(&self, p: &Pseudonym, targets: &[String], horizon: usize) -> Result<Timeline> {
        let assuming = self.active_set(p)?;
        let targets = self.default_targets(targets);
        let (predictions, attributions) = self.trajectory(p, &targets, horizon, &assuming)?;
        Ok(Timeline {
            pseudonym: p.clone(),
            observations: self.store.observations_of(p),
            interventions: self.store.interventions_of(p).to_vec(),
            predictions,
            attributions,
        })
    }

    /// Predictions with the intervention indicators forced to `ids`.
    pub fn what_if(&self, p: &Pseudonym, ids: &BTreeSet<String>, targets: &[String], horizon: usize) -> Result<Vec<PredictedPoint>> {
        self.require_patient(p)?;
        self.check_intervention_ids(ids)?;
        let targets = self.default_targets(targets);
        Ok(self.trajectory(p, &targets, horizon, ids)?.0)
    }

    /// Ranked intervention sets for a patient, cached until the chosen
    /// model or the patient's features change. Empty when no model exists.
    pub fn suggest_interventions(&self, p: &Pseudonym, target: &str) -> Result<Vec<InterventionSuggestion>> {
        let rec = self.require_patient(p)?;
        let Some((key, entry)) = self.model_for(rec.cancer_type, target) else { return Ok(Vec::new()) };
        let t0 = self.store.reference_time(p).expect("patient exists");
        let x = self.feature_vector(p, &entry.chosen, t0, &active_interventions(self.store.interventions_of(p), t0))?;
        let mut tag = format!("{key}#{}", entry.version);
        for v in &x {
            tag.push_str(&format!(":{:016x}", v.to_bits()));
        }
        let cache_key = (p.clone(), target.to_owned());
        let mut cache = self.suggestion_cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((t, hit)) = cache.get(&cache_key) {
            if *t == tag {
                return Ok(hit.clone());
            }
        }
        let model = &entry.chosen;
        let counter = &self.model_evaluations;
        let predict = |v: &[f64]| {
            counter.fetch_add(1, Ordering::Relaxed);
            model.predict(v).unwrap_or(f64::NAN)
        };
        let candidates = self.schema.intervention_ids();
        let out = simulate_interventions(&predict, &self.schema, &x, &candidates, self.config.max_combo, target)?;
        cache.insert(cache_key, (tag, out.clone()));
        Ok(out)
    }

    /// Encrypted prediction through the cloud's encrypted model.
    pub fn he_predict(&mut self, p: &Pseudonym, key: &ModelKey) -> Result<f64> {
        if !self.config.he_enabled {
            return Err(Error::FeatureDisabled("homomorphic encryption is disabled on this edge".into()));
        }
        let entry = self.models.get(key).ok_or_else(|| Error::NotFound(format!("model {key} not ensured")))?;
        let t0 = self.store.reference_time(p).ok_or_else(|| Error::NotFound(format!("patient {p}")))?;
        let x = self.feature_vector(p, &entry.chosen, t0, &active_interventions(self.store.interventions_of(p), t0))?;
        let more_key = self.more_key.clone().ok_or_else(|| Error::FeatureDisabled("no MORE key".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.store.revision ^ self.config.split_seed);
        let max_polls = self.config.he_max_polls;
        let cloud = self.cloud.as_mut().ok_or_else(|| Error::Unreachable("no cloud configured".into()))?;
        encrypted_predict(cloud, key, &more_key, &x, &mut rng, max_polls)?.ok_or(Error::HeTimeout(max_polls))
    }

    /// Asks the cloud to coordinate a global surrogate for `key`.
    pub fn request_global_surrogate(&mut self, key: &ModelKey, kind: SurrogateKind) -> Result<SurrogateTask> {
        let req = CloudRequest::Surrogate { model_key: key.clone(), action: SurrogateAction::Start { kind } };
        match self.cloud_call(&req)? {
            CloudResponse::Tasks(mut t) if !t.is_empty() => Ok(t.remove(0)),
            other => Err(unexpected(&other)),
        }
    }

    pub fn fetch_global_surrogates(&mut self, key: &ModelKey) -> Result<Vec<GlobalSurrogate>> {
        let req = CloudRequest::Surrogate { model_key: key.clone(), action: SurrogateAction::Fetch };
        match self.cloud_call(&req)? {
            CloudResponse::Surrogates(s) => Ok(s),
            other => Err(unexpected(&other)),
        }
    }

    /// Polls for surrogate tasks and completes each one. Returns the
    /// submissions made.
    pub fn run_surrogate_tasks(&mut self) -> Result<Vec<SurrogateSubmission>> {
        let tasks = match self.cloud_call(&CloudRequest::PollTasks)? {
            CloudResponse::Tasks(t) => t,
            other => return Err(unexpected(&other)),
        };
        let mut done = Vec::new();
        for task in tasks {
            let sub = self.surrogate_for_task(&task)?;
            let req = CloudRequest::Surrogate { model_key: task.model_key.clone(), action: SurrogateAction::Submit(sub.clone()) };
            self.cloud_call(&req)?;
            done.push(sub);
        }
        Ok(done)
    }

    /// Labels the local rows with the global model and fits a surrogate.
    pub fn surrogate_for_task(&mut self, task: &SurrogateTask) -> Result<SurrogateSubmission> {
        let ds = self.local_dataset(&task.model_key)?;
        let primary = PrimaryRef { model_key: task.model_key.clone(), version: task.primary_version, encrypted: task.encrypted };
        let cfg = self.config.surrogate_training.clone();
        let surrogate = if task.encrypted {
            let key = self.more_key.clone().ok_or_else(|| Error::FeatureDisabled("no MORE key".into()))?;
            let max_polls = self.config.he_max_polls;
            let cloud = self.cloud.as_mut().ok_or_else(|| Error::Unreachable("no cloud configured".into()))?;
            surrogate_via_encrypted_labels(cloud, &ds.rows, &key, task.kind, &cfg, &primary, ds.schema_hash, max_polls)?
        } else {
            let global = self
                .fetch_models(&task.model_key)?
                .global
                .ok_or_else(|| Error::NotFound(format!("no global model for {}", task.model_key)))?
                .model()?;
            let predict = |x: &[f64]| global.predict(x).unwrap_or(f64::NAN);
            train_surrogate(&predict, &ds.rows, task.kind, &cfg, &primary, ds.schema_hash)?
        };
        Ok(SurrogateSubmission {
            task_id: task.task_id,
            model: surrogate.inner,
            fidelity_r2: surrogate.fidelity_r2,
            sample_count: ds.n as u64,
        })
    }

    pub fn leave_federation(&mut self) -> Result<()> {
        let cloud = self.cloud.as_mut().ok_or_else(|| Error::Unreachable("no cloud configured".into()))?;
        cloud.deregister()
    }

    /// Direct access for harnesses that need to label with the encrypted
    /// model outside a task.
    pub fn cloud_client(&mut self) -> Option<&mut CloudClient> {
        self.cloud.as_mut()
    }

    pub fn more_key(&self) -> Option<&MoreKey> {
        self.more_key.as_ref()
    }
}
