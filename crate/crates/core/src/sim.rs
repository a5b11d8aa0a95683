//! Synthetic cohorts and scenario-driven runs of a whole federation: N edge
//! nodes and one cloud on a simulated clock, producing a checkable report.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{Cloud, CloudConfig, LocalTransport};
use crate::domain::{
    extract_training_dataset_with_interventions, pseudonymize, CancerType, FeatureKind, FeatureSchema, FeatureSpec, Intervention,
    InterventionKind, ModelKey, Pseudonym, PseudonymKey, Timestamp, TrainingDataset, INTERVENTION_PREFIX, OVERALL_QOL, SECONDS_PER_DAY,
    TIME_FEATURE,
};
use crate::edge::{CandidateSource, CloudClient, EdgeConfig, EdgeNode, HisPayload, RawIntervention, RawObservation, RawRecord};
use crate::error::{Error, Result};
use crate::explain::SurrogateKind;
use crate::ml::{evaluate, train_linear, Model, TrainingConfig};
use crate::more::{decrypt_model, keygen, MoreKey};
use crate::protocol::{Clock, CloudTransport, EventLog, LoggingTransport, Party, SimClock, TransportEvent};

/// Simulated time at which every scenario starts.
pub const SIM_EPOCH: Timestamp = 1_700_000_000;

const ADMISSION_SECRET: &str = "sim-admission";

fn default_one() -> f64 {
    1.0
}

fn default_half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFeature {
    pub name: String,
    #[serde(default = "numeric")]
    pub kind: FeatureKind,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_one")]
    pub std: f64,
    /// Probability of 1 for binary features.
    #[serde(default = "default_half")]
    pub p: f64,
}

fn numeric() -> FeatureKind {
    FeatureKind::Numeric
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimIntervention {
    pub id: String,
    pub kind: InterventionKind,
    /// Fraction of patients who receive it at some point.
    pub prevalence: f64,
}

/// True generative model of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnAction {
    Join,
    Leave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    /// Seconds after the scenario start.
    pub time: i64,
    pub action: ChurnAction,
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Expectations {
    /// Federated holdout RMSE may exceed the centralized one by this fraction.
    pub federated_rel_tol: Option<f64>,
    /// Minimum number of edges whose local model is strictly worse than the
    /// federated one.
    pub local_worse_at_least: Option<usize>,
    pub he_tolerance: f64,
    pub surrogate_min_fidelity: Option<f64>,
}

impl Default for Expectations {
    fn default() -> Self {
        Self { federated_rel_tol: None, local_worse_at_least: None, he_tolerance: 1e-6, surrogate_min_fidelity: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub n_edges: usize,
    pub cohort_size: usize,
    /// Per-edge override of `cohort_size`.
    #[serde(default)]
    pub cohort_sizes: Option<Vec<usize>>,
    #[serde(default = "default_observations")]
    pub observations_per_patient: usize,
    #[serde(default = "default_holdout")]
    pub holdout_size: usize,
    #[serde(default = "default_cancer")]
    pub cancer_type: CancerType,
    pub features: Vec<SimFeature>,
    #[serde(default)]
    pub interventions: Vec<SimIntervention>,
    pub targets: BTreeMap<String, TargetTruth>,
    #[serde(default = "default_true")]
    pub iid: bool,
    /// Per-edge mean shift, in feature standard deviations, when not IID.
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub churn_events: Vec<ChurnEvent>,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_deadline")]
    pub round_deadline_secs: i64,
    #[serde(default)]
    pub he_enabled: bool,
    #[serde(default)]
    pub surrogates: bool,
    #[serde(default = "default_query_patients")]
    pub query_patients: usize,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub expectations: Expectations,
}

fn default_observations() -> usize {
    4
}
fn default_holdout() -> usize {
    1000
}
fn default_cancer() -> CancerType {
    CancerType::Breast
}
fn default_true() -> bool {
    true
}
fn default_rounds() -> u32 {
    5
}
fn default_deadline() -> i64 {
    30
}
fn default_query_patients() -> usize {
    3
}

impl ScenarioSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: Self = serde_json::from_slice(bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("scenario {}: {m}", self.name)));
        if self.n_edges == 0 {
            return fail("n_edges must be >= 1".into());
        }
        if let Some(sizes) = &self.cohort_sizes {
            if sizes.len() != self.n_edges {
                return fail(format!("cohort_sizes has {} entries for {} edges", sizes.len(), self.n_edges));
            }
        }
        if self.rounds == 0 || self.round_deadline_secs <= 0 {
            return fail("rounds and round_deadline_secs must be positive".into());
        }
        if self.targets.is_empty() {
            return fail("at least one target is required".into());
        }
        for f in &self.features {
            if !(f.std.is_finite() && f.std >= 0.0 && f.mean.is_finite() && (0.0..=1.0).contains(&f.p)) {
                return fail(format!("feature `{}` has invalid distribution parameters", f.name));
            }
        }
        for iv in &self.interventions {
            if !(0.0..=1.0).contains(&iv.prevalence) {
                return fail(format!("intervention `{}` prevalence outside [0,1]", iv.id));
            }
        }
        let schema = self.schema()?;
        for (target, truth) in &self.targets {
            if let Some(name) = truth.coefficients.keys().find(|n| schema.index_of(n).is_none()) {
                return fail(format!("target `{target}` has a coefficient for unknown feature `{name}`"));
            }
            if !(truth.noise_sigma.is_finite() && truth.noise_sigma >= 0.0) {
                return fail(format!("target `{target}` noise_sigma must be >= 0"));
            }
        }
        let mut last = i64::MIN;
        for e in &self.churn_events {
            if e.time < last {
                return fail("churn events must be ordered by time".into());
            }
            if e.edge >= self.n_edges {
                return fail(format!("churn event for unknown edge {}", e.edge));
            }
            last = e.time;
        }
        self.training.validate()
    }

    /// Scenario features, then the time feature, then one indicator per
    /// intervention.
    pub fn schema(&self) -> Result<FeatureSchema> {
        let mut specs: Vec<FeatureSpec> =
            self.features.iter().map(|f| FeatureSpec { name: f.name.clone(), kind: f.kind, required: true }).collect();
        specs.push(FeatureSpec::numeric(TIME_FEATURE).required());
        specs.extend(self.interventions.iter().map(|iv| FeatureSpec::binary(&format!("{INTERVENTION_PREFIX}{}", iv.id))));
        FeatureSchema::new(specs)
    }

    pub fn cohort_size(&self, edge: usize) -> usize {
        self.cohort_sizes.as_ref().map_or(self.cohort_size, |s| s[edge])
    }

    pub fn edge_id(edge: usize) -> String {
        format!("edge-{edge}")
    }

    pub fn model_keys(&self) -> Vec<ModelKey> {
        self.targets.keys().map(|t| ModelKey::linear_regression(self.cancer_type, t)).collect()
    }

    /// Edges active before any churn event: those whose first event is not a join.
    pub fn initial_edges(&self) -> Vec<usize> {
        (0..self.n_edges)
            .filter(|i| self.churn_events.iter().find(|e| e.edge == *i).is_none_or(|e| e.action != ChurnAction::Join))
            .collect()
    }
}

/// One edge's synthetic hospital export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub records: Vec<RawRecord>,
    pub observations: Vec<RawObservation>,
    pub interventions: Vec<RawIntervention>,
    pub truth: BTreeMap<String, TargetTruth>,
}

impl Cohort {
    pub fn payload(&self) -> HisPayload {
        HisPayload { records: self.records.clone(), observations: self.observations.clone(), interventions: self.interventions.clone() }
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }
}

/// Stream used for the shared evaluation cohort.
const HOLDOUT_STREAM: u64 = u64::MAX;

/// Deterministic cohort for `edge`: features from seeded distributions
/// (shifted per edge when not IID), targets from the true linear model plus
/// Gaussian noise, clipped to [0, 100].
pub fn generate_cohort(spec: &ScenarioSpec, edge: usize) -> Cohort {
    generate(spec, edge as u64, spec.cohort_size(edge), &format!("PAT-{edge}"), |_| edge)
}

/// Evaluation cohort drawn from the edges' pooled distribution.
pub fn generate_holdout(spec: &ScenarioSpec) -> Cohort {
    let n = spec.n_edges.max(1);
    generate(spec, HOLDOUT_STREAM, spec.holdout_size, "HOLD", |i| i % n)
}

fn generate(spec: &ScenarioSpec, stream: u64, size: usize, prefix: &str, dist_of: impl Fn(usize) -> usize) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let step = 30 * SECONDS_PER_DAY;
    let mut cohort = Cohort { records: Vec::new(), observations: Vec::new(), interventions: Vec::new(), truth: spec.targets.clone() };
    for i in 0..size {
        let patient_id = format!("{prefix}-{i:05}");
        let shift = if spec.iid { 0.0 } else { spec.shift * dist_of(i) as f64 };
        let mut features = BTreeMap::new();
        for f in &spec.features {
            let v = match f.kind {
                FeatureKind::Numeric => f.mean + f.std * (standard_normal(&mut rng) + shift),
                FeatureKind::Binary => {
                    let p = (f.p + 0.1 * shift).clamp(0.0, 1.0);
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            features.insert(f.name.clone(), v);
        }
        let days0 = rng.random_range(0.0..60.0_f64).round();
        features.insert(TIME_FEATURE.to_owned(), days0);
        let recorded_at = SIM_EPOCH - 200 * SECONDS_PER_DAY + rng.random_range(0..30) * SECONDS_PER_DAY;
        let k = spec.observations_per_patient;
        let mut starts: BTreeMap<&str, usize> = BTreeMap::new();
        for iv in &spec.interventions {
            let draw: f64 = rng.random();
            let start = rng.random_range(0..k.max(1));
            if draw < iv.prevalence {
                starts.insert(&iv.id, start);
                cohort.interventions.push(RawIntervention {
                    patient_id: patient_id.clone(),
                    intervention: Intervention {
                        id: iv.id.clone(),
                        kind: iv.kind,
                        name: iv.id.replace('_', " "),
                        start: recorded_at + start as i64 * step,
                        end: None,
                    },
                });
            }
        }
        for j in 0..k {
            let mut x = features.clone();
            x.insert(TIME_FEATURE.to_owned(), days0 + 30.0 * j as f64);
            for iv in &spec.interventions {
                let on = starts.get(iv.id.as_str()).is_some_and(|s| *s <= j);
                x.insert(format!("{INTERVENTION_PREFIX}{}", iv.id), if on { 1.0 } else { 0.0 });
            }
            let mut values = BTreeMap::new();
            for (target, truth) in &spec.targets {
                let mean = truth.intercept + truth.coefficients.iter().map(|(n, w)| w * x[n]).sum::<f64>();
                let noise = truth.noise_sigma * standard_normal(&mut rng);
                values.insert(target.clone(), (mean + noise).clamp(0.0, 100.0));
            }
            let overall = values.remove(OVERALL_QOL).unwrap_or(50.0);
            cohort.observations.push(RawObservation {
                patient_id: patient_id.clone(),
                measured_at: recorded_at + j as i64 * step,
                overall_qol: overall,
                issue_scores: values,
            });
        }
        cohort.records.push(RawRecord { patient_id, cancer_type: spec.cancer_type, features, recorded_at });
    }
    cohort
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// How edges reach the cloud.
pub trait Network {
    fn name(&self) -> &str;
    fn connect(&mut self, cloud: &Arc<Mutex<Cloud>>, edge_id: &str) -> Result<Box<dyn CloudTransport>>;
}

/// Function-call message bus: requests are serialized and handed to the
/// cloud in the same thread.
pub struct InProcess;

impl Network for InProcess {
    fn name(&self) -> &str {
        "in_process"
    }

    fn connect(&mut self, cloud: &Arc<Mutex<Cloud>>, _edge_id: &str) -> Result<Box<dyn CloudTransport>> {
        Ok(Box::new(LocalTransport::new(cloud.clone())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTargetReport {
    pub edge_id: String,
    pub train_rows: usize,
    pub local_rmse: f64,
    pub chosen: CandidateSource,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub centralized_rmse: f64,
    pub federated_rmse: Option<f64>,
    pub global_version: Option<u64>,
    pub global_sha256: Option<String>,
    pub edges: Vec<EdgeTargetReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeReport {
    pub target: String,
    pub effective_learning_rate: f64,
    pub epochs: u32,
    /// Largest relative difference between decrypted encrypted-training
    /// parameters and plaintext training on the same pooled rows.
    pub parameter_delta: f64,
    /// Largest difference between encrypted inference and the decrypted
    /// model's plaintext prediction.
    pub prediction_delta: f64,
    pub predictions_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnReport {
    pub time: i64,
    pub action: ChurnAction,
    pub edge_id: String,
    /// Global model digests per target, before and after a leave.
    pub globals_before: BTreeMap<String, String>,
    pub globals_after: BTreeMap<String, String>,
    /// For a join: the fetched global's RMSE on the new edge's holdout split
    /// next to that of its cold local model.
    pub joined: Vec<JoinCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinCheck {
    pub target: String,
    pub global_rmse: f64,
    pub cold_local_rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub patients: usize,
    pub timeline_points: usize,
    pub max_what_if_gap: f64,
    pub max_efficiency_gap: f64,
    pub suggestions: usize,
    pub cache_hits_without_evaluation: usize,
    pub state_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub target: String,
    pub kind: SurrogateKind,
    pub fidelity_r2: f64,
    pub contributing_edges: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub transport: String,
    /// Wall-clock seconds; the only field that varies between reruns.
    pub generated_at: i64,
    pub expectations: Expectations,
    pub targets: Vec<TargetReport>,
    pub he: Vec<HeReport>,
    pub churn: Vec<ChurnReport>,
    pub queries: QueryReport,
    pub surrogates: Vec<SurrogateReport>,
    pub events: Vec<TransportEvent>,
    pub privacy_hits: Vec<(u64, String)>,
    pub assertions: Vec<Assertion>,
    pub passed: bool,
}

impl ScenarioReport {
    /// The report with its wall-clock timestamp cleared, for comparing reruns.
    pub fn without_timestamps(&self) -> Self {
        Self { generated_at: 0, ..self.clone() }
    }

    pub fn failures(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }
}

struct SimEdge {
    node: EdgeNode,
    patient_ids: Vec<String>,
}

struct Harness<'a> {
    spec: &'a ScenarioSpec,
    schema: FeatureSchema,
    keys: Vec<ModelKey>,
    clock: Arc<SimClock>,
    cloud: Arc<Mutex<Cloud>>,
    log: EventLog,
    network: &'a mut dyn Network,
    more_key: Option<MoreKey>,
    edges: BTreeMap<String, SimEdge>,
    departed_ids: Vec<String>,
    holdout: BTreeMap<String, TrainingDataset>,
    assertions: Vec<Assertion>,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn rmse(model: &Model, ds: &TrainingDataset) -> Result<f64> {
    Ok(evaluate(model, ds)?.rmse().unwrap_or(f64::INFINITY))
}

fn relative_delta(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

impl Harness<'_> {
    fn check(&mut self, name: &str, passed: bool, detail: String) {
        if !passed {
            log::warn!("{}: assertion {name} failed: {detail}", self.spec.name);
        }
        self.assertions.push(Assertion { name: name.to_owned(), passed, detail });
    }

    fn cloud(&self) -> std::sync::MutexGuard<'_, Cloud> {
        self.cloud.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn boot_edge(&mut self, index: usize) -> Result<()> {
        let edge_id = ScenarioSpec::edge_id(index);
        let pkey = PseudonymKey::derive(&format!("{}:{}:{edge_id}", self.spec.name, self.spec.seed));
        let config = EdgeConfig {
            edge_id: edge_id.clone(),
            admission_secret: ADMISSION_SECRET.into(),
            pseudonymization_key: hex::encode(pkey.as_bytes()),
            federation_enabled: true,
            he_enabled: self.spec.he_enabled,
            training: self.spec.training.clone(),
            split_seed: self.spec.seed.wrapping_add(index as u64),
            ..EdgeConfig::default()
        };
        let inner = self.network.connect(&self.cloud, &edge_id)?;
        let transport = LoggingTransport::new(inner, &edge_id, self.log.clone());
        let client = CloudClient::new(Box::new(transport), &edge_id, ADMISSION_SECRET);
        let mut node = EdgeNode::new(config, self.schema.clone(), self.more_key.clone(), Some(client), self.clock.clone())?;
        let cohort = generate_cohort(self.spec, index);
        let report = node.ingest_his_payload(cohort.payload())?;
        let expected = cohort.records.len() + cohort.observations.len() + cohort.interventions.len();
        self.check(
            &format!("ingest_clean/{edge_id}"),
            report.rejections.is_empty() && report.ingested == expected,
            format!("{} of {expected} entries ingested, {} rejected", report.ingested, report.rejections.len()),
        );
        self.edges.insert(edge_id, SimEdge { node, patient_ids: cohort.patient_ids() });
        Ok(())
    }

    /// Runs `ensure_model` for every key on every active edge, stepping the
    /// edges in turn so they meet in semi-concurrent rounds.
    fn train_all(&mut self) -> Result<()> {
        for key in self.keys.clone() {
            let ids: Vec<String> = self.edges.keys().cloned().collect();
            let mut jobs = Vec::new();
            for id in &ids {
                jobs.push(self.edges.get_mut(id).expect("listed").node.ensure_begin(&key)?);
            }
            if self.spec.he_enabled {
                self.cloud().train_he_models()?;
            }
            let mut idle_passes = 0;
            while jobs.iter().any(|j| !j.is_done()) {
                let active: Vec<usize> = (0..jobs.len()).filter(|&i| !jobs[i].is_done() && !jobs[i].waiting).collect();
                let turn = if active.is_empty() { (0..jobs.len()).filter(|&i| !jobs[i].is_done()).collect() } else { active.clone() };
                for i in turn {
                    self.edges.get_mut(&ids[i]).expect("listed").node.ensure_step(&mut jobs[i])?;
                }
                if active.is_empty() && jobs.iter().all(|j| j.is_done() || j.waiting) {
                    idle_passes += 1;
                    self.clock.advance(self.spec.round_deadline_secs + 1);
                    if idle_passes > 4 * self.spec.rounds as usize + 8 {
                        return Err(Error::Protocol(format!("federation for {key} made no progress")));
                    }
                }
            }
            for (id, job) in ids.iter().zip(jobs) {
                self.edges.get_mut(id).expect("listed").node.ensure_finish(job)?;
            }
        }
        Ok(())
    }

    fn edge_split(&self, id: &str, key: &ModelKey) -> Result<(TrainingDataset, TrainingDataset)> {
        let node = &self.edges[id].node;
        Ok(node.split(&node.local_dataset(key)?))
    }

    fn evaluate_targets(&mut self) -> Result<Vec<TargetReport>> {
        let mut out = Vec::new();
        for key in self.keys.clone() {
            let holdout = self.holdout[&key.target_variable].clone();
            let mut pooled: Option<TrainingDataset> = None;
            let mut edges = Vec::new();
            for id in self.edges.keys() {
                let (train, _) = self.edge_split(id, &key)?;
                pooled = Some(match pooled {
                    None => train.clone(),
                    Some(p) => p.concat(&train)?,
                });
                let entry = self.edges[id].node.model_entry(&key).ok_or_else(|| Error::NotFound(format!("{key} on {id}")))?;
                edges.push(EdgeTargetReport {
                    edge_id: id.clone(),
                    train_rows: train.n,
                    local_rmse: rmse(&entry.models[&CandidateSource::Local], &holdout)?,
                    chosen: entry.selection.chosen,
                    degraded: entry.selection.degraded,
                });
            }
            let pooled = pooled.ok_or(Error::EmptyDataset)?;
            let central = Model::Linear(train_linear(&pooled, &self.spec.training, None)?);
            let centralized_rmse = rmse(&central, &holdout)?;
            let global = self.cloud().global(&key).cloned();
            let (federated_rmse, global_version, global_sha256) = match &global {
                Some(rec) => (Some(rmse(&rec.model()?, &holdout)?), Some(rec.version), Some(sha(rec.model_bytes.as_bytes()))),
                None => (None, None, None),
            };
            let report = TargetReport {
                target: key.target_variable.clone(),
                centralized_rmse,
                federated_rmse,
                global_version,
                global_sha256,
                edges,
            };
            self.check_target(&report);
            out.push(report);
        }
        Ok(out)
    }

    fn check_target(&mut self, r: &TargetReport) {
        let exp = self.spec.expectations.clone();
        if let Some(tol) = exp.federated_rel_tol {
            let ok = r.federated_rmse.is_some_and(|f| f <= (1.0 + tol) * r.centralized_rmse);
            self.check(
                &format!("federated_convergence/{}", r.target),
                ok,
                format!("federated {:?} vs centralized {:.6} (tolerance {tol})", r.federated_rmse, r.centralized_rmse),
            );
        }
        if let Some(min) = exp.local_worse_at_least {
            let worse = r.federated_rmse.map_or(0, |f| r.edges.iter().filter(|e| e.local_rmse > f).count());
            self.check(
                &format!("local_worse_than_federated/{}", r.target),
                worse >= min,
                format!("{worse} of {} local models worse than federated (need {min})", r.edges.len()),
            );
        }
    }

    fn he_checks(&mut self) -> Result<Vec<HeReport>> {
        let Some(more_key) = self.more_key.clone() else { return Ok(Vec::new()) };
        let mut out = Vec::new();
        for key in self.keys.clone() {
            let Some(rec) = self.cloud().he_model(&key).cloned() else {
                self.check(&format!("he_model_trained/{}", key.target_variable), false, "no encrypted model".into());
                continue;
            };
            // The cloud merges contributions in edge-id order.
            let mut pooled: Option<TrainingDataset> = None;
            for id in self.edges.keys() {
                let (train, _) = self.edge_split(id, &key)?;
                pooled = Some(match pooled {
                    None => train,
                    Some(p) => p.concat(&train)?,
                });
            }
            let pooled = pooled.ok_or(Error::EmptyDataset)?;
            let he_cfg = self.cloud().config().he_training.clone();
            let cfg = TrainingConfig { learning_rate: rec.effective_learning_rate, epochs: rec.epochs, ..he_cfg };
            let plain = train_linear(&pooled, &cfg, None)?;
            let decrypted = decrypt_model(&more_key, &rec.model);
            let parameter_delta = decrypted
                .weights
                .iter()
                .zip(&plain.weights)
                .chain([(&decrypted.bias, &plain.bias)])
                .map(|(a, b)| relative_delta(*a, *b))
                .fold(0.0, f64::max);
            let he_model = Model::Linear(decrypted);
            let mut prediction_delta: f64 = 0.0;
            let mut checked = 0;
            let first = self.edges.keys().next().cloned().expect("at least one edge");
            let patients: Vec<Pseudonym> =
                self.edges[&first].node.store().pseudonyms().into_iter().take(self.spec.query_patients).cloned().collect();
            for p in patients {
                let node = &mut self.edges.get_mut(&first).expect("listed").node;
                let x = node.prediction_features(&p, &key)?;
                let encrypted = node.he_predict(&p, &key)?;
                prediction_delta = prediction_delta.max(relative_delta(encrypted, he_model.predict(&x)?));
                checked += 1;
            }
            let tol = self.spec.expectations.he_tolerance;
            self.check(
                &format!("he_equivalence/{}", key.target_variable),
                parameter_delta <= tol && prediction_delta <= tol,
                format!("parameter delta {parameter_delta:.3e}, prediction delta {prediction_delta:.3e} (tolerance {tol:e})"),
            );
            out.push(HeReport {
                target: key.target_variable.clone(),
                effective_learning_rate: rec.effective_learning_rate,
                epochs: rec.epochs,
                parameter_delta,
                prediction_delta,
                predictions_checked: checked,
            });
        }
        Ok(out)
    }

    fn query_checks(&mut self) -> Result<QueryReport> {
        let mut q = QueryReport { state_unchanged: true, ..QueryReport::default() };
        let targets: Vec<String> = self.keys.iter().map(|k| k.target_variable.clone()).collect();
        for edge in self.edges.values() {
            let node = &edge.node;
            let before = node.state_digest();
            let patients: Vec<Pseudonym> = node.store().pseudonyms().into_iter().take(self.spec.query_patients).cloned().collect();
            for p in &patients {
                q.patients += 1;
                let timeline = node.get_timeline(p, &targets, 2)?;
                q.timeline_points += timeline.predictions.len();
                for a in timeline.attributions.values() {
                    q.max_efficiency_gap = q.max_efficiency_gap.max(a.efficiency_gap().abs());
                }
                let what_if = node.what_if(p, &node.active_set(p)?, &targets, 2)?;
                let gap = if what_if.len() == timeline.predictions.len() {
                    what_if.iter().zip(&timeline.predictions).map(|(a, b)| (a.value - b.value).abs()).fold(0.0, f64::max)
                } else {
                    f64::INFINITY
                };
                q.max_what_if_gap = q.max_what_if_gap.max(gap);
                let first = node.suggest_interventions(p, &targets[0])?;
                let evaluations = node.model_evaluations();
                let second = node.suggest_interventions(p, &targets[0])?;
                q.suggestions += first.len();
                if first == second && node.model_evaluations() == evaluations {
                    q.cache_hits_without_evaluation += 1;
                }
            }
            q.state_unchanged &= node.state_digest() == before;
        }
        self.check(
            "what_if_matches_timeline",
            q.max_what_if_gap <= 1e-9,
            format!("largest gap {:.3e} over {} patients", q.max_what_if_gap, q.patients),
        );
        self.check("attribution_efficiency", q.max_efficiency_gap <= 1e-6, format!("largest gap {:.3e}", q.max_efficiency_gap));
        self.check(
            "suggestion_cache",
            q.cache_hits_without_evaluation == q.patients,
            format!("{} of {} repeat calls served from cache", q.cache_hits_without_evaluation, q.patients),
        );
        self.check("read_only_queries", q.state_unchanged, "state digest compared before and after queries".into());
        Ok(q)
    }

    fn surrogate_checks(&mut self) -> Result<Vec<SurrogateReport>> {
        if !self.spec.surrogates {
            return Ok(Vec::new());
        }
        let key = self.keys[0].clone();
        let first = self.edges.keys().next().cloned().expect("at least one edge");
        self.edges.get_mut(&first).expect("listed").node.request_global_surrogate(&key, SurrogateKind::Linear)?;
        for edge in self.edges.values_mut() {
            edge.node.run_surrogate_tasks()?;
        }
        let globals = self.edges.get_mut(&first).expect("listed").node.fetch_global_surrogates(&key)?;
        let out: Vec<SurrogateReport> = globals
            .into_iter()
            .map(|g| SurrogateReport {
                target: key.target_variable.clone(),
                kind: g.kind,
                fidelity_r2: g.fidelity_r2,
                contributing_edges: g.contributing_edges,
            })
            .collect();
        if let Some(min) = self.spec.expectations.surrogate_min_fidelity {
            let fid = out.iter().map(|s| s.fidelity_r2).fold(f64::NAN, f64::max);
            self.check("surrogate_fidelity", fid >= min, format!("fidelity {fid:.6} (need {min})"));
        }
        Ok(out)
    }

    fn global_digests(&mut self, via: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for key in self.keys.clone() {
            let view = self.edges.get_mut(via).expect("listed").node.fetch_models(&key)?;
            if let Some(g) = view.global {
                out.insert(key.target_variable.clone(), sha(g.model_bytes.as_bytes()));
            }
        }
        Ok(out)
    }

    fn apply_churn(&mut self, event: &ChurnEvent) -> Result<ChurnReport> {
        let at = SIM_EPOCH + event.time;
        if at > self.clock.now() {
            self.clock.set(at);
        }
        let edge_id = ScenarioSpec::edge_id(event.edge);
        let mut report = ChurnReport {
            time: event.time,
            action: event.action,
            edge_id: edge_id.clone(),
            globals_before: BTreeMap::new(),
            globals_after: BTreeMap::new(),
            joined: Vec::new(),
        };
        match event.action {
            ChurnAction::Leave => {
                let Some(mut leaving) = self.edges.remove(&edge_id) else {
                    return Err(Error::Validation(format!("{edge_id} is not active")));
                };
                let witness = self.edges.keys().next().cloned();
                if let Some(w) = &witness {
                    report.globals_before = self.global_digests(w)?;
                }
                leaving.node.leave_federation()?;
                self.departed_ids.extend(leaving.patient_ids);
                if let Some(w) = &witness {
                    report.globals_after = self.global_digests(w)?;
                }
                self.check(
                    &format!("churn_leave_preserves_models/{edge_id}"),
                    witness.is_some() && !report.globals_before.is_empty() && report.globals_before == report.globals_after,
                    format!("{} global digests compared across the departure", report.globals_before.len()),
                );
            }
            ChurnAction::Join => {
                if self.edges.contains_key(&edge_id) {
                    return Err(Error::Validation(format!("{edge_id} is already active")));
                }
                self.boot_edge(event.edge)?;
                for key in self.keys.clone() {
                    let (_, holdout) = self.edge_split(&edge_id, &key)?;
                    let node = &mut self.edges.get_mut(&edge_id).expect("booted").node;
                    let global = node.fetch_models(&key)?.global.map(|g| g.model()).transpose()?;
                    let selection = node.ensure_model(&key)?;
                    let cold = &node.model_entry(&key).expect("ensured").models[&CandidateSource::Local];
                    let check = JoinCheck {
                        target: key.target_variable.clone(),
                        global_rmse: global.as_ref().map_or(Ok(f64::INFINITY), |g| rmse(g, &holdout))?,
                        cold_local_rmse: rmse(cold, &holdout)?,
                    };
                    self.check(
                        &format!("churn_join_benefits/{edge_id}/{}", key.target_variable),
                        check.global_rmse < check.cold_local_rmse && !selection.degraded,
                        format!("global {:.4} vs cold local {:.4}", check.global_rmse, check.cold_local_rmse),
                    );
                    report.joined.push(check);
                }
            }
        }
        Ok(report)
    }
}

/// Boots the cloud and the edges, drives every phase of the scenario on a
/// simulated clock and returns the report with its assertions evaluated.
pub fn run_scenario(spec: &ScenarioSpec, network: &mut dyn Network) -> Result<ScenarioReport> {
    spec.validate()?;
    let schema = spec.schema()?;
    let clock = Arc::new(SimClock::new(SIM_EPOCH));
    let cloud_config = CloudConfig {
        admission_secret: ADMISSION_SECRET.into(),
        token_secret: Some(format!("{}:{}:tokens", spec.name, spec.seed)),
        rounds: spec.rounds,
        round_deadline_secs: spec.round_deadline_secs,
        ..CloudConfig::default()
    };
    let cloud = Arc::new(Mutex::new(Cloud::in_memory(cloud_config, clock.clone())?));
    let more_key = if spec.he_enabled { Some(keygen(spec.seed)?) } else { None };

    let holdout_cohort = generate_holdout(spec);
    let hkey = PseudonymKey::derive(&format!("{}:{}:holdout", spec.name, spec.seed));
    let mut records = Vec::new();
    let mut observations = Vec::new();
    let mut interventions: BTreeMap<Pseudonym, Vec<Intervention>> = BTreeMap::new();
    for r in &holdout_cohort.records {
        records.push(crate::domain::PatientRecord {
            pseudonym: pseudonymize(&r.patient_id, &hkey)?,
            cancer_type: r.cancer_type,
            features: r.features.clone(),
            recorded_at: r.recorded_at,
        });
    }
    for o in &holdout_cohort.observations {
        observations.push(crate::domain::QoLObservation {
            pseudonym: pseudonymize(&o.patient_id, &hkey)?,
            measured_at: o.measured_at,
            overall_qol: o.overall_qol,
            issue_scores: o.issue_scores.clone(),
        });
    }
    for iv in &holdout_cohort.interventions {
        interventions.entry(pseudonymize(&iv.patient_id, &hkey)?).or_default().push(iv.intervention.clone());
    }
    let mut holdout = BTreeMap::new();
    for key in spec.model_keys() {
        let ds = extract_training_dataset_with_interventions(
            &records,
            &observations,
            &interventions,
            &schema,
            key.cancer_type,
            &key.target_variable,
        )?;
        holdout.insert(key.target_variable.clone(), ds);
    }

    let mut h = Harness {
        spec,
        schema,
        keys: spec.model_keys(),
        clock,
        cloud,
        log: EventLog::new(true),
        network,
        more_key,
        edges: BTreeMap::new(),
        departed_ids: Vec::new(),
        holdout,
        assertions: Vec::new(),
    };
    for i in spec.initial_edges() {
        h.boot_edge(i)?;
    }
    h.train_all()?;
    let targets = h.evaluate_targets()?;
    let he = h.he_checks()?;
    let queries = h.query_checks()?;
    let surrogates = h.surrogate_checks()?;
    let mut churn = Vec::new();
    for event in &spec.churn_events {
        churn.push(h.apply_churn(event)?);
    }

    let mut needles: Vec<String> = h.edges.values().flat_map(|e| e.patient_ids.iter().cloned()).collect();
    needles.extend(h.departed_ids.iter().cloned());
    let privacy_hits = h.log.scan(&needles);
    let events = h.log.events();
    h.check("privacy_scan", privacy_hits.is_empty(), format!("{} raw identifiers scanned, {} hits", needles.len(), privacy_hits.len()));
    let cloud_initiated = events.iter().filter(|e| e.initiator != Party::Edge).count();
    h.check("edge_initiated_only", cloud_initiated == 0, format!("{cloud_initiated} of {} exchanges initiated by the cloud", events.len()));

    let passed = h.assertions.iter().all(|a| a.passed);
    Ok(ScenarioReport {
        scenario: spec.name.clone(),
        seed: spec.seed,
        transport: h.network.name().to_owned(),
        generated_at: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64),
        expectations: spec.expectations.clone(),
        targets,
        he,
        churn,
        queries,
        surrogates,
        events,
        privacy_hits,
        assertions: h.assertions,
        passed,
    })
}

/// Re-checks a report independently of the run that produced it. Returns
/// the names of the failed checks, each with a reason.
pub fn verify_report(report: &ScenarioReport) -> Vec<String> {
    let mut failures = Vec::new();
    let mut fail = |name: &str, why: String| failures.push(format!("{name}: {why}"));
    if let Some(e) = report.events.iter().find(|e| e.initiator != Party::Edge) {
        fail("edge_initiated_only", format!("event {} ({}) was initiated by the cloud", e.seq, e.operation));
    }
    if let Some((seq, _)) = report.privacy_hits.first() {
        fail("privacy_scan", format!("{} raw identifiers found, first in event {seq}", report.privacy_hits.len()));
    }
    let exp = &report.expectations;
    for t in &report.targets {
        if let Some(tol) = exp.federated_rel_tol {
            match t.federated_rmse {
                Some(f) if f <= (1.0 + tol) * t.centralized_rmse => {}
                other => fail(
                    &format!("federated_convergence/{}", t.target),
                    format!("federated {other:?} vs centralized {}", t.centralized_rmse),
                ),
            }
        }
        if let Some(min) = exp.local_worse_at_least {
            let worse = t.federated_rmse.map_or(0, |f| t.edges.iter().filter(|e| e.local_rmse > f).count());
            if worse < min {
                fail(&format!("local_worse_than_federated/{}", t.target), format!("{worse} < {min}"));
            }
        }
    }
    for h in &report.he {
        if !(h.parameter_delta <= exp.he_tolerance && h.prediction_delta <= exp.he_tolerance) {
            fail(
                &format!("he_equivalence/{}", h.target),
                format!("deltas {:e}/{:e} exceed {:e}", h.parameter_delta, h.prediction_delta, exp.he_tolerance),
            );
        }
    }
    for c in &report.churn {
        match c.action {
            ChurnAction::Leave if c.globals_before.is_empty() || c.globals_before != c.globals_after => {
                fail(&format!("churn_leave_preserves_models/{}", c.edge_id), "global model changed".into())
            }
            ChurnAction::Join => {
                for j in c.joined.iter().filter(|j| !(j.global_rmse < j.cold_local_rmse)) {
                    fail(
                        &format!("churn_join_benefits/{}/{}", c.edge_id, j.target),
                        format!("global {} vs cold local {}", j.global_rmse, j.cold_local_rmse),
                    );
                }
            }
            _ => {}
        }
    }
    if let Some(min) = exp.surrogate_min_fidelity {
        if !report.surrogates.iter().any(|s| s.fidelity_r2 >= min) {
            fail("surrogate_fidelity", format!("no surrogate reaches {min}"));
        }
    }
    if report.queries.max_what_if_gap > 1e-9 {
        fail("what_if_matches_timeline", format!("gap {:e}", report.queries.max_what_if_gap));
    }
    if report.queries.max_efficiency_gap > 1e-6 {
        fail("attribution_efficiency", format!("gap {:e}", report.queries.max_efficiency_gap));
    }
    for a in report.assertions.iter().filter(|a| !a.passed) {
        fail(&a.name, a.detail.clone());
    }
    if report.passed != report.assertions.iter().all(|a| a.passed) {
        fail("report_consistency", "pass flag disagrees with the assertions".into());
    }
    failures.sort();
    failures.dedup();
    failures
}

/// Scenarios shipped with the library, by name.
pub fn bundled_scenarios() -> Vec<(&'static str, &'static str)> {
    vec![
        ("iid-3edges", include_str!("../scenarios/iid-3edges.json")),
        ("churn-leave", include_str!("../scenarios/churn-leave.json")),
        ("churn-join", include_str!("../scenarios/churn-join.json")),
        ("he-2edges", include_str!("../scenarios/he-2edges.json")),
    ]
}

pub fn bundled_scenario(name: &str) -> Result<ScenarioSpec> {
    let (_, json) =
        bundled_scenarios().into_iter().find(|(n, _)| *n == name).ok_or_else(|| Error::NotFound(format!("bundled scenario `{name}`")))?;
    ScenarioSpec::from_json(json.as_bytes())
}
