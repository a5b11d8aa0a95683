use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use fedcare_core::cloud::{Cloud, CloudConfig, LocalTransport};
use fedcare_core::domain::{
    CancerType, FeatureSchema, FeatureSpec, ModelKey, Pseudonym, PseudonymKey, Task, SECONDS_PER_DAY, TIME_FEATURE,
};
use fedcare_core::edge::{AggregatorPayload, CandidateSource, CloudClient, EdgeConfig, EdgeNode};
use fedcare_core::explain::simulate_interventions;
use fedcare_core::ml::{train_linear, LinearModel, Model, TrainingConfig};
use fedcare_core::more::{decrypt_model, keygen};
use fedcare_core::protocol::{
    CloudRequest, CloudResponse, CloudTransport, EdgeRegistration, EdgeStatus, EventLog, InferencePoll, LoggingTransport, ModelsView,
    SimClock, TicketStatus,
};
use fedcare_core::{Error, Result};
use serde_json::json;

const T0: i64 = 1_700_000_000;
const DAY: i64 = SECONDS_PER_DAY;

fn schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec::numeric("age").required(),
        FeatureSpec::numeric("steps"),
        FeatureSpec::numeric(TIME_FEATURE),
        FeatureSpec::binary("iv_exercise"),
        FeatureSpec::binary("iv_psych"),
    ])
    .unwrap()
}

fn key() -> ModelKey {
    ModelKey::linear_regression(CancerType::Breast, "overall_qol")
}

fn config(edge_id: &str) -> EdgeConfig {
    EdgeConfig {
        edge_id: edge_id.into(),
        admission_secret: "s3cret".into(),
        pseudonymization_key: hex::encode(PseudonymKey::derive(edge_id).as_bytes()),
        he_max_polls: 5,
        ..EdgeConfig::default()
    }
}

fn node(cfg: EdgeConfig, client: Option<CloudClient>) -> EdgeNode {
    let more = cfg.he_enabled.then(|| keygen(3).unwrap());
    EdgeNode::new(cfg, schema(), more, client, Arc::new(SimClock::new(T0))).unwrap()
}

/// `n` patients with a linear QoL response: 10 + 0.2·age + 2·steps +
/// 0.01·days + 5·exercise + 3·psych, observed every 30 days.
fn cohort(prefix: &str, n: usize, obs: usize) -> serde_json::Value {
    let mut records = Vec::new();
    let mut observations = Vec::new();
    let mut interventions = Vec::new();
    for i in 0..n {
        let id = format!("{prefix}-{i:04}");
        let age = 40.0 + ((i * 7) % 30) as f64;
        let steps = ((i * 13) % 10) as f64;
        let days0 = (i % 5) as f64;
        let rec_at = T0 - 200 * DAY;
        records.push(json!({"patient_id": id, "cancer_type": "breast", "recorded_at": rec_at,
            "features": {"age": age, "steps": steps, TIME_FEATURE: days0}}));
        let ex_start = (i % 3) as i64;
        if i % 2 == 0 {
            interventions.push(json!({"patient_id": id, "id": "exercise", "kind": "non_pharmacological",
                "name": "Exercise", "start": rec_at + ex_start * 30 * DAY}));
        }
        if i % 3 == 0 {
            interventions.push(json!({"patient_id": id, "id": "psych", "kind": "non_pharmacological",
                "name": "Psych", "start": rec_at + 30 * DAY, "end": rec_at + 60 * DAY}));
        }
        for j in 0..obs {
            let t = rec_at + j as i64 * 30 * DAY;
            let ex = if i % 2 == 0 && j as i64 >= ex_start { 1.0 } else { 0.0 };
            let ps = if i % 3 == 0 && j == 1 { 1.0 } else { 0.0 };
            let days = days0 + 30.0 * j as f64;
            let noise = (((i * 31 + j * 17) % 11) as f64 - 5.0) * 0.3;
            let q = 10.0 + 0.2 * age + 2.0 * steps + 0.01 * days + 5.0 * ex + 3.0 * ps + noise;
            observations.push(json!({"patient_id": id, "measured_at": t, "overall_qol": q,
                "issue_scores": {"fatigue": 100.0 - q}}));
        }
    }
    json!({"records": records, "observations": observations, "interventions": interventions})
}

fn records_only(n: usize) -> serde_json::Value {
    json!({"records": cohort("P", n, 0)["records"]})
}

fn ingest(n: &mut EdgeNode, v: serde_json::Value) -> fedcare_core::edge::IngestReport {
    n.ingest_his_bytes(&serde_json::to_vec(&v).unwrap()).unwrap()
}

fn pid(n: &EdgeNode, id: &str) -> Pseudonym {
    n.pseudonym_of(id).unwrap()
}

struct Down;

impl CloudTransport for Down {
    fn send(&mut self, _: Option<&str>, _: &CloudRequest) -> Result<CloudResponse> {
        Err(Error::Unreachable("connection refused".into()))
    }
}

/// Accepts everything but never finishes an inference request.
struct Pending;

impl CloudTransport for Pending {
    fn send(&mut self, _: Option<&str>, req: &CloudRequest) -> Result<CloudResponse> {
        Ok(match req {
            CloudRequest::Register { edge_id, .. } => CloudResponse::Registered(EdgeRegistration {
                edge_id: edge_id.clone(),
                bearer_token: "tok".into(),
                status: EdgeStatus::Active,
                joined_at: 0,
                departed_at: None,
            }),
            CloudRequest::FetchModels { .. } => CloudResponse::Models(ModelsView { global: None, he: None }),
            CloudRequest::SubmitInference { .. } => CloudResponse::InferenceSubmitted { request_id: "req-1".into() },
            CloudRequest::PollInference { request_id } => CloudResponse::Inference(InferencePoll {
                request_id: request_id.clone(),
                status: TicketStatus::AwaitingModel,
                encrypted_result: None,
            }),
            _ => CloudResponse::Ack,
        })
    }
}

fn client(t: impl CloudTransport + 'static, id: &str) -> CloudClient {
    CloudClient::new(Box::new(t), id, "s3cret")
}

fn shared_cloud() -> Arc<Mutex<Cloud>> {
    let cfg = CloudConfig { admission_secret: "s3cret".into(), ..CloudConfig::default() };
    Arc::new(Mutex::new(Cloud::in_memory(cfg, Arc::new(SimClock::new(T0))).unwrap()))
}

/// Linear model with +5 on exercise and +3 on psych.
fn known_model() -> Model {
    Model::Linear(LinearModel::new(vec![0.2, 2.0, 0.01, 5.0, 3.0], 10.0, schema().hash(), Task::Regression))
}

#[test]
fn ingests_valid_records() {
    let mut n = node(config("e"), None);
    let r = ingest(&mut n, records_only(3));
    assert_eq!((r.ingested, r.rejections.len()), (3, 0));
    assert_eq!(n.store().records.len(), 3);
}

#[test]
fn rejects_non_finite_feature_individually() {
    let mut n = node(config("e"), None);
    let mut v = records_only(3);
    v["records"][1]["features"]["steps"] = json!("NaN");
    let r = ingest(&mut n, v);
    assert_eq!(r.ingested, 2);
    assert_eq!(r.rejections.len(), 1);
    assert_eq!((r.rejections[0].section.as_str(), r.rejections[0].index), ("records", 1));
}

#[test]
fn unparseable_payload_is_decode_error() {
    let mut n = node(config("e"), None);
    assert!(matches!(n.ingest_his_bytes(b"{records: oops"), Err(Error::Decode(_))));
}

#[test]
fn store_never_holds_raw_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EdgeConfig { data_dir: Some(dir.path().into()), ..config("e") };
    let mut n = node(cfg, None);
    ingest(&mut n, cohort("PATIENT", 20, 3));
    let state = serde_json::to_string(n.store()).unwrap();
    let log = std::fs::read_to_string(dir.path().join("patients.jsonl")).unwrap();
    for i in 0..20 {
        let id = format!("PATIENT-{i:04}");
        assert!(!state.contains(&id) && !log.contains(&id), "{id} leaked");
    }
}

#[test]
fn store_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EdgeConfig { data_dir: Some(dir.path().into()), ..config("e") };
    let mut n = node(cfg.clone(), None);
    ingest(&mut n, cohort("P", 4, 2));
    let p = pid(&n, "P-0001");
    n.register_wearable(&p, "watch").unwrap();
    let before = n.store().clone();
    drop(n);
    let n = node(cfg, None);
    assert_eq!(n.store(), &before);
}

#[test]
fn out_of_order_records_are_rejected() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 1, 0));
    let v = json!({"records": [{"patient_id": "P-0000", "cancer_type": "breast", "recorded_at": T0 - 400 * DAY,
        "features": {"age": 50.0}}]});
    let r = ingest(&mut n, v);
    assert_eq!((r.ingested, r.rejections.len()), (0, 1));
}

#[test]
fn unknown_issue_is_rejected() {
    let mut n = node(config("e"), None);
    let v = json!({"observations": [{"patient_id": "P-0000", "measured_at": T0, "overall_qol": 50.0,
        "issue_scores": {"boredom": 10.0}}]});
    assert_eq!(ingest(&mut n, v).rejections.len(), 1);
}

#[test]
fn aggregator_merges_for_registered_devices() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 2, 0));
    let p = pid(&n, "P-0000");
    let payload = |dev: &str, pid: &str| {
        let v = json!({"entries": [{"patient_id": pid, "device_id": dev, "recorded_at": T0, "features": {"steps": 8.5}}]});
        serde_json::to_vec(&v).unwrap()
    };
    let r = n.ingest_aggregator_bytes("wearable", &payload("watch", "P-0000")).unwrap();
    assert_eq!((r.ingested, r.rejections.len()), (0, 1));

    n.register_wearable(&p, "watch").unwrap();
    n.register_wearable(&p, "watch").unwrap();
    assert_eq!(n.wearables(&p).unwrap(), BTreeSet::from(["watch".to_string()]));
    let r = n.ingest_aggregator_bytes("wearable", &payload("watch", "P-0000")).unwrap();
    assert_eq!(r.ingested, 1);
    assert_eq!(n.store().latest_record(&p).unwrap().features["steps"], 8.5);

    let r = n.ingest_aggregator_bytes("wearable", &payload("watch", "P-0077")).unwrap();
    assert_eq!((r.ingested, r.rejections.len()), (0, 1));

    n.deregister_wearable(&p, "watch").unwrap();
    let r = n.ingest_aggregator_bytes("wearable", &payload("watch", "P-0000")).unwrap();
    assert_eq!(r.rejections.len(), 1);

    let unknown = n.ingest_aggregator_payload("fridge", AggregatorPayload::default());
    assert_eq!(unknown, Err(Error::UnknownAggregator("fridge".into())));
}

#[test]
fn wearables_need_a_known_patient() {
    let mut n = node(config("e"), None);
    let ghost = pid(&n, "nobody");
    assert!(matches!(n.register_wearable(&ghost, "watch"), Err(Error::NotFound(_))));
}

#[test]
fn local_only_selection() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 40, 4));
    let s = n.ensure_model(&key()).unwrap();
    assert_eq!(s.candidates.len(), 1);
    assert_eq!((s.chosen, s.degraded), (CandidateSource::Local, false));
}

#[test]
fn empty_dataset_is_reported() {
    let mut n = node(config("e"), None);
    assert_eq!(n.ensure_model(&key()), Err(Error::EmptyDataset));
}

#[test]
fn unreachable_cloud_degrades_to_local() {
    let cfg = EdgeConfig { federation_enabled: true, ..config("e") };
    let mut n = node(cfg, Some(client(Down, "e")));
    ingest(&mut n, cohort("P", 40, 4));
    let s = n.ensure_model(&key()).unwrap();
    assert_eq!((s.chosen, s.degraded), (CandidateSource::Local, true));
    assert!(!s.warnings.is_empty());
    // Queries keep working without the cloud.
    let p = pid(&n, "P-0001");
    assert_eq!(n.get_timeline(&p, &["overall_qol".into()], 2).unwrap().predictions.len(), 2);
}

#[test]
fn two_edges_federate_and_select() {
    let cloud = shared_cloud();
    let mut edges: Vec<EdgeNode> = ["a", "b"]
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let cfg = EdgeConfig { federation_enabled: true, ..config(id) };
            let mut n = node(cfg, Some(client(LocalTransport::new(cloud.clone()), id)));
            ingest(&mut n, cohort(&format!("E{i}"), 60, 4));
            n
        })
        .collect();
    let mut jobs: Vec<_> = edges.iter_mut().map(|e| e.ensure_begin(&key()).unwrap()).collect();
    for _ in 0..200 {
        if jobs.iter().all(|j| j.is_done()) {
            break;
        }
        for (e, j) in edges.iter_mut().zip(jobs.iter_mut()) {
            e.ensure_step(j).unwrap();
        }
    }
    assert!(jobs.iter().all(|j| j.is_done()));
    for (e, j) in edges.iter_mut().zip(jobs) {
        let s = e.ensure_finish(j).unwrap();
        let fed = s.candidate(CandidateSource::FederatedGlobal).expect("federated candidate");
        let local = s.candidate(CandidateSource::Local).unwrap();
        assert!(fed.metrics.rmse().unwrap() <= 1.1 * local.metrics.rmse().unwrap());
        let best = s.candidates.iter().map(|c| c.metrics.rmse().unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(s.candidate(s.chosen).unwrap().metrics.rmse().unwrap(), best);
    }
    let g = cloud.lock().unwrap().global(&key()).cloned().unwrap();
    assert_eq!(g.contributing_edges.len(), 2);
}

#[test]
fn timeline_shape_and_attribution() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 40, 4));
    let p = pid(&n, "P-0002");
    let empty = n.get_timeline(&p, &["overall_qol".into()], 2).unwrap();
    assert!(empty.predictions.is_empty());
    assert_eq!(empty.observations.len(), 4);

    n.ensure_model(&key()).unwrap();
    let t = n.get_timeline(&p, &["overall_qol".into()], 2).unwrap();
    assert_eq!((t.observations.len(), t.predictions.len()), (4, 2));
    let last_obs = t.observations.last().unwrap().measured_at;
    assert_eq!(t.predictions[0].time, last_obs + 30 * DAY);
    assert_eq!(t.predictions[1].time, last_obs + 60 * DAY);
    let a = &t.attributions["overall_qol"];
    assert!(a.efficiency_gap() < 1e-9);
    assert!((a.instance_prediction - t.predictions[1].value).abs() < 1e-12);

    let ghost = pid(&n, "ghost");
    assert!(matches!(n.get_timeline(&ghost, &[], 2), Err(Error::NotFound(_))));
}

#[test]
fn what_if_semantics() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 40, 4));
    n.install_model(&key(), known_model()).unwrap();
    let targets = vec!["overall_qol".to_string()];
    for i in 0..6 {
        let p = pid(&n, &format!("P-{i:04}"));
        let timeline = n.get_timeline(&p, &targets, 3).unwrap();
        let active = n.active_set(&p).unwrap();
        assert_eq!(n.what_if(&p, &active, &targets, 3).unwrap(), timeline.predictions);

        let base = n.what_if(&p, &BTreeSet::new(), &targets, 3).unwrap();
        let with = n.what_if(&p, &BTreeSet::from(["exercise".to_string()]), &targets, 3).unwrap();
        for (b, w) in base.iter().zip(&with) {
            assert!((w.value - b.value - 5.0).abs() < 1e-9);
            assert!(b.assuming.is_empty());
        }
    }
    let p = pid(&n, "P-0000");
    let bad = n.what_if(&p, &BTreeSet::from(["yoga".to_string()]), &targets, 1);
    assert!(matches!(bad, Err(Error::SchemaMismatch(_))));
}

#[test]
fn suggestions_are_cached_until_the_model_changes() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 40, 4));
    n.install_model(&key(), known_model()).unwrap();
    let p = pid(&n, "P-0004");
    let first = n.suggest_interventions(&p, "overall_qol").unwrap();
    let evals = n.model_evaluations();
    assert!(evals > 0);
    let second = n.suggest_interventions(&p, "overall_qol").unwrap();
    assert_eq!(first, second);
    assert_eq!(n.model_evaluations(), evals);

    assert_eq!(first[0].intervention_ids, vec!["exercise", "psych"]);
    assert!((first[0].predicted_delta - 8.0).abs() < 1e-9);
    let x = n.prediction_features(&p, &key()).unwrap();
    let m = known_model();
    let fresh =
        simulate_interventions(&|v: &[f64]| m.predict(v).unwrap(), &schema(), &x, &["exercise".into(), "psych".into()], 2, "overall_qol")
            .unwrap();
    assert_eq!(first, fresh);

    n.install_model(&key(), known_model()).unwrap();
    n.suggest_interventions(&p, "overall_qol").unwrap();
    assert!(n.model_evaluations() > evals);
}

#[test]
fn read_only_queries_leave_state_alone() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 30, 4));
    n.ensure_model(&key()).unwrap();
    let p = pid(&n, "P-0003");
    n.suggest_interventions(&p, "overall_qol").unwrap();
    let before = n.state_digest();
    n.get_timeline(&p, &[], 4).unwrap();
    n.what_if(&p, &BTreeSet::from(["psych".to_string()]), &[], 2).unwrap();
    n.suggest_interventions(&p, "overall_qol").unwrap();
    n.patients();
    assert_eq!(n.state_digest(), before);
}

#[test]
fn he_predict_disabled() {
    let mut n = node(config("e"), None);
    ingest(&mut n, cohort("P", 10, 2));
    let p = pid(&n, "P-0000");
    assert!(matches!(n.he_predict(&p, &key()), Err(Error::FeatureDisabled(_))));
}

#[test]
fn he_predict_times_out() {
    let cfg = EdgeConfig { he_enabled: true, ..config("e") };
    let mut n = node(cfg, Some(client(Pending, "e")));
    ingest(&mut n, cohort("P", 20, 3));
    n.ensure_model(&key()).unwrap();
    let p = pid(&n, "P-0000");
    assert_eq!(n.he_predict(&p, &key()), Err(Error::HeTimeout(5)));
}

#[test]
fn he_predict_matches_plaintext_training() {
    let cloud = shared_cloud();
    let log = EventLog::new(true);
    let cfg = EdgeConfig { he_enabled: true, ..config("solo") };
    let transport = LoggingTransport::new(LocalTransport::new(cloud.clone()), "solo", log.clone());
    let mut n = node(cfg, Some(client(transport, "solo")));
    ingest(&mut n, cohort("SOLO", 30, 4));
    n.ensure_model(&key()).unwrap();
    cloud.lock().unwrap().train_he_models().unwrap();
    let selection = n.ensure_model(&key()).unwrap();
    assert!(selection.candidate(CandidateSource::HeGlobal).is_some());

    let rec = cloud.lock().unwrap().he_model(&key()).cloned().unwrap();
    let (train, _) = n.split(&n.local_dataset(&key()).unwrap());
    let cfg = TrainingConfig { learning_rate: rec.effective_learning_rate, epochs: rec.epochs, ..TrainingConfig::default() };
    let plain = Model::Linear(train_linear(&train, &cfg, None).unwrap());
    let decrypted = Model::Linear(decrypt_model(n.more_key().unwrap(), &rec.model));
    for i in 0..5 {
        let p = pid(&n, &format!("SOLO-{i:04}"));
        let x = n.prediction_features(&p, &key()).unwrap();
        let he = n.he_predict(&p, &key()).unwrap();
        let want = plain.predict(&x).unwrap();
        assert!((he - want).abs() / want.abs().max(1.0) < 1e-6, "{he} vs {want}");
        assert!((he - decrypted.predict(&x).unwrap()).abs() < 1e-8);
    }
    let ids: Vec<String> = (0..30).map(|i| format!("SOLO-{i:04}")).collect();
    assert!(log.scan(&ids).is_empty());
}
