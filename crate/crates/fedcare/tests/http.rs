use fedcare::client::{route, unroute};
use fedcare::cloud_api::{self, status_for};
use fedcare::edge_api::{self, EdgeState};
use fedcare::HttpTransport;
use fedcare_core::cloud::{Cloud, CloudConfig};
use fedcare_core::domain::{CancerType, ModelKey, PseudonymKey, OVERALL_QOL};
use fedcare_core::edge::{
    CandidateSource, CloudClient, EdgeConfig, EdgeNode, Health, IngestReport, ModelSelection, PatientSummary, Timeline,
};
use fedcare_core::explain::InterventionSuggestion;
use fedcare_core::more::Ciphertext;
use fedcare_core::protocol::{CloudRequest, CloudResponse, CloudTransport, SurrogateAction, SystemClock};
use fedcare_core::sim::{bundled_scenario, generate_cohort};
use fedcare_core::Error;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use std::collections::BTreeSet;
use std::net::TcpListener;
use std::sync::{Arc, Mutex, RwLock};
use tokio::runtime::Runtime;

fn runtime() -> Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap()
}

fn serve(rt: &Runtime, app: axum::Router) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let _g = rt.enter();
    let listener = tokio::net::TcpListener::from_std(listener).unwrap();
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    url
}

fn cloud() -> Arc<Mutex<Cloud>> {
    let cfg = CloudConfig { admission_secret: "s3cret".into(), ..CloudConfig::default() };
    Arc::new(Mutex::new(Cloud::in_memory(cfg, Arc::new(SystemClock)).unwrap()))
}

fn key() -> ModelKey {
    ModelKey::linear_regression(CancerType::Prostate, OVERALL_QOL)
}

#[test]
fn every_request_survives_the_route_split() {
    let k = key();
    let requests = vec![
        CloudRequest::Register { edge_id: "edge 1/x".into(), admission_secret: "s".into() },
        CloudRequest::Deregister { edge_id: "edge 1/x".into() },
        CloudRequest::Declare { model_key: k.clone(), follow_session: Some(4) },
        CloudRequest::Declare { model_key: k.clone(), follow_session: None },
        CloudRequest::FetchModels { model_key: k.clone() },
        CloudRequest::SubmitInference { model_key: k.clone(), features: vec![Ciphertext::constant(2.5)] },
        CloudRequest::PollInference { request_id: "req-00000001".into() },
        CloudRequest::Surrogate { model_key: k.clone(), action: SurrogateAction::Fetch },
        CloudRequest::PollTasks,
    ];
    for r in requests {
        let rt = route(&r).unwrap();
        let body = rt.body.as_ref().map(|b| serde_json::to_vec(b).unwrap()).unwrap_or_default();
        let params: Vec<(&str, String)> = match &r {
            CloudRequest::Deregister { edge_id } => vec![("edge_id", edge_id.clone())],
            CloudRequest::PollInference { request_id } => vec![("request_id", request_id.clone())],
            CloudRequest::Declare { .. } | CloudRequest::FetchModels { .. } | CloudRequest::Surrogate { .. } => {
                vec![("model_key", rt.segments[1].clone())]
            }
            _ => vec![],
        };
        assert_eq!(unroute(r.operation(), &params, &body).unwrap(), r);
    }
    let r = route(&CloudRequest::FetchModels { model_key: k.clone() }).unwrap();
    assert_eq!(r.segments, vec!["models".to_string(), k.to_string()]);
    assert!(r.body.is_none());
}

#[test]
fn unroute_rejects_garbage() {
    assert!(matches!(unroute("declare", &[], b"[1,2]"), Err(Error::Decode(_))));
    assert!(matches!(unroute("declare", &[("model_key", "nope".into())], b"{}"), Err(Error::Decode(_))));
}

#[test]
fn status_codes_follow_error_kind() {
    assert_eq!(status_for(&Error::Auth("x".into())), StatusCode::UNAUTHORIZED);
    assert_eq!(status_for(&Error::StaleRound { current: 2 }), StatusCode::CONFLICT);
    assert_eq!(status_for(&Error::NotFound("x".into())), StatusCode::NOT_FOUND);
    assert_eq!(status_for(&Error::Decode("x".into())), StatusCode::BAD_REQUEST);
    assert_eq!(status_for(&Error::HeTimeout(3)), StatusCode::GATEWAY_TIMEOUT);
}

#[test]
fn cloud_errors_cross_the_wire_intact() {
    let rt = runtime();
    let url = serve(&rt, cloud_api::router(cloud()));
    let mut t = HttpTransport::new(&url).unwrap();

    let bad = t.send(None, &CloudRequest::Register { edge_id: "e1".into(), admission_secret: "wrong".into() });
    assert!(matches!(bad, Err(Error::Auth(_))), "{bad:?}");
    let reg = t.send(None, &CloudRequest::Register { edge_id: "e1".into(), admission_secret: "s3cret".into() }).unwrap();
    let CloudResponse::Registered(reg) = reg else { panic!("{reg:?}") };
    let token = reg.bearer_token.clone();

    assert!(matches!(t.send(None, &CloudRequest::PollTasks), Err(Error::Auth(_))));
    assert!(matches!(t.send(Some("forged"), &CloudRequest::PollTasks), Err(Error::Auth(_))));
    assert!(matches!(t.send(Some(&token), &CloudRequest::PollTasks), Ok(CloudResponse::Tasks(_))));
    let missing = t.send(Some(&token), &CloudRequest::PollInference { request_id: "req-99999999".into() });
    assert!(matches!(missing, Err(Error::NotFound(_))), "{missing:?}");

    let raw = Client::new().get(format!("{url}/tasks")).send().unwrap();
    assert_eq!(raw.status(), StatusCode::UNAUTHORIZED);
    let body: serde_json::Value = serde_json::from_slice(&raw.bytes().unwrap()).unwrap();
    assert_eq!(body["code"], "auth");
    let raw = Client::new().post(format!("{url}/federation/{}/declare", key())).bearer_auth(&token).body("not json").send().unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
    drop(rt);
}

#[test]
fn dead_cloud_is_unreachable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut t = HttpTransport::new(&format!("http://127.0.0.1:{port}")).unwrap();
    assert!(matches!(t.send(None, &CloudRequest::PollTasks), Err(Error::Unreachable(_))));
    assert!(matches!(HttpTransport::new("not a url"), Err(Error::Validation(_))));
}

fn edge(id: &str, cloud_url: Option<&str>, token: Option<&str>) -> Arc<RwLock<EdgeNode>> {
    let spec = bundled_scenario("he-2edges").unwrap();
    let cfg = EdgeConfig {
        edge_id: id.into(),
        admission_secret: "s3cret".into(),
        pseudonymization_key: hex::encode(PseudonymKey::derive(id).as_bytes()),
        federation_enabled: cloud_url.is_some(),
        client_token: token.map(str::to_owned),
        ..EdgeConfig::default()
    };
    let client = cloud_url.map(|u| CloudClient::new(Box::new(HttpTransport::new(u).unwrap()), id, "s3cret"));
    let node = EdgeNode::new(cfg, spec.schema().unwrap(), None, client, Arc::new(SystemClock)).unwrap();
    Arc::new(RwLock::new(node))
}

fn his_body(edge_index: usize) -> Vec<u8> {
    let spec = bundled_scenario("he-2edges").unwrap();
    serde_json::to_vec(&generate_cohort(&spec, edge_index).payload()).unwrap()
}

struct Api {
    url: String,
    client: Client,
    token: Option<String>,
}

impl Api {
    fn req(&self, method: reqwest::Method, path: &str) -> reqwest::blocking::RequestBuilder {
        let r = self.client.request(method, format!("{}{path}", self.url));
        match &self.token {
            Some(t) => r.bearer_auth(t),
            None => r,
        }
    }

    fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> T {
        let resp = self.req(reqwest::Method::GET, path).send().unwrap();
        assert!(resp.status().is_success(), "GET {path}: {}", resp.status());
        serde_json::from_slice(&resp.bytes().unwrap()).unwrap()
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: Vec<u8>) -> T {
        let resp = self.req(reqwest::Method::POST, path).body(body).send().unwrap();
        let status = resp.status();
        let bytes = resp.bytes().unwrap();
        assert!(status.is_success(), "POST {path}: {status} {}", String::from_utf8_lossy(&bytes));
        serde_json::from_slice(&bytes).unwrap()
    }
}

#[test]
fn edge_api_round_trip() {
    let node = edge("edge-a", None, Some("dash"));
    let rt = runtime();
    let url = serve(&rt, edge_api::router(EdgeState::new(node.clone())));
    let api = Api { url: url.clone(), client: Client::new(), token: Some("dash".into()) };

    let anon = Client::new().get(format!("{url}/patients")).send().unwrap();
    assert_eq!(anon.status(), StatusCode::UNAUTHORIZED);
    let health: Health = serde_json::from_slice(&Client::new().get(format!("{url}/health")).send().unwrap().bytes().unwrap()).unwrap();
    assert_eq!(health.patients, 0);

    let report: IngestReport = api.post("/ingest/his", his_body(0));
    assert!(report.rejections.is_empty() && report.ingested > 0);
    let patients: Vec<PatientSummary> = api.get("/patients");
    assert_eq!(patients.len(), 100);
    let p = patients[0].pseudonym.to_string();

    let sel: ModelSelection = api.post(&format!("/models/{}/ensure", key()), Vec::new());
    assert_eq!(sel.chosen, CandidateSource::Local);

    let tl: Timeline = api.get(&format!("/patients/{p}/timeline?targets=overall_qol&horizon=2"));
    assert_eq!(tl.predictions.len(), 2);
    let ids: BTreeSet<String> = BTreeSet::new();
    let body = serde_json::json!({ "intervention_ids": ids, "targets": ["overall_qol"], "horizon": 2 });
    let points: Vec<fedcare_core::edge::PredictedPoint> = api.post(&format!("/patients/{p}/what-if"), body.to_string().into_bytes());
    assert_eq!(points.len(), 2);
    let sugg: Vec<InterventionSuggestion> = api.get(&format!("/patients/{p}/suggestions?target=overall_qol"));
    assert!(!sugg.is_empty());
    assert_eq!(sugg[0].rank, 1);

    let devices: BTreeSet<String> = api.post(&format!("/patients/{p}/wearables"), br#"{"device_id":"band-7"}"#.to_vec());
    assert!(devices.contains("band-7"));
    let resp = api.req(reqwest::Method::DELETE, &format!("/patients/{p}/wearables/band-7")).send().unwrap();
    assert!(resp.status().is_success());
    let devices: BTreeSet<String> = api.get(&format!("/patients/{p}/wearables"));
    assert!(devices.is_empty());

    let resp = api.req(reqwest::Method::GET, "/patients/not-a-pseudonym/timeline").send().unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let resp = api.req(reqwest::Method::POST, "/ingest/aggregator/fax").body("{}").send().unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let resp = api.req(reqwest::Method::POST, "/ingest/his").body("{").send().unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    drop(rt);
}

#[test]
fn two_served_edges_federate_through_a_served_cloud() {
    let rt = runtime();
    let cloud_url = serve(&rt, cloud_api::router(cloud()));
    let nodes = [edge("edge-a", Some(&cloud_url), None), edge("edge-b", Some(&cloud_url), None)];
    let urls: Vec<String> = nodes.iter().map(|n| serve(&rt, edge_api::router(EdgeState::new(n.clone())))).collect();
    for (i, u) in urls.iter().enumerate() {
        let api = Api { url: u.clone(), client: Client::new(), token: None };
        let _: IngestReport = api.post("/ingest/his", his_body(i));
    }
    let handles: Vec<_> = urls
        .iter()
        .map(|u| {
            let u = u.clone();
            std::thread::spawn(move || {
                let api = Api { url: u, client: Client::new(), token: None };
                api.post::<ModelSelection>(&format!("/models/{}/ensure", key()), Vec::new())
            })
        })
        .collect();
    for h in handles {
        let sel = h.join().unwrap();
        assert!(!sel.degraded, "{:?}", sel.warnings);
        assert!(sel.candidate(CandidateSource::FederatedGlobal).is_some());
    }
    let health: Health = Api { url: urls[0].clone(), client: Client::new(), token: None }.get("/health");
    assert!(health.registered);
    drop(rt);
    drop(nodes);
}
