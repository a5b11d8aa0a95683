//! Browser demo. A single edge node runs inside the page on a synthetic
//! cohort; the exported functions return JSON strings.

use fedcare_core::domain::{ModelKey, Pseudonym, PseudonymKey, OVERALL_QOL};
use fedcare_core::edge::{EdgeConfig, EdgeNode, PatientSummary, PredictedPoint, Timeline};
use fedcare_core::explain::InterventionSuggestion;
use fedcare_core::more::{self, Ciphertext, Mat2};
use fedcare_core::protocol::SimClock;
use fedcare_core::sim::{bundled_scenario, generate_cohort, SIM_EPOCH};
use fedcare_core::Result;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeSet;
use std::sync::Arc;
use wasm_bindgen::prelude::*;

const SCENARIO: &str = "he-2edges";
const COHORT_SIZE: usize = 40;

/// One encrypt/compute/decrypt pass through MORE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoreExploration {
    pub key: Mat2,
    pub condition_number: f64,
    pub a: Ciphertext,
    pub b: Ciphertext,
    pub sum: Ciphertext,
    pub product: Ciphertext,
    pub decrypted_sum: f64,
    pub decrypted_product: f64,
    pub plain_sum: f64,
    pub plain_product: f64,
}

pub fn explore_more(seed: u64, a: f64, b: f64) -> Result<MoreExploration> {
    let key = more::keygen(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ca = more::encrypt(&key, a, &mut rng)?;
    let cb = more::encrypt(&key, b, &mut rng)?;
    let sum = more::he_add(ca, cb);
    let product = more::he_mul(ca, cb);
    Ok(MoreExploration {
        key: key.k,
        condition_number: more::condition_number(&key.k),
        a: ca,
        b: cb,
        sum,
        product,
        decrypted_sum: more::decrypt(&key, &sum),
        decrypted_product: more::decrypt(&key, &product),
        plain_sum: a + b,
        plain_product: a * b,
    })
}

/// The in-page edge node with a locally trained overall QoL model.
pub struct DemoEdge {
    edge: EdgeNode,
    key: ModelKey,
}

impl DemoEdge {
    pub fn new(seed: u64) -> Result<Self> {
        let mut spec = bundled_scenario(SCENARIO)?;
        spec.seed = seed;
        spec.cohort_size = COHORT_SIZE;
        let config = EdgeConfig {
            edge_id: "browser".into(),
            pseudonymization_key: PseudonymKey::derive("browser-demo").to_hex(),
            ..EdgeConfig::default()
        };
        let mut edge = EdgeNode::new(config, spec.schema()?, None, None, Arc::new(SimClock::new(SIM_EPOCH)))?;
        edge.ingest_his_payload(generate_cohort(&spec, 0).payload())?;
        let key = spec.model_keys().into_iter().find(|k| k.target_variable == OVERALL_QOL).expect("scenario predicts overall QoL");
        edge.ensure_model(&key)?;
        Ok(Self { edge, key })
    }

    pub fn model_key(&self) -> &ModelKey {
        &self.key
    }

    pub fn patients(&self) -> Vec<PatientSummary> {
        self.edge.patients()
    }

    pub fn intervention_ids(&self) -> Vec<String> {
        self.edge.schema().intervention_ids()
    }

    pub fn timeline(&self, pseudonym: &str, horizon: usize) -> Result<Timeline> {
        self.edge.get_timeline(&Pseudonym::parse(pseudonym)?, &[OVERALL_QOL.to_owned()], horizon)
    }

    pub fn what_if(&self, pseudonym: &str, intervention_ids: &[String], horizon: usize) -> Result<Vec<PredictedPoint>> {
        let ids: BTreeSet<String> = intervention_ids.iter().cloned().collect();
        self.edge.what_if(&Pseudonym::parse(pseudonym)?, &ids, &[OVERALL_QOL.to_owned()], horizon)
    }

    pub fn suggestions(&self, pseudonym: &str) -> Result<Vec<InterventionSuggestion>> {
        self.edge.suggest_interventions(&Pseudonym::parse(pseudonym)?, OVERALL_QOL)
    }
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = moreExplore)]
pub fn more_explore(seed: u32, a: f64, b: f64) -> std::result::Result<String, JsError> {
    js(explore_more(u64::from(seed), a, b))
}

#[wasm_bindgen]
pub struct Demo(DemoEdge);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        DemoEdge::new(u64::from(seed)).map(Demo).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn patients(&self) -> std::result::Result<String, JsError> {
        js(Ok(self.0.patients()))
    }

    #[wasm_bindgen(js_name = interventionIds)]
    pub fn intervention_ids(&self) -> std::result::Result<String, JsError> {
        js(Ok(self.0.intervention_ids()))
    }

    pub fn timeline(&self, pseudonym: &str, horizon: usize) -> std::result::Result<String, JsError> {
        js(self.0.timeline(pseudonym, horizon))
    }

    /// `ids` is a JSON array of intervention ids.
    #[wasm_bindgen(js_name = whatIf)]
    pub fn what_if(&self, pseudonym: &str, ids: &str, horizon: usize) -> std::result::Result<String, JsError> {
        let ids: Vec<String> = serde_json::from_str(ids).map_err(|e| JsError::new(&e.to_string()))?;
        js(self.0.what_if(pseudonym, &ids, horizon))
    }

    pub fn suggestions(&self, pseudonym: &str) -> std::result::Result<String, JsError> {
        js(self.0.suggestions(pseudonym))
    }
}
