//! Shapley attributions, surrogate models and intervention simulation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{higher_is_better, FeatureSchema, ModelFamily, ModelKey, SchemaHash, TrainingDataset};
use crate::error::{Error, Result};
use crate::ml::{self, evaluate, Metrics, Model, TrainingConfig};
use crate::more::{decrypt, encrypt_vector, Ciphertext, MoreKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureContribution {
    pub feature: String,
    pub value: f64,
}

/// Shapley attribution of one prediction, ordered by schema position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub shapley_values: Vec<FeatureContribution>,
    pub baseline_prediction: f64,
    pub instance_prediction: f64,
}

impl Attribution {
    pub fn value(&self, feature: &str) -> Option<f64> {
        self.shapley_values.iter().find(|c| c.feature == feature).map(|c| c.value)
    }

    /// `|Σφ - (f(x) - f(bg))|`.
    pub fn efficiency_gap(&self) -> f64 {
        let sum: f64 = self.shapley_values.iter().map(|c| c.value).sum();
        (sum - (self.instance_prediction - self.baseline_prediction)).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapleyOptions {
    /// Exact enumeration up to this many features, sampling beyond.
    pub exact_limit: usize,
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ShapleyOptions {
    fn default() -> Self {
        Self { exact_limit: 12, permutations: 2000, seed: 0 }
    }
}

/// Raw Shapley values without feature names.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyValues {
    pub values: Vec<f64>,
    pub baseline_prediction: f64,
    pub instance_prediction: f64,
}

/// Shapley values of `predict` at `instance` relative to `background`.
///
/// A coalition's value is the prediction on the hybrid vector taking
/// coalition features from `instance` and the rest from `background`.
/// Exact over all `2^d` coalitions when `d <= exact_limit`, otherwise
/// Monte-Carlo over seeded random permutations. In both cases any residual
/// against `f(instance) - f(background)` is redistributed proportionally to
/// `|φ_i|` (equally if all are zero) so efficiency holds.
pub fn shapley(predict: &dyn Fn(&[f64]) -> f64, instance: &[f64], background: &[f64], opts: &ShapleyOptions) -> Result<ShapleyValues> {
    let d = instance.len();
    if background.len() != d {
        return Err(Error::SchemaMismatch(format!("instance has {d} features, background {}", background.len())));
    }
    let baseline_prediction = predict(background);
    let instance_prediction = predict(instance);
    let mut values = if d <= opts.exact_limit {
        exact_shapley(predict, instance, background)
    } else {
        sampled_shapley(predict, instance, background, opts.permutations.max(1), opts.seed)
    };
    enforce_efficiency(&mut values, instance_prediction - baseline_prediction);
    Ok(ShapleyValues { values, baseline_prediction, instance_prediction })
}

fn exact_shapley(predict: &dyn Fn(&[f64]) -> f64, instance: &[f64], background: &[f64]) -> Vec<f64> {
    let d = instance.len();
    if d == 0 {
        return Vec::new();
    }
    let coalitions = 1usize << d;
    let mut hybrid = background.to_vec();
    let value: Vec<f64> = (0..coalitions)
        .map(|mask| {
            for (j, h) in hybrid.iter_mut().enumerate() {
                *h = if mask >> j & 1 == 1 { instance[j] } else { background[j] };
            }
            predict(&hybrid)
        })
        .collect();
    // weight[s] = s! (d - s - 1)! / d!
    let weight: Vec<f64> = (0..d)
        .map(|s| {
            let mut w = 1.0 / d as f64;
            // 1 / (d * C(d-1, s))
            let mut c = 1.0;
            for k in 0..s {
                c = c * (d - 1 - k) as f64 / (k + 1) as f64;
            }
            w /= c;
            w
        })
        .collect();
    (0..d)
        .map(|i| {
            let bit = 1usize << i;
            (0..coalitions).filter(|m| m & bit == 0).map(|m| weight[m.count_ones() as usize] * (value[m | bit] - value[m])).sum()
        })
        .collect()
}

fn sampled_shapley(predict: &dyn Fn(&[f64]) -> f64, instance: &[f64], background: &[f64], permutations: usize, seed: u64) -> Vec<f64> {
    let d = instance.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d).collect();
    let mut phi = vec![0.0; d];
    let base = predict(background);
    let mut hybrid = background.to_vec();
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        hybrid.copy_from_slice(background);
        let mut prev = base;
        for &j in &order {
            hybrid[j] = instance[j];
            let v = predict(&hybrid);
            phi[j] += v - prev;
            prev = v;
        }
    }
    phi.iter().map(|p| p / permutations as f64).collect()
}

fn enforce_efficiency(values: &mut [f64], target: f64) {
    if values.is_empty() {
        return;
    }
    let residual = target - values.iter().sum::<f64>();
    if residual == 0.0 {
        return;
    }
    let mass: f64 = values.iter().map(|v| v.abs()).sum();
    if mass > 0.0 {
        for v in values.iter_mut() {
            *v += residual * v.abs() / mass;
        }
    } else {
        let share = residual / values.len() as f64;
        values.iter_mut().for_each(|v| *v += share);
    }
}

/// Attribution for a model prediction against the model's training means.
pub fn attribute(model: &Model, schema: &FeatureSchema, instance: &[f64], opts: &ShapleyOptions) -> Result<Attribution> {
    if model.arity() != schema.arity() {
        return Err(Error::SchemaMismatch("model arity differs from schema".into()));
    }
    let background = model.feature_means().to_vec();
    let predict = |x: &[f64]| model.predict(x).unwrap_or(f64::NAN);
    let sv = shapley(&predict, instance, &background, opts)?;
    Ok(name_values(schema, sv))
}

pub fn name_values(schema: &FeatureSchema, sv: ShapleyValues) -> Attribution {
    Attribution {
        shapley_values: schema
            .names()
            .zip(sv.values)
            .map(|(feature, value)| FeatureContribution { feature: feature.to_owned(), value })
            .collect(),
        baseline_prediction: sv.baseline_prediction,
        instance_prediction: sv.instance_prediction,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Linear,
    Tree,
}

impl SurrogateKind {
    pub fn family(self) -> ModelFamily {
        match self {
            SurrogateKind::Linear => ModelFamily::Linear,
            SurrogateKind::Tree => ModelFamily::Tree,
        }
    }
}

/// Which primary model a surrogate mimics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryRef {
    pub model_key: ModelKey,
    pub version: u64,
    #[serde(default)]
    pub encrypted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub inner: Model,
    pub primary_ref: PrimaryRef,
    /// R² of surrogate predictions against the primary's labels on the
    /// rows the surrogate was trained on.
    pub fidelity_r2: f64,
}

/// R² against the primary's labels. Constant labels reproduced to within
/// `1e-9` relative error count as perfect fidelity.
fn fidelity(model: &Model, dataset: &TrainingDataset) -> Result<f64> {
    let r2 = match evaluate(model, dataset)? {
        Metrics::Regression(m) => m.r2,
        Metrics::Classification(m) => m.accuracy,
    };
    let first = dataset.targets[0];
    if dataset.targets.iter().all(|y| *y == first) {
        let close = dataset
            .rows
            .iter()
            .map(|r| model.predict(r))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .all(|p| (p - first).abs() <= 1e-9 * first.abs().max(1.0));
        return Ok(if close { 1.0 } else { r2 });
    }
    Ok(r2)
}

/// Labels every row with `predict` and fits a surrogate of `kind` to them.
pub fn train_surrogate(
    predict: &dyn Fn(&[f64]) -> f64,
    feature_rows: &[Vec<f64>],
    kind: SurrogateKind,
    config: &TrainingConfig,
    primary: &PrimaryRef,
    schema_hash: SchemaHash,
) -> Result<SurrogateModel> {
    let labels: Vec<f64> = feature_rows.iter().map(|r| predict(r)).collect();
    fit_surrogate(feature_rows, labels, kind, config, primary, schema_hash)
}

fn fit_surrogate(
    feature_rows: &[Vec<f64>],
    labels: Vec<f64>,
    kind: SurrogateKind,
    config: &TrainingConfig,
    primary: &PrimaryRef,
    schema_hash: SchemaHash,
) -> Result<SurrogateModel> {
    if feature_rows.is_empty() {
        return Err(Error::Validation("surrogate training needs at least one row".into()));
    }
    let dataset = TrainingDataset::new(
        schema_hash,
        primary.model_key.cancer_type,
        primary.model_key.target_variable.clone(),
        feature_rows.to_vec(),
        labels,
    )?;
    // Surrogates regress on the primary's output even for classifiers.
    let cfg = TrainingConfig { task: crate::domain::Task::Regression, ..config.clone() };
    let inner = ml::train(kind.family(), &dataset, &cfg)?;
    let fidelity_r2 = fidelity(&inner, &dataset)?;
    Ok(SurrogateModel { inner, primary_ref: primary.clone(), fidelity_r2 })
}

/// Client side of the cloud's encrypted inference queue.
pub trait EncryptedInference {
    fn submit(&mut self, model_key: &ModelKey, features: Vec<Ciphertext>) -> Result<String>;
    /// `Ok(None)` while the request is still pending.
    fn poll(&mut self, request_id: &str) -> Result<Option<Ciphertext>>;
    /// Called between polls; implementations sleep or advance a clock.
    fn backoff(&mut self, _attempt: u32) {}
}

/// Encrypts `features`, submits an inference request and polls until the
/// encrypted answer arrives, up to `max_polls` attempts.
pub fn encrypted_predict(
    client: &mut dyn EncryptedInference,
    model_key: &ModelKey,
    key: &MoreKey,
    features: &[f64],
    rng: &mut ChaCha8Rng,
    max_polls: u32,
) -> Result<Option<f64>> {
    let request_id = client.submit(model_key, encrypt_vector(key, features, rng)?)?;
    for attempt in 0..max_polls {
        if let Some(c) = client.poll(&request_id)? {
            return Ok(Some(decrypt(key, &c)));
        }
        client.backoff(attempt);
    }
    Ok(None)
}

/// Surrogate of an encrypted global model: every row is labeled by an
/// encrypted inference round trip and decrypted locally.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_via_encrypted_labels(
    client: &mut dyn EncryptedInference,
    feature_rows: &[Vec<f64>],
    key: &MoreKey,
    kind: SurrogateKind,
    config: &TrainingConfig,
    primary: &PrimaryRef,
    schema_hash: SchemaHash,
    max_polls: u32,
) -> Result<SurrogateModel> {
    if feature_rows.is_empty() {
        return Err(Error::Validation("surrogate training needs at least one row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut labels = Vec::with_capacity(feature_rows.len());
    for row in feature_rows {
        match encrypted_predict(client, &primary.model_key, key, row, &mut rng, max_polls)? {
            Some(v) => labels.push(v),
            None => {
                return Err(Error::SurrogateTrainingTimeout(format!(
                    "no encrypted answer for {} after {max_polls} polls",
                    primary.model_key
                )))
            }
        }
    }
    fit_surrogate(feature_rows, labels, kind, config, primary, schema_hash)
}

/// A ranked what-if candidate. `predicted_delta` is a model-prediction
/// difference, not an estimated causal effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSuggestion {
    pub intervention_ids: Vec<String>,
    pub predicted_delta: f64,
    pub rank: usize,
}

/// Evaluates every non-empty subset of `candidates` up to `max_combo`
/// members by switching their indicator features on (the others off) and
/// comparing with the all-off prediction. Results are sorted by beneficial
/// delta (increase for `overall_qol`, decrease for issues), then by smaller
/// set, then lexicographically by ids.
pub fn simulate_interventions(
    predict: &dyn Fn(&[f64]) -> f64,
    schema: &FeatureSchema,
    patient_features: &[f64],
    candidates: &[String],
    max_combo: usize,
    target_variable: &str,
) -> Result<Vec<InterventionSuggestion>> {
    if max_combo < 1 {
        return Err(Error::Validation("max_combo must be >= 1".into()));
    }
    if patient_features.len() != schema.arity() {
        return Err(Error::SchemaMismatch(format!("patient has {} features, schema {}", patient_features.len(), schema.arity())));
    }
    let ids: Vec<String> = candidates.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let indices = ids
        .iter()
        .map(|id| {
            schema.intervention_index(id).ok_or_else(|| Error::SchemaMismatch(format!("intervention `{id}` has no indicator feature")))
        })
        .collect::<Result<Vec<usize>>>()?;

    let mut base = patient_features.to_vec();
    for &j in &indices {
        base[j] = 0.0;
    }
    let baseline = predict(&base);
    let sign = if higher_is_better(target_variable) { 1.0 } else { -1.0 };

    let mut out = Vec::new();
    let mut combo = Vec::new();
    enumerate_subsets(ids.len(), max_combo.min(ids.len()), 0, &mut combo, &mut |subset| {
        let mut x = base.clone();
        for &k in subset {
            x[indices[k]] = 1.0;
        }
        out.push(InterventionSuggestion {
            intervention_ids: subset.iter().map(|&k| ids[k].clone()).collect(),
            predicted_delta: predict(&x) - baseline,
            rank: 0,
        });
    });
    out.sort_by(|a, b| {
        (sign * b.predicted_delta)
            .total_cmp(&(sign * a.predicted_delta))
            .then(a.intervention_ids.len().cmp(&b.intervention_ids.len()))
            .then_with(|| a.intervention_ids.cmp(&b.intervention_ids))
    });
    for (i, s) in out.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(out)
}

fn enumerate_subsets(n: usize, max: usize, start: usize, current: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    for k in start..n {
        current.push(k);
        visit(current);
        if current.len() < max {
            enumerate_subsets(n, max, k + 1, current, visit);
        }
        current.pop();
    }
}
