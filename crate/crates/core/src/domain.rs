//! Shared data model: patients, QoL observations, interventions, feature
//! schemas, training datasets and pseudonymization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Integer UTC seconds.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Target variable name for the overall quality-of-life score.
pub const OVERALL_QOL: &str = "overall_qol";

/// Issue scales tracked by default deployments.
pub const DEFAULT_ISSUES: [&str; 5] = ["fatigue", "pain", "anxiety", "sleep_disorder", "appetite_loss"];

/// Schema feature holding days elapsed since the end of primary treatment.
/// Extraction and forecasting advance it with wall-clock time.
pub const TIME_FEATURE: &str = "days_since_treatment";

/// Prefix of the binary indicator feature backing an intervention id.
pub const INTERVENTION_PREFIX: &str = "iv_";

pub fn intervention_feature(intervention_id: &str) -> String {
    format!("{INTERVENTION_PREFIX}{intervention_id}")
}

/// True for `overall_qol` (higher is better); issue targets are lower-is-better.
pub fn higher_is_better(target_variable: &str) -> bool {
    target_variable == OVERALL_QOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CancerType {
    Breast,
    Prostate,
    HeadNeck,
}

impl CancerType {
    pub const ALL: [CancerType; 3] = [CancerType::Breast, CancerType::Prostate, CancerType::HeadNeck];

    pub fn as_str(self) -> &'static str {
        match self {
            CancerType::Breast => "breast",
            CancerType::Prostate => "prostate",
            CancerType::HeadNeck => "head_neck",
        }
    }
}

impl fmt::Display for CancerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CancerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CancerType::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| Error::Validation(format!("unknown cancer type `{s}`")))
    }
}

/// 32-byte secret used for keyed pseudonymization.
#[derive(Clone, PartialEq, Eq)]
pub struct PseudonymKey([u8; 32]);

impl PseudonymKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::Validation(format!("pseudonymization key: {e}")))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| Error::Validation("pseudonymization key must be 32 bytes".into()))?;
        Ok(Self(arr))
    }

    /// Derives a key from a passphrase; used by the simulation harness.
    pub fn derive(label: &str) -> Self {
        Self(Sha256::digest(label.as_bytes()).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for PseudonymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PseudonymKey(..)")
    }
}

/// Opaque 32-hex-character patient identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Pseudonym(String);

impl Pseudonym {
    pub const LEN: usize = 32;

    pub fn parse(token: &str) -> Result<Self> {
        if token.len() == Self::LEN && token.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(Self(token.to_owned()))
        } else {
            Err(Error::Validation(format!("malformed pseudonym `{token}`")))
        }
    }

    pub fn token(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for Pseudonym {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Pseudonym::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

const PSEUDONYM_MAX_ATTEMPTS: u32 = 4096;

/// HMAC-SHA256 of the patient id, truncated to 128 bits and hex-encoded.
///
/// A token that happens to contain the raw id as a substring is re-derived
/// with an incremented domain-separation counter, so the no-leak property
/// holds even for short hexadecimal ids.
pub fn pseudonymize(patient_id: &str, key: &PseudonymKey) -> Result<Pseudonym> {
    if patient_id.is_empty() {
        return Err(Error::Validation("patient_id must be non-empty".into()));
    }
    for counter in 0..PSEUDONYM_MAX_ATTEMPTS {
        let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
        mac.update(&counter.to_be_bytes());
        mac.update(patient_id.as_bytes());
        let digest = mac.finalize().into_bytes();
        let token = hex::encode(&digest[..16]);
        if !token.contains(patient_id) {
            return Ok(Pseudonym(token));
        }
    }
    Err(Error::Validation(format!("cannot derive a pseudonym that avoids `{patient_id}`")))
}

/// Accepts JSON numbers, `null` (mapped to NaN) or numeric strings such as
/// `"NaN"` and `"inf"`, so malformed upstream values surface as validation
/// violations instead of decode failures.
pub(crate) fn lenient_f64_map<'de, D>(d: D) -> std::result::Result<BTreeMap<String, f64>, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Lenient {
        Num(f64),
        Str(String),
        Null(()),
    }
    let raw = BTreeMap::<String, Lenient>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            let value = match v {
                Lenient::Num(x) => x,
                Lenient::Null(()) => f64::NAN,
                Lenient::Str(s) => {
                    s.trim().parse::<f64>().map_err(|_| serde::de::Error::custom(format!("feature `{k}`: `{s}` is not numeric")))?
                }
            };
            Ok((k, value))
        })
        .collect()
}

/// Serializes non-finite values as strings so a record with a NaN can still
/// be written to a log and read back.
pub(crate) fn lenient_f64_map_ser<S: Serializer>(map: &BTreeMap<String, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut m = s.serialize_map(Some(map.len()))?;
    for (k, v) in map {
        if v.is_finite() {
            m.serialize_entry(k, v)?;
        } else {
            m.serialize_entry(k, &v.to_string())?;
        }
    }
    m.end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub pseudonym: Pseudonym,
    pub cancer_type: CancerType,
    #[serde(deserialize_with = "lenient_f64_map", serialize_with = "lenient_f64_map_ser")]
    pub features: BTreeMap<String, f64>,
    pub recorded_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoLObservation {
    pub pseudonym: Pseudonym,
    pub measured_at: Timestamp,
    pub overall_qol: f64,
    pub issue_scores: BTreeMap<String, f64>,
}

impl QoLObservation {
    pub fn target(&self, target_variable: &str) -> Option<f64> {
        if target_variable == OVERALL_QOL {
            Some(self.overall_qol)
        } else {
            self.issue_scores.get(target_variable).copied()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| v.is_finite() && (0.0..=100.0).contains(&v);
        if !in_range(self.overall_qol) {
            return Err(Error::Validation(format!("overall_qol {} outside [0,100]", self.overall_qol)));
        }
        if let Some((name, v)) = self.issue_scores.iter().find(|(_, v)| !in_range(**v)) {
            return Err(Error::Validation(format!("issue `{name}` score {v} outside [0,100]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Pharmacological,
    NonPharmacological,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub id: String,
    pub kind: InterventionKind,
    pub name: String,
    pub start: Timestamp,
    #[serde(default)]
    pub end: Option<Timestamp>,
}

impl Intervention {
    /// Active on the half-open interval `[start, end)`; ongoing when `end` is absent.
    pub fn is_active_at(&self, t: Timestamp) -> bool {
        self.start <= t && self.end.is_none_or(|end| t < end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("intervention id must be non-empty".into()));
        }
        match self.end {
            Some(end) if end < self.start => {
                Err(Error::Validation(format!("intervention `{}` ends ({end}) before it starts ({})", self.id, self.start)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Required features must be present on every ingested record; optional
    /// ones are mean-filled at extraction time.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub required: bool,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        Self { name: name.into(), kind: FeatureKind::Numeric, required: false }
    }

    pub fn binary(name: &str) -> Self {
        Self { name: name.into(), kind: FeatureKind::Binary, required: false }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }
}

/// 64-bit content hash of a feature schema, rendered as 16 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SchemaHash(pub u64);

impl fmt::Display for SchemaHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for SchemaHash {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SchemaHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map(SchemaHash).map_err(serde::de::Error::custom)
    }
}

/// Ordered feature list. The order is the canonical feature-vector order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
    hash: SchemaHash,
    index: BTreeMap<String, usize>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, f) in features.iter().enumerate() {
            if f.name.is_empty() {
                return Err(Error::Validation("feature name must be non-empty".into()));
            }
            if index.insert(f.name.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate feature `{}`", f.name)));
            }
        }
        let mut hasher = Sha256::new();
        for f in &features {
            let kind = match f.kind {
                FeatureKind::Numeric => "numeric",
                FeatureKind::Binary => "binary",
            };
            hasher.update(f.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(kind.as_bytes());
            hasher.update([u8::from(f.required)]);
            hasher.update([b'\n']);
        }
        let digest = hasher.finalize();
        let hash = SchemaHash(u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")));
        Ok(Self { features, hash, index })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let features: Vec<FeatureSpec> = serde_json::from_slice(bytes)?;
        Self::new(features)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.features).expect("schema serializes")
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn arity(&self) -> usize {
        self.features.len()
    }

    pub fn hash(&self) -> SchemaHash {
        self.hash
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn intervention_index(&self, intervention_id: &str) -> Option<usize> {
        self.index_of(&intervention_feature(intervention_id))
    }

    /// Intervention ids that have an indicator feature in this schema.
    pub fn intervention_ids(&self) -> Vec<String> {
        self.features.iter().filter_map(|f| f.name.strip_prefix(INTERVENTION_PREFIX).map(str::to_owned)).collect()
    }
}

impl Serialize for FeatureSchema {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.features.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureSchema {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let features = Vec::<FeatureSpec>::deserialize(d)?;
        FeatureSchema::new(features).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    UnknownFeature { name: String },
    NonFinite { name: String },
    MissingFeature { name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownFeature { name } => write!(f, "unknown feature `{name}`"),
            Violation::NonFinite { name } => write!(f, "non-finite value for `{name}`"),
            Violation::MissingFeature { name } => write!(f, "missing required feature `{name}`"),
        }
    }
}

/// Returns every violation of `record` against `schema`; empty means valid.
pub fn validate_record(record: &PatientRecord, schema: &FeatureSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    for (name, value) in &record.features {
        if schema.index_of(name).is_none() {
            out.push(Violation::UnknownFeature { name: name.clone() });
        } else if !value.is_finite() {
            out.push(Violation::NonFinite { name: name.clone() });
        }
    }
    for spec in schema.features().iter().filter(|f| f.required) {
        if !record.features.contains_key(&spec.name) {
            out.push(Violation::MissingFeature { name: spec.name.clone() });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub schema_hash: SchemaHash,
    pub cancer_type: CancerType,
    pub target_variable: String,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub n: usize,
}

impl TrainingDataset {
    pub fn new(
        schema_hash: SchemaHash,
        cancer_type: CancerType,
        target_variable: impl Into<String>,
        rows: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let ds = Self { schema_hash, cancer_type, target_variable: target_variable.into(), n: rows.len(), rows, targets };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.n || self.targets.len() != self.n {
            return Err(Error::Validation(format!("dataset shape: n={} rows={} targets={}", self.n, self.rows.len(), self.targets.len())));
        }
        if let Some(first) = self.rows.first() {
            let d = first.len();
            if self.rows.iter().any(|r| r.len() != d) {
                return Err(Error::Validation("ragged dataset rows".into()));
            }
        }
        if self.rows.iter().flatten().chain(&self.targets).any(|v| !v.is_finite()) {
            return Err(Error::Validation("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Subset by row indices, preserving metadata.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            schema_hash: self.schema_hash,
            cancer_type: self.cancer_type,
            target_variable: self.target_variable.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            n: indices.len(),
        }
    }

    /// Row concatenation; metadata must match.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.schema_hash != other.schema_hash || self.cancer_type != other.cancer_type || self.target_variable != other.target_variable {
            return Err(Error::Merge("dataset metadata differs".into()));
        }
        let mut out = self.clone();
        out.rows.extend(other.rows.iter().cloned());
        out.targets.extend(other.targets.iter().copied());
        out.n += other.n;
        Ok(out)
    }
}

/// Joins QoL observations to the most recent record of the same patient
/// (`recorded_at <= measured_at`) and emits one row per joined pair in
/// canonical schema order.
///
/// Output rows are sorted by `(pseudonym, measured_at)` so extraction does not
/// depend on input order. Missing optional features are filled with the mean
/// of the rows that carry them. When the schema has [`TIME_FEATURE`], it is
/// advanced by the days elapsed between the record and the observation.
pub fn extract_training_dataset(
    records: &[PatientRecord],
    observations: &[QoLObservation],
    schema: &FeatureSchema,
    cancer_type: CancerType,
    target_variable: &str,
) -> Result<TrainingDataset> {
    extract(records, observations, None, schema, cancer_type, target_variable)
}

/// Like [`extract_training_dataset`], but every intervention indicator in
/// the schema is set from the patient's interventions active at the
/// observation time, overriding any value carried by the record.
pub fn extract_training_dataset_with_interventions(
    records: &[PatientRecord],
    observations: &[QoLObservation],
    interventions: &BTreeMap<Pseudonym, Vec<Intervention>>,
    schema: &FeatureSchema,
    cancer_type: CancerType,
    target_variable: &str,
) -> Result<TrainingDataset> {
    extract(records, observations, Some(interventions), schema, cancer_type, target_variable)
}

fn extract(
    records: &[PatientRecord],
    observations: &[QoLObservation],
    interventions: Option<&BTreeMap<Pseudonym, Vec<Intervention>>>,
    schema: &FeatureSchema,
    cancer_type: CancerType,
    target_variable: &str,
) -> Result<TrainingDataset> {
    let mut by_patient: BTreeMap<&Pseudonym, Vec<&PatientRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.cancer_type == cancer_type) {
        by_patient.entry(&r.pseudonym).or_default().push(r);
    }
    for recs in by_patient.values_mut() {
        // Equal timestamps resolve to the record with the greatest canonical
        // encoding so the choice is independent of input order.
        recs.sort_by(|a, b| a.recorded_at.cmp(&b.recorded_at).then_with(|| canonical_features(a).cmp(&canonical_features(b))));
    }

    let mut joined: Vec<(&QoLObservation, &PatientRecord, f64)> = observations
        .iter()
        .filter_map(|obs| {
            let target = obs.target(target_variable)?;
            let recs = by_patient.get(&obs.pseudonym)?;
            let pos = recs.partition_point(|r| r.recorded_at <= obs.measured_at);
            (pos > 0).then(|| (obs, recs[pos - 1], target))
        })
        .collect();
    if joined.is_empty() {
        return Err(Error::EmptyDataset);
    }
    joined.sort_by(|a, b| {
        (&a.0.pseudonym, a.0.measured_at)
            .cmp(&(&b.0.pseudonym, b.0.measured_at))
            .then(a.2.total_cmp(&b.2))
            .then_with(|| canonical_features(a.1).cmp(&canonical_features(b.1)))
    });

    let time_idx = schema.index_of(TIME_FEATURE);
    let indicator_slots: Vec<(String, usize)> =
        schema.intervention_ids().into_iter().filter_map(|id| schema.intervention_index(&id).map(|j| (id, j))).collect();
    let mut rows: Vec<Vec<f64>> = joined
        .iter()
        .map(|(obs, rec, _)| {
            let mut row: Vec<f64> =
                schema.names().map(|name| rec.features.get(name).copied().filter(|v| v.is_finite()).unwrap_or(f64::NAN)).collect();
            if let Some(i) = time_idx {
                if row[i].is_finite() {
                    row[i] += (obs.measured_at - rec.recorded_at) as f64 / SECONDS_PER_DAY as f64;
                }
            }
            if let Some(ivs) = interventions {
                let active = ivs.get(&obs.pseudonym).map(|l| active_interventions(l, obs.measured_at)).unwrap_or_default();
                for (id, j) in &indicator_slots {
                    row[*j] = if active.contains(id) { 1.0 } else { 0.0 };
                }
            }
            row
        })
        .collect();

    for j in 0..schema.arity() {
        let present: Vec<f64> = rows.iter().map(|r| r[j]).filter(|v| v.is_finite()).collect();
        if present.len() == rows.len() {
            continue;
        }
        let fill = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        for r in rows.iter_mut().filter(|r| !r[j].is_finite()) {
            r[j] = fill;
        }
    }

    let targets = joined.iter().map(|(_, _, t)| *t).collect();
    TrainingDataset::new(schema.hash(), cancer_type, target_variable, rows, targets)
}

fn canonical_features(r: &PatientRecord) -> Vec<(String, u64)> {
    r.features.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Linear,
    Tree,
}

impl ModelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Linear => "linear",
            ModelFamily::Tree => "tree",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }
}

/// Identifies a model by `(cancer type, target variable, family, task)`.
/// Rendered in URL paths as `cancer_type.target.family.task`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelKey {
    pub cancer_type: CancerType,
    pub target_variable: String,
    pub family: ModelFamily,
    pub task: Task,
}

impl ModelKey {
    pub fn new(cancer_type: CancerType, target_variable: &str, family: ModelFamily, task: Task) -> Self {
        Self { cancer_type, target_variable: target_variable.into(), family, task }
    }

    pub fn linear_regression(cancer_type: CancerType, target_variable: &str) -> Self {
        Self::new(cancer_type, target_variable, ModelFamily::Linear, Task::Regression)
    }
}

impl fmt::Display for ModelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}.{}", self.cancer_type, self.target_variable, self.family.as_str(), self.task.as_str())
    }
}

impl FromStr for ModelKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let [cancer, target, family, task] = parts.as_slice() else {
            return Err(Error::Validation(format!("model key `{s}` must have four dot-separated parts")));
        };
        let family = match *family {
            "linear" => ModelFamily::Linear,
            "tree" => ModelFamily::Tree,
            other => return Err(Error::Validation(format!("unknown model family `{other}`"))),
        };
        let task = match *task {
            "regression" => Task::Regression,
            "classification" => Task::Classification,
            other => return Err(Error::Validation(format!("unknown task `{other}`"))),
        };
        if target.is_empty() {
            return Err(Error::Validation("empty target variable".into()));
        }
        Ok(Self { cancer_type: cancer.parse()?, target_variable: (*target).to_owned(), family, task })
    }
}

impl Serialize for ModelKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModelKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Ids of interventions active at `t`.
pub fn active_interventions(interventions: &[Intervention], t: Timestamp) -> BTreeSet<String> {
    interventions.iter().filter(|iv| iv.is_active_at(t)).map(|iv| iv.id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![FeatureSpec::numeric("age").required(), FeatureSpec::numeric("steps")]).unwrap()
    }

    fn pid(s: &str) -> Pseudonym {
        pseudonymize(s, &PseudonymKey::derive("test")).unwrap()
    }

    fn record(p: &str, t: Timestamp, age: f64) -> PatientRecord {
        PatientRecord {
            pseudonym: pid(p),
            cancer_type: CancerType::Breast,
            features: BTreeMap::from([("age".to_string(), age)]),
            recorded_at: t,
        }
    }

    fn obs(p: &str, t: Timestamp, q: f64) -> QoLObservation {
        QoLObservation { pseudonym: pid(p), measured_at: t, overall_qol: q, issue_scores: BTreeMap::new() }
    }

    #[test]
    fn pseudonymize_is_deterministic_and_keyed() {
        let k1 = PseudonymKey::derive("k1");
        let k2 = PseudonymKey::derive("k2");
        let a = pseudonymize("P-001", &k1).unwrap();
        assert_eq!(a, pseudonymize("P-001", &k1).unwrap());
        assert_ne!(a, pseudonymize("P-001", &k2).unwrap());
        assert_eq!(a.token().len(), 32);
        assert!(Pseudonym::parse(a.token()).is_ok());
    }

    #[test]
    fn pseudonymize_rejects_empty_id() {
        assert!(matches!(pseudonymize("", &PseudonymKey::derive("k")), Err(Error::Validation(_))));
    }

    #[test]
    fn pseudonym_never_contains_short_hex_ids() {
        let key = PseudonymKey::derive("k");
        for id in ["1", "a", "0f", "abc", "42"] {
            assert!(!pseudonymize(id, &key).unwrap().token().contains(id));
        }
    }

    #[test]
    fn validate_record_reports_each_violation() {
        let s = schema();
        assert!(validate_record(&record("a", 0, 50.0), &s).is_empty());

        let mut r = record("a", 0, 50.0);
        r.features.insert("xyz".into(), 1.0);
        assert_eq!(validate_record(&r, &s), vec![Violation::UnknownFeature { name: "xyz".into() }]);

        let r = record("a", 0, f64::NAN);
        assert_eq!(validate_record(&r, &s), vec![Violation::NonFinite { name: "age".into() }]);

        let mut r = record("a", 0, 1.0);
        r.features.clear();
        assert_eq!(validate_record(&r, &s), vec![Violation::MissingFeature { name: "age".into() }]);
    }

    #[test]
    fn extraction_join_semantics() {
        let s = schema();
        let ds = extract_training_dataset(
            &[record("a", 10, 50.0)],
            &[obs("a", 20, 70.0), obs("a", 30, 65.0)],
            &s,
            CancerType::Breast,
            OVERALL_QOL,
        )
        .unwrap();
        assert_eq!(ds.n, 2);
        assert_eq!(ds.targets, vec![70.0, 65.0]);
    }

    #[test]
    fn extraction_skips_observations_before_any_record() {
        let err = extract_training_dataset(&[record("a", 10, 50.0)], &[obs("a", 5, 70.0)], &schema(), CancerType::Breast, OVERALL_QOL);
        assert_eq!(err, Err(Error::EmptyDataset));
    }

    #[test]
    fn extraction_uses_most_recent_record() {
        let ds = extract_training_dataset(
            &[record("a", 10, 50.0), record("a", 25, 51.0)],
            &[obs("a", 30, 60.0)],
            &schema(),
            CancerType::Breast,
            OVERALL_QOL,
        )
        .unwrap();
        assert_eq!(ds.rows, vec![vec![51.0, 0.0]]);
    }

    #[test]
    fn extraction_mean_fills_missing_optional_features() {
        let mut r1 = record("a", 0, 40.0);
        r1.features.insert("steps".into(), 1000.0);
        let mut r2 = record("b", 0, 60.0);
        r2.features.insert("steps".into(), 3000.0);
        let r3 = record("c", 0, 50.0);
        let ds = extract_training_dataset(
            &[r1, r2, r3],
            &[obs("a", 1, 1.0), obs("b", 1, 2.0), obs("c", 1, 3.0)],
            &schema(),
            CancerType::Breast,
            OVERALL_QOL,
        )
        .unwrap();
        let c_row = ds.rows.iter().find(|r| r[0] == 50.0).unwrap();
        assert_eq!(c_row[1], 2000.0);
    }

    #[test]
    fn extraction_advances_time_feature() {
        let s = FeatureSchema::new(vec![FeatureSpec::numeric(TIME_FEATURE)]).unwrap();
        let mut r = record("a", 0, 0.0);
        r.features = BTreeMap::from([(TIME_FEATURE.to_string(), 10.0)]);
        let ds = extract_training_dataset(&[r], &[obs("a", 3 * SECONDS_PER_DAY, 5.0)], &s, CancerType::Breast, OVERALL_QOL).unwrap();
        assert_eq!(ds.rows[0][0], 13.0);
    }

    #[test]
    fn schema_hash_tracks_content() {
        let a = schema();
        let b = FeatureSchema::new(vec![FeatureSpec::numeric("steps"), FeatureSpec::numeric("age").required()]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), schema().hash());
        let round: FeatureSchema = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(round.hash(), a.hash());
        assert!(FeatureSchema::new(vec![FeatureSpec::numeric("x"), FeatureSpec::binary("x")]).is_err());
    }

    #[test]
    fn model_key_path_form_round_trips() {
        let k = ModelKey::new(CancerType::HeadNeck, "fatigue", ModelFamily::Tree, Task::Classification);
        assert_eq!(k.to_string(), "head_neck.fatigue.tree.classification");
        assert_eq!(k.to_string().parse::<ModelKey>().unwrap(), k);
        assert!("breast.x.linear".parse::<ModelKey>().is_err());
    }

    #[test]
    fn intervention_activity_is_half_open() {
        let iv = Intervention {
            id: "walk".into(),
            kind: InterventionKind::NonPharmacological,
            name: "Walking".into(),
            start: 10,
            end: Some(20),
        };
        assert!(!iv.is_active_at(9));
        assert!(iv.is_active_at(10));
        assert!(!iv.is_active_at(20));
        let bad = Intervention { end: Some(5), ..iv };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn indicators_follow_interventions_at_observation_time() {
        let s = FeatureSchema::new(vec![
            FeatureSpec::numeric("age"),
            FeatureSpec::binary(&intervention_feature("walk")),
            FeatureSpec::binary(&intervention_feature("diet")),
        ])
        .unwrap();
        let walk =
            Intervention { id: "walk".into(), kind: InterventionKind::NonPharmacological, name: "Walking".into(), start: 15, end: None };
        let ivs = BTreeMap::from([(pid("a"), vec![walk])]);
        let obs = [obs("a", 12, 60.0), obs("a", 20, 70.0), obs("b", 20, 50.0)];
        let recs = [record("a", 10, 50.0), record("b", 10, 40.0)];
        let ds = extract_training_dataset_with_interventions(&recs, &obs, &ivs, &s, CancerType::Breast, OVERALL_QOL).unwrap();
        let a = pid("a");
        let b = pid("b");
        let expect_a = [vec![50.0, 0.0, 0.0], vec![50.0, 1.0, 0.0]];
        let mut expected: Vec<(&Pseudonym, Vec<f64>)> =
            vec![(&a, expect_a[0].clone()), (&a, expect_a[1].clone()), (&b, vec![40.0, 0.0, 0.0])];
        expected.sort_by(|x, y| x.0.cmp(y.0));
        let rows: Vec<Vec<f64>> = expected.into_iter().map(|e| e.1).collect();
        assert_eq!(ds.rows, rows);
    }

    #[test]
    fn lenient_features_accept_nan_strings() {
        let json =
            format!(r#"{{"pseudonym":"{}","cancer_type":"breast","features":{{"age":"NaN","steps":null}},"recorded_at":0}}"#, pid("a"));
        let r: PatientRecord = serde_json::from_str(&json).unwrap();
        assert!(r.features["age"].is_nan() && r.features["steps"].is_nan());
        let back: PatientRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert!(back.features["age"].is_nan());
    }
}
