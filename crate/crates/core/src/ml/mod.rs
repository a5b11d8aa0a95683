//! From-scratch training, inference, evaluation, averaging and
//! serialization for the two model families: linear/logistic and CART trees.

mod linear;
mod metrics;
mod tree;

use serde::{Deserialize, Serialize};

use crate::domain::{ModelFamily, SchemaHash, Task, TrainingDataset};
use crate::error::{Error, Result};

pub use linear::{average_models, train_linear, train_linear_with_backoff, FeatureStats, LinearModel};
pub use metrics::{evaluate, ClassificationMetrics, Metrics, RegressionMetrics};
pub use tree::{train_tree, TreeModel, TreeNode};

/// Hyperparameters shared by both families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub ridge_lambda: f64,
    pub max_depth: usize,
    pub min_leaf_samples: usize,
    pub rng_seed: u64,
    pub task: Task,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 500, ridge_lambda: 0.0, max_depth: 4, min_leaf_samples: 5, rng_seed: 0, task: Task::Regression }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("training config: {m}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be > 0");
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if !(self.ridge_lambda.is_finite() && self.ridge_lambda >= 0.0) {
            return fail("ridge_lambda must be >= 0");
        }
        if self.max_depth < 1 {
            return fail("max_depth must be >= 1");
        }
        if self.min_leaf_samples < 1 {
            return fail("min_leaf_samples must be >= 1");
        }
        Ok(())
    }
}

/// A trained model of either family. Serializes to the federation wire
/// format `{family, task, schema_hash, params..., trained_on_n}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    Tree(TreeModel),
}

impl Model {
    pub fn family(&self) -> ModelFamily {
        match self {
            Model::Linear(_) => ModelFamily::Linear,
            Model::Tree(_) => ModelFamily::Tree,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Linear(m) => m.task,
            Model::Tree(m) => m.task,
        }
    }

    pub fn schema_hash(&self) -> SchemaHash {
        match self {
            Model::Linear(m) => m.schema_hash,
            Model::Tree(m) => m.schema_hash,
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Model::Linear(m) => m.weights.len(),
            Model::Tree(m) => m.arity,
        }
    }

    pub fn trained_on_n(&self) -> u64 {
        match self {
            Model::Linear(m) => m.trained_on_n,
            Model::Tree(m) => m.trained_on_n,
        }
    }

    /// Per-feature means of the training data; the Shapley background.
    pub fn feature_means(&self) -> &[f64] {
        match self {
            Model::Linear(m) => &m.feature_means,
            Model::Tree(m) => &m.feature_means,
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        match self {
            Model::Linear(m) => m.predict(features),
            Model::Tree(m) => m.predict(features),
        }
    }

    pub fn as_linear(&self) -> Option<&LinearModel> {
        match self {
            Model::Linear(m) => Some(m),
            Model::Tree(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Model::Linear(m) => m.validate(),
            Model::Tree(m) => m.validate(),
        }
    }
}

impl From<LinearModel> for Model {
    fn from(m: LinearModel) -> Self {
        Model::Linear(m)
    }
}

impl From<TreeModel> for Model {
    fn from(m: TreeModel) -> Self {
        Model::Tree(m)
    }
}

/// Canonical JSON: struct fields in declaration order, doubles printed in
/// shortest round-trip form.
pub fn serialize_model(model: &Model) -> Vec<u8> {
    serde_json::to_vec(model).expect("models always serialize")
}

pub fn deserialize_model(bytes: &[u8]) -> Result<Model> {
    let model: Model = serde_json::from_slice(bytes)?;
    model.validate().map_err(|e| Error::Decode(e.to_string()))?;
    Ok(model)
}

/// Trains the family named by `family`.
pub fn train(family: ModelFamily, dataset: &TrainingDataset, config: &TrainingConfig) -> Result<Model> {
    match family {
        ModelFamily::Linear => train_linear_with_backoff(dataset, config, None).map(Model::Linear),
        ModelFamily::Tree => train_tree(dataset, config).map(Model::Tree),
    }
}

pub(crate) fn check_arity(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::SchemaMismatch(format!("expected {expected} features, got {found}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::CancerType;

    fn ds(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> TrainingDataset {
        TrainingDataset::new(SchemaHash(7), CancerType::Breast, "overall_qol", rows, targets).unwrap()
    }

    #[test]
    fn serialization_is_canonical_and_round_trips() {
        let data = ds(vec![vec![0.1, 3.0], vec![1.7, -2.0], vec![2.2, 0.5]], vec![1.0, 2.5, 0.3]);
        let lin = Model::Linear(train_linear(&data, &TrainingConfig::default(), None).unwrap());
        let tree = Model::Tree(train_tree(&data, &TrainingConfig { min_leaf_samples: 1, ..Default::default() }).unwrap());
        for m in [lin, tree] {
            let a = serialize_model(&m);
            assert_eq!(a, serialize_model(&m));
            assert_eq!(deserialize_model(&a).unwrap(), m);
            assert!(matches!(deserialize_model(&a[..a.len() / 2]), Err(Error::Decode(_))));
        }
    }

    #[test]
    fn wire_form_leads_with_family() {
        let m = Model::Linear(LinearModel::new(vec![2.0, 0.0], 1.0, SchemaHash(1), Task::Regression));
        let s = String::from_utf8(serialize_model(&m)).unwrap();
        assert!(s.starts_with(r#"{"family":"linear","task":"regression","schema_hash":"0000000000000001""#), "{s}");
        assert!(s.contains(r#""trained_on_n":0"#));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        for bad in [
            TrainingConfig { epochs: 0, ..Default::default() },
            TrainingConfig { learning_rate: 0.0, ..Default::default() },
            TrainingConfig { ridge_lambda: -1.0, ..Default::default() },
            TrainingConfig { max_depth: 0, ..Default::default() },
            TrainingConfig { min_leaf_samples: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn decode_rejects_invalid_tree() {
        let bad = r#"{"family":"tree","task":"regression","schema_hash":"0000000000000001","arity":1,"max_depth":2,
            "nodes":[{"split_feature_index":0,"threshold":1.0,"left_child":0,"right_child":0}],"root":0,
            "feature_means":[0.0],"trained_on_n":1}"#;
        assert!(matches!(deserialize_model(bad.as_bytes()), Err(Error::Decode(_))));
    }
}
