use serde::{Deserialize, Serialize};

use super::linear::FeatureStats;
use super::{check_arity, TrainingConfig};
use crate::domain::{SchemaHash, Task, TrainingDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split { split_feature_index: usize, threshold: f64, left_child: usize, right_child: usize },
    Leaf { value: f64 },
}

/// CART tree. Leaves hold the mean target of the rows that reach them; for
/// binary classification that is the positive-class probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeModel {
    pub task: Task,
    pub schema_hash: SchemaHash,
    pub arity: usize,
    pub max_depth: usize,
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    pub feature_means: Vec<f64>,
    pub trained_on_n: u64,
}

impl TreeModel {
    pub fn leaf(value: f64, arity: usize, schema_hash: SchemaHash, task: Task) -> Self {
        Self {
            task,
            schema_hash,
            arity,
            max_depth: 1,
            nodes: vec![TreeNode::Leaf { value }],
            root: 0,
            feature_means: vec![0.0; arity],
            trained_on_n: 0,
        }
    }

    /// Go left iff `feature < threshold`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_arity(self.arity, x.len())?;
        Ok(self.predict_unchecked(x))
    }

    pub fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let mut i = self.root;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { split_feature_index, threshold, left_child, right_child } => {
                    i = if x[*split_feature_index] < *threshold { *left_child } else { *right_child };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left_child, right_child, .. } => 1 + go(nodes, *left_child).max(go(nodes, *right_child)),
            }
        }
        go(&self.nodes, self.root)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Every node reachable exactly once from the root, children in range,
    /// finite leaves and thresholds, depth within `max_depth`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("tree: {m}")));
        if self.root >= self.nodes.len() {
            return bad(format!("root {} out of range", self.root));
        }
        if self.feature_means.len() != self.arity {
            return bad("feature_means length differs from arity".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![(self.root, 0usize)];
        while let Some((i, depth)) = stack.pop() {
            if i >= self.nodes.len() {
                return bad(format!("child {i} out of range"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return bad(format!("node {i} reachable twice"));
            }
            match &self.nodes[i] {
                TreeNode::Leaf { value } if !value.is_finite() => return bad(format!("leaf {i} not finite")),
                TreeNode::Leaf { .. } => {}
                TreeNode::Split { split_feature_index, threshold, left_child, right_child } => {
                    if *split_feature_index >= self.arity || !threshold.is_finite() {
                        return bad(format!("split {i} invalid"));
                    }
                    if depth + 1 > self.max_depth {
                        return bad(format!("depth exceeds max_depth {}", self.max_depth));
                    }
                    stack.push((*left_child, depth + 1));
                    stack.push((*right_child, depth + 1));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("unreachable nodes".into());
        }
        Ok(())
    }
}

/// Weighted impurity `n * impurity` of a node with target sum `s`, squared
/// sum `s2` over `n` rows. Regression: sum of squared errors. Classification:
/// `n * gini` for 0/1 labels.
fn node_cost(task: Task, n: f64, s: f64, s2: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    match task {
        Task::Regression => (s2 - s * s / n).max(0.0),
        Task::Classification => {
            let p = s / n;
            n * (1.0 - p * p - (1.0 - p) * (1.0 - p))
        }
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Builder<'a> {
    data: &'a TrainingDataset,
    config: &'a TrainingConfig,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn build(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let y = &self.data.targets;
        let n = rows.len() as f64;
        let s: f64 = rows.iter().map(|&i| y[i]).sum();
        let s2: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
        let leaf_value = s / n;
        let cost = node_cost(self.config.task, n, s, s2);
        let pure = cost <= 1e-12 * (1.0 + s2.abs());

        let split = if depth >= self.config.max_depth || pure || rows.len() < 2 * self.config.min_leaf_samples {
            None
        } else {
            self.best_split(rows, cost)
        };
        let Some(split) = split else {
            self.nodes.push(TreeNode::Leaf { value: leaf_value });
            return self.nodes.len() - 1;
        };

        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: leaf_value });
        let x = &self.data.rows;
        rows.sort_by(|&a, &b| (x[a][split.feature] >= split.threshold).cmp(&(x[b][split.feature] >= split.threshold)).then(a.cmp(&b)));
        let mid = rows.partition_point(|&i| x[i][split.feature] < split.threshold);
        let (left_rows, right_rows) = rows.split_at_mut(mid);
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] =
            TreeNode::Split { split_feature_index: split.feature, threshold: split.threshold, left_child: left, right_child: right };
        id
    }

    /// Exhaustive search over midpoints of sorted unique values. Iterates
    /// features and thresholds in ascending order and only replaces the
    /// incumbent on a strictly larger gain, so ties keep the lowest feature
    /// index and then the lowest threshold. Zero-gain splits of impure nodes
    /// are admissible.
    fn best_split(&self, rows: &[usize], parent_cost: f64) -> Option<Split> {
        let x = &self.data.rows;
        let y = &self.data.targets;
        let task = self.config.task;
        let min_leaf = self.config.min_leaf_samples;
        let n = rows.len();
        let total_s: f64 = rows.iter().map(|&i| y[i]).sum();
        let total_s2: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
        let eps = 1e-12 * (1.0 + parent_cost);

        let mut best: Option<Split> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for feature in 0..self.data.arity() {
            order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]).then(a.cmp(&b)));
            let (mut ls, mut ls2) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = order[k];
                ls += y[i];
                ls2 += y[i] * y[i];
                let (lo, hi) = (x[i][feature], x[order[k + 1]][feature]);
                if lo == hi {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let child = node_cost(task, nl as f64, ls, ls2) + node_cost(task, nr as f64, total_s - ls, total_s2 - ls2);
                let gain = parent_cost - child;
                let threshold = lo + (hi - lo) / 2.0;
                if best.as_ref().is_none_or(|b| gain > b.gain + eps) {
                    best = Some(Split { feature, threshold, gain });
                }
            }
        }
        best.filter(|b| b.gain > -eps)
    }
}

/// Greedy top-down CART induction: variance reduction for regression, Gini
/// impurity for classification. Stops at `max_depth`, when a child would
/// fall below `min_leaf_samples`, or when the node is pure.
pub fn train_tree(dataset: &TrainingDataset, config: &TrainingConfig) -> Result<TreeModel> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut builder = Builder { data: dataset, config, nodes: Vec::new() };
    let mut rows: Vec<usize> = (0..dataset.n).collect();
    let root = builder.build(&mut rows, 0);
    let model = TreeModel {
        task: config.task,
        schema_hash: dataset.schema_hash,
        arity: dataset.arity(),
        max_depth: config.max_depth,
        nodes: builder.nodes,
        root,
        feature_means: FeatureStats::of(&dataset.rows).means,
        trained_on_n: dataset.n as u64,
    };
    debug_assert!(model.validate().is_ok());
    Ok(model)
}
