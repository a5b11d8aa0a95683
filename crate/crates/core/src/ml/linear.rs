use serde::{Deserialize, Serialize};

use super::{check_arity, TrainingConfig};
use crate::domain::{SchemaHash, Task, TrainingDataset};
use crate::error::{Error, Result};

/// Linear (regression) or logistic (classification) model.
///
/// Parameters are stored in raw feature space so `predict` is `w·x + b`
/// (or its sigmoid) and parameter averaging across edges is exact. Training
/// runs in standardized space; the per-feature statistics used for that are
/// kept for reference and as the Shapley background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub task: Task,
    pub schema_hash: SchemaHash,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub trained_on_n: u64,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>, bias: f64, schema_hash: SchemaHash, task: Task) -> Self {
        let d = weights.len();
        Self { task, schema_hash, weights, bias, feature_means: vec![0.0; d], feature_stds: vec![1.0; d], trained_on_n: 0 }
    }

    pub fn zeros(arity: usize, schema_hash: SchemaHash, task: Task) -> Self {
        Self::new(vec![0.0; arity], 0.0, schema_hash, task)
    }

    pub fn arity(&self) -> usize {
        self.weights.len()
    }

    /// `w·x + b`, before the logistic link.
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_arity(self.arity(), x.len())?;
        Ok(self.predict_unchecked(x))
    }

    pub fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let z = self.decision(x);
        match self.task {
            Task::Regression => z,
            Task::Classification => sigmoid(z),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.len();
        if self.feature_means.len() != d || self.feature_stds.len() != d {
            return Err(Error::Validation("linear model statistics do not match weight arity".into()));
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.feature_means)
            .chain(&self.feature_stds)
            .chain(std::iter::once(&self.bias))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("linear model has non-finite parameters".into()));
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-feature mean and population standard deviation, mergeable across
/// datasets without revisiting rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub n: u64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureStats {
    pub fn of(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n == 0 {
            return Self { n: 0, means: vec![0.0; d], stds: vec![0.0; d] };
        }
        let inv_n = 1.0 / n as f64;
        let means: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() * inv_n).collect();
        let stds = (0..d)
            .map(|j| {
                let m = means[j];
                (rows.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() * inv_n).sqrt()
            })
            .collect();
        Self { n: n as u64, means, stds }
    }

    /// Pooled statistics (Chan et al. parallel variance update).
    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return other.clone();
        }
        if other.n == 0 {
            return self.clone();
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let mut means = Vec::with_capacity(self.means.len());
        let mut stds = Vec::with_capacity(self.means.len());
        for j in 0..self.means.len() {
            let delta = other.means[j] - self.means[j];
            let mean = self.means[j] + delta * nb / n;
            let m2 = self.stds[j].powi(2) * na + other.stds[j].powi(2) * nb + delta * delta * na * nb / n;
            means.push(mean);
            stds.push((m2 / n).sqrt());
        }
        Self { n: self.n + other.n, means, stds }
    }

    /// Scale used for standardization; near-constant features keep unit scale.
    pub fn scales(&self) -> Vec<f64> {
        self.means.iter().zip(&self.stds).map(|(m, s)| if *s <= 1e-9 * m.abs().max(1.0) { 1.0 } else { *s }).collect()
    }
}

/// Full-batch gradient descent on the ridge-regularized squared loss
/// (regression) or logistic loss (classification).
///
/// Loss: `1/(2n) Σ (f(x_i) - y_i)^2 + λ/2 |w_s|^2` over standardized
/// features `x_s = (x - mean) / scale`; the bias is not regularized.
/// Starts from `init` (mapped into standardized space) or zeros.
pub fn train_linear(dataset: &TrainingDataset, config: &TrainingConfig, init: Option<&LinearModel>) -> Result<LinearModel> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = dataset.arity();
    if let Some(init) = init {
        if init.schema_hash != dataset.schema_hash {
            return Err(Error::SchemaMismatch(format!("init model schema {} != dataset schema {}", init.schema_hash, dataset.schema_hash)));
        }
        check_arity(d, init.arity())?;
    }

    let stats = FeatureStats::of(&dataset.rows);
    let scales = stats.scales();
    let inv_scales: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
    let xs: Vec<Vec<f64>> = dataset.rows.iter().map(|r| (0..d).map(|j| (r[j] - stats.means[j]) * inv_scales[j]).collect()).collect();

    let (mut w, mut b) = match init {
        Some(m) => {
            let w: Vec<f64> = (0..d).map(|j| m.weights[j] * scales[j]).collect();
            let b = m.bias + (0..d).map(|j| m.weights[j] * stats.means[j]).sum::<f64>();
            (w, b)
        }
        None => (vec![0.0; d], 0.0),
    };

    let n = dataset.n;
    let inv_n = 1.0 / n as f64;
    let lr = config.learning_rate;
    let lambda = config.ridge_lambda;
    let mut residuals = vec![0.0; n];
    for epoch in 0..config.epochs {
        for (i, x) in xs.iter().enumerate() {
            let z = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let pred = match config.task {
                Task::Regression => z,
                Task::Classification => sigmoid(z),
            };
            residuals[i] = pred - dataset.targets[i];
        }
        let grad_b = residuals.iter().sum::<f64>() * inv_n;
        if !grad_b.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at epoch {epoch} (learning rate {lr})")));
        }
        for j in 0..d {
            let g = xs.iter().zip(&residuals).map(|(x, r)| r * x[j]).sum::<f64>() * inv_n + lambda * w[j];
            w[j] -= lr * g;
        }
        b -= lr * grad_b;
    }

    let weights: Vec<f64> = (0..d).map(|j| w[j] * inv_scales[j]).collect();
    let bias = b - (0..d).map(|j| w[j] * stats.means[j] * inv_scales[j]).sum::<f64>();
    let model = LinearModel {
        task: config.task,
        schema_hash: dataset.schema_hash,
        weights,
        bias,
        feature_means: stats.means,
        feature_stds: stats.stds,
        trained_on_n: n as u64,
    };
    if model.validate().is_err() {
        return Err(Error::Divergence(format!("non-finite parameters (learning rate {lr})")));
    }
    Ok(model)
}

pub const MAX_DIVERGENCE_RETRIES: u32 = 5;

/// [`train_linear`], halving the learning rate after each divergence, at
/// most [`MAX_DIVERGENCE_RETRIES`] times.
pub fn train_linear_with_backoff(dataset: &TrainingDataset, config: &TrainingConfig, init: Option<&LinearModel>) -> Result<LinearModel> {
    let mut cfg = config.clone();
    let mut attempt = 0;
    loop {
        match train_linear(dataset, &cfg, init) {
            Err(Error::Divergence(msg)) if attempt < MAX_DIVERGENCE_RETRIES => {
                log::warn!("{msg}; retrying with learning rate {}", cfg.learning_rate / 2.0);
                cfg.learning_rate /= 2.0;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Element-wise (optionally sample-count weighted) mean of linear models.
///
/// Inputs are put into a canonical order first and the mean is accumulated
/// as offsets from the first model, so the result is independent of input
/// order and exactly reproduces a model averaged with copies of itself.
pub fn average_models(models: &[LinearModel], weights: Option<&[u64]>) -> Result<LinearModel> {
    let first = models.first().ok_or_else(|| Error::Validation("average of zero models".into()))?;
    if let Some(w) = weights {
        if w.len() != models.len() {
            return Err(Error::Validation(format!("{} weights for {} models", w.len(), models.len())));
        }
    }
    for m in models {
        if m.schema_hash != first.schema_hash || m.task != first.task {
            return Err(Error::SchemaMismatch("averaged models differ in schema or task".into()));
        }
        check_arity(first.arity(), m.arity())?;
    }

    let counts: Vec<u64> = match weights {
        Some(w) => w.to_vec(),
        None => models.iter().map(|m| m.trained_on_n).collect(),
    };
    let mut order: Vec<(usize, Vec<u8>)> =
        models.iter().enumerate().map(|(i, m)| (i, serde_json::to_vec(m).expect("serializes"))).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(counts[a.0].cmp(&counts[b.0])));

    let mix: Vec<f64> = match weights {
        Some(w) => {
            let total: u64 = w.iter().sum();
            if total == 0 {
                return Err(Error::Validation("sample-count weights sum to zero".into()));
            }
            order.iter().map(|(i, _)| w[*i] as f64 / total as f64).collect()
        }
        None => vec![1.0 / models.len() as f64; models.len()],
    };
    let sorted: Vec<&LinearModel> = order.iter().map(|(i, _)| &models[*i]).collect();
    let base = sorted[0];
    let offset_mean = |get: &dyn Fn(&LinearModel) -> f64| -> f64 {
        let b = get(base);
        b + sorted.iter().zip(&mix).map(|(m, a)| a * (get(m) - b)).sum::<f64>()
    };

    let d = base.arity();
    let weights_out = (0..d).map(|j| offset_mean(&|m| m.weights[j])).collect();
    let bias = offset_mean(&|m| m.bias);
    let means: Vec<f64> = (0..d).map(|j| offset_mean(&|m| m.feature_means[j])).collect();
    // Pooled variance of the mixture: E[var + mean^2] - mean^2.
    let stds = (0..d)
        .map(|j| {
            let second = sorted
                .iter()
                .zip(&mix)
                .map(|(m, a)| a * (m.feature_stds[j].powi(2) + (m.feature_means[j] - means[j]).powi(2)))
                .sum::<f64>();
            second.max(0.0).sqrt()
        })
        .collect();
    Ok(LinearModel {
        task: base.task,
        schema_hash: base.schema_hash,
        weights: weights_out,
        bias,
        feature_means: means,
        feature_stds: stds,
        trained_on_n: counts.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::CancerType;
    use proptest::prelude::*;

    fn ds(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> TrainingDataset {
        TrainingDataset::new(SchemaHash(1), CancerType::Breast, "overall_qol", rows, targets).unwrap()
    }

    fn cfg(epochs: u32) -> TrainingConfig {
        TrainingConfig { epochs, ..Default::default() }
    }

    /// Least squares via normal equations and Gaussian elimination with
    /// partial pivoting. Returns `[w..., b]`.
    fn normal_equations(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let d = rows[0].len() + 1;
        let aug = |r: &Vec<f64>| r.iter().copied().chain(std::iter::once(1.0)).collect::<Vec<_>>();
        let mut a = vec![vec![0.0; d + 1]; d];
        for (r, &t) in rows.iter().zip(y) {
            let x = aug(r);
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += x[i] * x[j];
                }
                a[i][d] += x[i] * t;
            }
        }
        for c in 0..d {
            let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn constant_target_fit() {
        let m = train_linear(&ds(vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]), &cfg(500), None).unwrap();
        assert!(m.weights[0].abs() < 1e-9 && (m.bias - 1.0).abs() < 1e-9, "{m:?}");
    }

    #[test]
    fn recovers_exact_line() {
        let data = ds(vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]], vec![0.0, 2.0, 4.0, 6.0]);
        let oracle = normal_equations(&data.rows, &data.targets);
        assert!((oracle[0] - 2.0).abs() < 1e-12 && oracle[1].abs() < 1e-12);
        let m = train_linear(&data, &cfg(2000), None).unwrap();
        assert!((m.weights[0] - oracle[0]).abs() < 1e-6 && (m.bias - oracle[1]).abs() < 1e-6);
        let rmse = (data.rows.iter().zip(&data.targets).map(|(r, y)| (m.predict(r).unwrap() - y).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(rmse < 1e-3);
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let data = ds(vec![vec![0.0, 1.0], vec![1.0, 0.5], vec![2.0, 3.0], vec![3.0, -1.0]], vec![1.0, 2.0, 0.5, 4.0]);
        let opt = normal_equations(&data.rows, &data.targets);
        let init = LinearModel::new(opt[..2].to_vec(), opt[2], SchemaHash(1), Task::Regression);
        let m = train_linear(&data, &cfg(1), Some(&init)).unwrap();
        for (a, b) in m.weights.iter().chain([&m.bias]).zip(init.weights.iter().chain([&init.bias])) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn init_schema_must_match() {
        let data = ds(vec![vec![0.0]], vec![1.0]);
        let init = LinearModel::zeros(1, SchemaHash(2), Task::Regression);
        assert!(matches!(train_linear(&data, &cfg(1), Some(&init)), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = TrainingDataset::new(SchemaHash(1), CancerType::Breast, "overall_qol", vec![], vec![]).unwrap();
        assert_eq!(train_linear(&data, &cfg(1), None), Err(Error::EmptyDataset));
    }

    #[test]
    fn divergence_detected_and_backoff_recovers() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] + r[1]).collect();
        let data = ds(rows, y);
        let hot = TrainingConfig { learning_rate: 50.0, epochs: 2000, ..Default::default() };
        assert!(matches!(train_linear(&data, &hot, None), Err(Error::Divergence(_))));
        let warm = TrainingConfig { learning_rate: 4.0, epochs: 2000, ..Default::default() };
        assert!(train_linear_with_backoff(&data, &warm, None).is_ok());
    }

    #[test]
    fn logistic_classifier_separates() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        let c = TrainingConfig { task: Task::Classification, epochs: 500, learning_rate: 0.5, ..Default::default() };
        let m = train_linear(&ds(rows, y), &c, None).unwrap();
        assert!(m.predict(&[2.0]).unwrap() < 0.5 && m.predict(&[17.0]).unwrap() > 0.5);
        let zero = LinearModel::zeros(3, SchemaHash(1), Task::Classification);
        assert_eq!(zero.predict(&[1.0, -4.0, 9.0]).unwrap(), 0.5);
    }

    #[test]
    fn predict_arithmetic_and_arity() {
        let m = LinearModel::new(vec![2.0, 0.0], 1.0, SchemaHash(1), Task::Regression);
        assert_eq!(m.predict(&[3.0, 9.0]).unwrap(), 7.0);
        assert!(matches!(m.predict(&[3.0]), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn averaging_examples() {
        let a = LinearModel::new(vec![1.0, 3.0], 0.0, SchemaHash(1), Task::Regression);
        let b = LinearModel::new(vec![3.0, 5.0], 2.0, SchemaHash(1), Task::Regression);
        let avg = average_models(&[a.clone(), b.clone()], Some(&[1, 1])).unwrap();
        assert_eq!(avg.weights, vec![2.0, 4.0]);
        assert_eq!(avg.bias, 1.0);
        assert_eq!(avg.trained_on_n, 2);

        let c = LinearModel::new(vec![0.0], 0.0, SchemaHash(1), Task::Regression);
        let d = LinearModel::new(vec![0.0], 4.0, SchemaHash(1), Task::Regression);
        assert_eq!(average_models(&[c, d], Some(&[1, 3])).unwrap().bias, 3.0);

        let other = LinearModel::new(vec![0.0, 0.0], 0.0, SchemaHash(9), Task::Regression);
        assert!(matches!(average_models(&[a, other], None), Err(Error::SchemaMismatch(_))));
        assert!(average_models(&[], None).is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        -100.0..100.0f64
    }

    proptest! {
        #[test]
        fn averaging_is_idempotent(w in prop::collection::vec(finite(), 3), b in finite(), k in 1usize..6, n in 1u64..50) {
            let mut m = LinearModel::new(w, b, SchemaHash(1), Task::Regression);
            m.trained_on_n = n;
            let copies = vec![m.clone(); k];
            let avg = average_models(&copies, None).unwrap();
            prop_assert_eq!(&avg.weights, &m.weights);
            prop_assert_eq!(avg.bias, m.bias);
        }

        #[test]
        fn averaging_is_permutation_invariant(
            params in prop::collection::vec((prop::collection::vec(finite(), 2), finite(), 1u64..20), 1..6),
            seed in any::<u64>(),
        ) {
            let models: Vec<LinearModel> = params.iter().map(|(w, b, n)| {
                let mut m = LinearModel::new(w.clone(), *b, SchemaHash(1), Task::Regression);
                m.trained_on_n = *n;
                m
            }).collect();
            let mut perm: Vec<usize> = (0..models.len()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled: Vec<LinearModel> = perm.iter().map(|&i| models[i].clone()).collect();
            prop_assert_eq!(average_models(&models, None).unwrap(), average_models(&shuffled, None).unwrap());
        }

        #[test]
        fn analytic_gradient_matches_finite_differences(
            rows in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2), 3..8),
            ys in prop::collection::vec(-5.0..5.0f64, 8),
            w0 in prop::collection::vec(-1.0..1.0f64, 2),
            b0 in -1.0..1.0f64,
            lambda in 0.0..0.5f64,
        ) {
            // One GD step from (w0, b0) in standardized space reveals the
            // gradient: g = (θ0 - θ1) / lr.
            let n = rows.len();
            let data = ds(rows.clone(), ys[..n].to_vec());
            let stats = FeatureStats::of(&rows);
            let scales = stats.scales();
            let xs: Vec<Vec<f64>> = rows.iter().map(|r| (0..2).map(|j| (r[j] - stats.means[j]) / scales[j]).collect()).collect();
            let loss = |w: &[f64], b: f64| -> f64 {
                let sse: f64 = xs.iter().zip(&data.targets).map(|(x, y)| (x[0] * w[0] + x[1] * w[1] + b - y).powi(2)).sum();
                sse / (2.0 * n as f64) + lambda / 2.0 * (w[0] * w[0] + w[1] * w[1])
            };
            let raw_w: Vec<f64> = (0..2).map(|j| w0[j] / scales[j]).collect();
            let raw_b = b0 - (0..2).map(|j| w0[j] * stats.means[j] / scales[j]).sum::<f64>();
            let init = LinearModel::new(raw_w, raw_b, SchemaHash(1), Task::Regression);
            let lr = 1e-3;
            let c = TrainingConfig { learning_rate: lr, epochs: 1, ridge_lambda: lambda, ..Default::default() };
            let m = train_linear(&data, &c, Some(&init)).unwrap();
            let w1: Vec<f64> = (0..2).map(|j| m.weights[j] * scales[j]).collect();
            let b1 = m.bias + (0..2).map(|j| m.weights[j] * stats.means[j]).sum::<f64>();
            let h = 1e-6;
            for j in 0..2 {
                let mut wp = w0.clone();
                let mut wm = w0.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (loss(&wp, b0) - loss(&wm, b0)) / (2.0 * h);
                let analytic = (w0[j] - w1[j]) / lr;
                prop_assert!((fd - analytic).abs() <= 1e-5 * fd.abs().max(1.0), "w{}: fd {} analytic {}", j, fd, analytic);
            }
            let fd_b = (loss(&w0, b0 + h) - loss(&w0, b0 - h)) / (2.0 * h);
            let analytic_b = (b0 - b1) / lr;
            prop_assert!((fd_b - analytic_b).abs() <= 1e-5 * fd_b.abs().max(1.0));
        }

        #[test]
        fn converges_to_normal_equations(
            rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 12..30),
            true_w in prop::collection::vec(-2.0..2.0f64, 3),
            noise in prop::collection::vec(-0.5..0.5f64, 30),
        ) {
            let y: Vec<f64> = rows.iter().enumerate().map(|(i, r)| r.iter().zip(&true_w).map(|(a, b)| a * b).sum::<f64>() + 1.0 + noise[i]).collect();
            let data = ds(rows.clone(), y.clone());
            let stats = FeatureStats::of(&rows);
            // Skip near-singular designs; GD conditioning is not what is under test.
            let mut a = [[0.0f64; 3]; 3];
            for r in &rows {
                for i in 0..3 { for j in 0..3 {
                    a[i][j] += (r[i] - stats.means[i]) * (r[j] - stats.means[j]) / (stats.stds[i] * stats.stds[j] * rows.len() as f64);
                }}
            }
            let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
            prop_assume!(det > 0.05);
            let oracle = normal_equations(&rows, &y);
            let m = train_linear(&data, &TrainingConfig { epochs: 5000, learning_rate: 0.3, ..Default::default() }, None).unwrap();
            let rmse = |p: &dyn Fn(&[f64]) -> f64| (rows.iter().zip(&y).map(|(r, t)| (p(r) - t).powi(2)).sum::<f64>() / rows.len() as f64).sqrt();
            let oracle_rmse = rmse(&|r| r.iter().zip(&oracle).map(|(a, b)| a * b).sum::<f64>() + oracle[3]);
            let gd_rmse = rmse(&|r| m.predict_unchecked(r));
            let pred_gap = (rows.iter().map(|r| {
                let o = r.iter().zip(&oracle).map(|(a, b)| a * b).sum::<f64>() + oracle[3];
                (m.predict_unchecked(r) - o).powi(2)
            }).sum::<f64>() / rows.len() as f64).sqrt();
            prop_assert!(pred_gap < 1e-3, "prediction RMSE gap {} (oracle rmse {}, gd {})", pred_gap, oracle_rmse, gd_rmse);
        }

        #[test]
        fn training_is_deterministic(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 2..10), y in prop::collection::vec(-5.0..5.0f64, 10)) {
            let data = ds(rows.clone(), y[..rows.len()].to_vec());
            let a = train_linear(&data, &cfg(50), None).unwrap();
            let b = train_linear(&data, &cfg(50), None).unwrap();
            prop_assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        }

        #[test]
        fn stats_merge_matches_pooled(a in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 2), 1..20), b in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 2), 1..20)) {
            let merged = FeatureStats::of(&a).merge(&FeatureStats::of(&b));
            let pooled: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
            let direct = FeatureStats::of(&pooled);
            for j in 0..2 {
                prop_assert!((merged.means[j] - direct.means[j]).abs() < 1e-9);
                prop_assert!((merged.stds[j] - direct.stds[j]).abs() < 1e-9);
            }
        }
    }
}
