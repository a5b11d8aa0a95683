//! MORE (Matrix Operation for Randomization or Encryption) symmetric
//! homomorphic encryption over 2×2 real matrices.
//!
//! A scalar `x` is encrypted as `C = K · diag(x, r) · K⁻¹` with a fresh random
//! `r ∈ [1, 2)`. Conjugation is a ring isomorphism, so matrix sum, product
//! and scalar multiple of ciphertexts decrypt to the sum, product and
//! multiple of the plaintexts. Adding a plaintext constant `c` is `C + c·I`.
//!
//! This is a faithful protocol implementation, not a hardened cryptosystem:
//! a handful of known plaintext/ciphertext pairs reveal the key.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CancerType, SchemaHash, Task, TrainingDataset};
use crate::error::{Error, Result};
use crate::ml::{FeatureStats, LinearModel, TrainingConfig};

/// Row-major 2×2 matrix `[a, b, c, d]` = `[[a, b], [c, d]]`.
pub type Mat2 = [f64; 4];

pub const IDENTITY: Mat2 = [1.0, 0.0, 0.0, 1.0];

pub fn mat_mul(x: &Mat2, y: &Mat2) -> Mat2 {
    [x[0] * y[0] + x[1] * y[2], x[0] * y[1] + x[1] * y[3], x[2] * y[0] + x[3] * y[2], x[2] * y[1] + x[3] * y[3]]
}

pub fn det(m: &Mat2) -> f64 {
    m[0] * m[3] - m[1] * m[2]
}

pub fn inverse(m: &Mat2) -> Option<Mat2> {
    let d = det(m);
    (d != 0.0 && d.is_finite()).then(|| [m[3] / d, -m[1] / d, -m[2] / d, m[0] / d])
}

/// 2-norm condition number `σ_max / σ_min`.
pub fn condition_number(m: &Mat2) -> f64 {
    // Singular values of a 2×2 matrix from the Frobenius norm and determinant.
    let fro2 = m.iter().map(|v| v * v).sum::<f64>();
    let d = det(m).abs();
    let disc = (fro2 * fro2 - 4.0 * d * d).max(0.0).sqrt();
    let s_max = ((fro2 + disc) / 2.0).sqrt();
    let s_min = if s_max == 0.0 { 0.0 } else { d / s_max };
    if s_min == 0.0 {
        f64::INFINITY
    } else {
        s_max / s_min
    }
}

pub const MAX_CONDITION: f64 = 100.0;
pub const KEYGEN_MAX_ATTEMPTS: usize = 1000;

/// Symmetric MORE key. The same key is provisioned to every edge out of
/// band; it never crosses the edge↔cloud protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoreKey {
    pub k: Mat2,
    pub k_inv: Mat2,
    pub seed: u64,
}

impl MoreKey {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let key: MoreKey = serde_json::from_slice(bytes)?;
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<()> {
        let p = mat_mul(&self.k, &self.k_inv);
        let err = p.iter().zip(IDENTITY).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err >= 1e-12 {
            return Err(Error::Validation(format!("key inverse residual {err:e}")));
        }
        if condition_number(&self.k) > MAX_CONDITION {
            return Err(Error::Validation("key condition number exceeds bound".into()));
        }
        Ok(())
    }
}

/// Deterministic key from `seed`: entries uniform in `[-1, 1]`, rejected
/// until invertible with condition number at most [`MAX_CONDITION`].
pub fn keygen(seed: u64) -> Result<MoreKey> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..KEYGEN_MAX_ATTEMPTS {
        let k: Mat2 = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        if condition_number(&k) > MAX_CONDITION {
            continue;
        }
        let Some(k_inv) = inverse(&k) else { continue };
        let key = MoreKey { k, k_inv, seed };
        if key.validate().is_ok() {
            return Ok(key);
        }
    }
    Err(Error::Keygen(KEYGEN_MAX_ATTEMPTS))
}

/// Encrypted scalar. Wire form: JSON array of four doubles, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ciphertext(pub Mat2);

impl Ciphertext {
    pub const ZERO: Ciphertext = Ciphertext([0.0; 4]);

    /// The public encoding of a constant, `c·I`. Decrypts to `c` under any key.
    pub fn constant(c: f64) -> Self {
        Ciphertext([c, 0.0, 0.0, c])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Ciphertext {
    type Output = Ciphertext;
    fn add(self, o: Ciphertext) -> Ciphertext {
        Ciphertext(std::array::from_fn(|i| self.0[i] + o.0[i]))
    }
}

impl Sub for Ciphertext {
    type Output = Ciphertext;
    fn sub(self, o: Ciphertext) -> Ciphertext {
        Ciphertext(std::array::from_fn(|i| self.0[i] - o.0[i]))
    }
}

impl Neg for Ciphertext {
    type Output = Ciphertext;
    fn neg(self) -> Ciphertext {
        Ciphertext(self.0.map(|v| -v))
    }
}

impl Mul for Ciphertext {
    type Output = Ciphertext;
    fn mul(self, o: Ciphertext) -> Ciphertext {
        Ciphertext(mat_mul(&self.0, &o.0))
    }
}

impl Mul<f64> for Ciphertext {
    type Output = Ciphertext;
    fn mul(self, s: f64) -> Ciphertext {
        Ciphertext(self.0.map(|v| v * s))
    }
}

pub fn he_add(a: Ciphertext, b: Ciphertext) -> Ciphertext {
    a + b
}

pub fn he_mul(a: Ciphertext, b: Ciphertext) -> Ciphertext {
    a * b
}

pub fn he_scale(c: Ciphertext, s: f64) -> Ciphertext {
    c * s
}

/// Adds a plaintext constant: `C + s·I`.
pub fn he_add_plain(c: Ciphertext, s: f64) -> Ciphertext {
    let mut m = c.0;
    m[0] += s;
    m[3] += s;
    Ciphertext(m)
}

pub fn encrypt<R: Rng + ?Sized>(key: &MoreKey, x: f64, rng: &mut R) -> Result<Ciphertext> {
    if !x.is_finite() {
        return Err(Error::Validation(format!("cannot encrypt non-finite value {x}")));
    }
    let r: f64 = rng.random_range(1.0..2.0);
    let k = &key.k;
    let scaled = [k[0] * x, k[1] * r, k[2] * x, k[3] * r];
    Ok(Ciphertext(mat_mul(&scaled, &key.k_inv)))
}

pub fn decrypt(key: &MoreKey, c: &Ciphertext) -> f64 {
    let d = mat_mul(&mat_mul(&key.k_inv, &c.0), &key.k);
    d[0]
}

/// Encrypted training data. Identification metadata and per-feature
/// standardization statistics travel in plaintext.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptedDataset {
    pub cancer_type: CancerType,
    pub target_variable: String,
    pub schema_hash: SchemaHash,
    pub rows: Vec<Vec<Ciphertext>>,
    pub targets: Vec<Ciphertext>,
    pub n: usize,
    pub feature_stats: FeatureStats,
}

impl EncryptedDataset {
    pub fn arity(&self) -> usize {
        self.feature_stats.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != self.n || self.targets.len() != self.n || self.feature_stats.n != self.n as u64 {
            return Err(Error::Validation("encrypted dataset shape mismatch".into()));
        }
        let d = self.arity();
        if self.feature_stats.stds.len() != d || self.rows.iter().any(|r| r.len() != d) {
            return Err(Error::Validation("encrypted dataset arity mismatch".into()));
        }
        if !self.rows.iter().flatten().chain(&self.targets).all(Ciphertext::is_finite) {
            return Err(Error::Validation("encrypted dataset has non-finite cells".into()));
        }
        Ok(())
    }

    pub fn same_kind(&self, other: &Self) -> bool {
        self.cancer_type == other.cancer_type
            && self.target_variable == other.target_variable
            && self.schema_hash == other.schema_hash
            && self.arity() == other.arity()
    }
}

pub fn encrypt_dataset<R: Rng + ?Sized>(key: &MoreKey, dataset: &TrainingDataset, rng: &mut R) -> Result<EncryptedDataset> {
    dataset.validate()?;
    let rows =
        dataset.rows.iter().map(|r| r.iter().map(|&v| encrypt(key, v, rng)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    let targets = dataset.targets.iter().map(|&y| encrypt(key, y, rng)).collect::<Result<Vec<_>>>()?;
    let mut feature_stats = FeatureStats::of(&dataset.rows);
    if dataset.is_empty() {
        feature_stats = FeatureStats { n: 0, means: Vec::new(), stds: Vec::new() };
    }
    Ok(EncryptedDataset {
        cancer_type: dataset.cancer_type,
        target_variable: dataset.target_variable.clone(),
        schema_hash: dataset.schema_hash,
        rows,
        targets,
        n: dataset.n,
        feature_stats,
    })
}

pub fn decrypt_dataset(key: &MoreKey, enc: &EncryptedDataset) -> TrainingDataset {
    TrainingDataset {
        schema_hash: enc.schema_hash,
        cancer_type: enc.cancer_type,
        target_variable: enc.target_variable.clone(),
        rows: enc.rows.iter().map(|r| r.iter().map(|c| decrypt(key, c)).collect()).collect(),
        targets: enc.targets.iter().map(|c| decrypt(key, c)).collect(),
        n: enc.n,
    }
}

/// Row concatenation of two encrypted datasets of the same kind. An empty
/// operand is the identity regardless of its arity.
pub fn merge_encrypted_datasets(a: &EncryptedDataset, b: &EncryptedDataset) -> Result<EncryptedDataset> {
    let meta_eq = a.cancer_type == b.cancer_type && a.target_variable == b.target_variable && a.schema_hash == b.schema_hash;
    if !meta_eq {
        return Err(Error::Merge(format!(
            "cannot merge ({}, {}, {}) with ({}, {}, {})",
            a.cancer_type, a.target_variable, a.schema_hash, b.cancer_type, b.target_variable, b.schema_hash
        )));
    }
    if b.n == 0 {
        return Ok(a.clone());
    }
    if a.n == 0 {
        return Ok(b.clone());
    }
    if a.arity() != b.arity() {
        return Err(Error::Merge(format!("arity {} vs {}", a.arity(), b.arity())));
    }
    let mut out = a.clone();
    out.rows.extend(b.rows.iter().cloned());
    out.targets.extend(b.targets.iter().copied());
    out.n += b.n;
    out.feature_stats = a.feature_stats.merge(&b.feature_stats);
    Ok(out)
}

/// Globally trained model whose parameters are ciphertexts. Parameters are
/// in raw feature space, like [`LinearModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncryptedLinearModel {
    pub schema_hash: SchemaHash,
    pub weights: Vec<Ciphertext>,
    pub bias: Ciphertext,
    pub feature_stats: FeatureStats,
    pub trained_on_n: u64,
}

impl EncryptedLinearModel {
    pub fn arity(&self) -> usize {
        self.weights.len()
    }
}

pub fn decrypt_model(key: &MoreKey, m: &EncryptedLinearModel) -> LinearModel {
    LinearModel {
        task: Task::Regression,
        schema_hash: m.schema_hash,
        weights: m.weights.iter().map(|c| decrypt(key, c)).collect(),
        bias: decrypt(key, &m.bias),
        feature_means: m.feature_stats.means.clone(),
        feature_stds: m.feature_stats.stds.clone(),
        trained_on_n: m.trained_on_n,
    }
}

/// Encrypts a plaintext linear model, e.g. to build test fixtures.
pub fn encrypt_model<R: Rng + ?Sized>(key: &MoreKey, m: &LinearModel, rng: &mut R) -> Result<EncryptedLinearModel> {
    Ok(EncryptedLinearModel {
        schema_hash: m.schema_hash,
        weights: m.weights.iter().map(|&w| encrypt(key, w, rng)).collect::<Result<_>>()?,
        bias: encrypt(key, m.bias, rng)?,
        feature_stats: FeatureStats { n: m.trained_on_n, means: m.feature_means.clone(), stds: m.feature_stds.clone() },
        trained_on_n: m.trained_on_n,
    })
}

/// Largest learning rate for which the randomization slot of encrypted
/// gradient descent is guaranteed not to blow up.
///
/// The hidden slot runs the same recurrence on features `(r - mean)/scale`
/// with `r ∈ [1, 2)`. Its curvature is bounded by the trace of its Gram
/// matrix plus the ridge term; plain GD is stable below `2 / curvature`, and
/// this returns half of that.
pub fn randomization_safe_learning_rate(stats: &FeatureStats, ridge_lambda: f64) -> f64 {
    let scales = stats.scales();
    let trace: f64 =
        stats.means.iter().zip(&scales).map(|(m, s)| ((1.0 - m).powi(2).max((2.0 - m).powi(2))) / (s * s) + ridge_lambda).sum::<f64>()
            + 1.0;
    1.0 / trace
}

/// The regression recurrence of [`crate::ml::train_linear`] with every scalar
/// operation replaced by its homomorphic counterpart. Plaintext constants
/// (standardization, learning rate, `1/n`, λ) enter through
/// [`he_add_plain`] and [`he_scale`].
pub fn train_encrypted_linear(enc: &EncryptedDataset, config: &TrainingConfig) -> Result<EncryptedLinearModel> {
    config.validate()?;
    if config.task != Task::Regression {
        return Err(Error::FeatureDisabled("encrypted training supports regression only".into()));
    }
    if enc.n == 0 {
        return Err(Error::EmptyDataset);
    }
    enc.validate()?;
    let d = enc.arity();
    let stats = &enc.feature_stats;
    let scales = stats.scales();
    let inv_scales: Vec<f64> = scales.iter().map(|s| 1.0 / s).collect();
    let xs: Vec<Vec<Ciphertext>> =
        enc.rows.iter().map(|r| (0..d).map(|j| he_scale(he_add_plain(r[j], -stats.means[j]), inv_scales[j])).collect()).collect();

    let mut w = vec![Ciphertext::ZERO; d];
    let mut b = Ciphertext::ZERO;
    let inv_n = 1.0 / enc.n as f64;
    let lr = config.learning_rate;
    let lambda = config.ridge_lambda;
    let mut residuals = vec![Ciphertext::ZERO; enc.n];
    for _ in 0..config.epochs {
        for (i, x) in xs.iter().enumerate() {
            let z = x.iter().zip(&w).fold(Ciphertext::ZERO, |acc, (a, wj)| acc + *a * *wj) + b;
            residuals[i] = z - enc.targets[i];
        }
        let grad_b = residuals.iter().fold(Ciphertext::ZERO, |acc, r| acc + *r) * inv_n;
        for j in 0..d {
            let g = xs.iter().zip(&residuals).fold(Ciphertext::ZERO, |acc, (x, r)| acc + *r * x[j]) * inv_n + w[j] * lambda;
            w[j] = w[j] - g * lr;
        }
        b = b - grad_b * lr;
    }

    let weights: Vec<Ciphertext> = (0..d).map(|j| w[j] * inv_scales[j]).collect();
    let shift = (0..d).fold(Ciphertext::ZERO, |acc, j| acc + w[j] * (stats.means[j] * inv_scales[j]));
    let model = EncryptedLinearModel {
        schema_hash: enc.schema_hash,
        weights,
        bias: b - shift,
        feature_stats: stats.clone(),
        trained_on_n: enc.n as u64,
    };
    if !model.weights.iter().chain([&model.bias]).all(Ciphertext::is_finite) {
        return Err(Error::Divergence("encrypted parameters became non-finite".into()));
    }
    Ok(model)
}

/// Homomorphic `w·x + b`.
pub fn predict_encrypted(model: &EncryptedLinearModel, features: &[Ciphertext]) -> Result<Ciphertext> {
    crate::ml::check_arity(model.arity(), features.len())?;
    Ok(model.weights.iter().zip(features).fold(model.bias, |acc, (w, x)| acc + *w * *x))
}

pub fn encrypt_vector<R: Rng + ?Sized>(key: &MoreKey, xs: &[f64], rng: &mut R) -> Result<Vec<Ciphertext>> {
    xs.iter().map(|&x| encrypt(key, x, rng)).collect()
}
