//! Gaussian predictive over auxiliary-head logits built from the empirical
//! feature covariance, its Monte-Carlo softmax average, and entropy-based
//! instance weights.
//!
//! For features `φ` at the early exit and a trained head `(W, b)`, the logits
//! are modelled as
//!
//! ```text
//! z ~ N(W·φ + b, (φᵀ (Σ_φ + εI) φ) · I_C)
//! ```
//!
//! where `Σ_φ` is the mean-centred sample covariance (denominator `N − 1`) of the
//! training features and `ε` a ridge. The variance is isotropic over classes.
//! Note this uses the feature covariance, not an inverse Hessian/GGN as a
//! textbook last-layer Laplace would.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::AuxHead;
use crate::numerics::{cholesky, entropy, softmax, Matrix, RngStream, Vector};

/// Relative ridge factor applied to the mean covariance diagonal.
pub const DEFAULT_RIDGE_FACTOR: f64 = 1e-3;
/// Lower bound on the ridge.
pub const RIDGE_FLOOR: f64 = 1e-8;

/// How the ridge `ε` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    /// `ε = max(factor · mean(diag Σ_φ), 1e-8)`
    Relative(f64),
    /// Fixed `ε`.
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(DEFAULT_RIDGE_FACTOR)
    }
}

impl Ridge {
    pub fn resolve(self, sigma: &Matrix) -> f64 {
        match self {
            Ridge::Absolute(eps) => eps,
            Ridge::Relative(factor) => {
                let diag = sigma.diagonal();
                let mean = if diag.is_empty() {
                    0.0
                } else {
                    diag.iter().sum::<f64>() / diag.len() as f64
                };
                (factor * mean).max(RIDGE_FLOOR)
            }
        }
    }
}

/// Mean-centred sample covariance with denominator `N − 1`. The upper triangle
/// is computed and mirrored, so the result is exactly symmetric.
pub fn feature_covariance(features: &Matrix) -> Result<Matrix> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let d = features.cols();
    // Mean taken relative to the first row: identical rows give exactly zero
    // deviations, hence an exactly zero covariance.
    let origin = features.row(0);
    let mut shift = vec![0.0; d];
    for row in features.iter_rows() {
        for ((s, &x), &o) in shift.iter_mut().zip(row).zip(origin) {
            *s += x - o;
        }
    }
    let mean: Vec<f64> = shift
        .iter()
        .zip(origin)
        .map(|(s, &o)| o + s / n as f64)
        .collect();
    let mut sigma = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for row in features.iter_rows() {
        for ((c, &x), &m) in centred.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                sigma[(i, j)] += ci * centred[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma[(i, j)] / denom;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(sigma)
}

/// Trained auxiliary head plus the regularized feature covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    head: AuxHead,
    sigma_phi: Matrix,
    ridge: f64,
    regularized: Matrix,
    chol: Matrix,
}

impl LaplacePosterior {
    /// Builds the posterior from the full feature matrix the head was trained on.
    pub fn fit(head: AuxHead, features: &Matrix, ridge: Ridge) -> Result<Self> {
        if features.cols() != head.feature_dim() {
            return Err(Error::DimMismatch {
                expected: head.feature_dim(),
                actual: features.cols(),
                context: "posterior features",
            });
        }
        let sigma = feature_covariance(features)?;
        let eps = ridge.resolve(&sigma);
        Self::from_parts(head, sigma, eps)
    }

    /// Assembles a posterior from an explicit (unregularized) covariance.
    pub fn from_parts(head: AuxHead, sigma_phi: Matrix, ridge: f64) -> Result<Self> {
        if sigma_phi.rows() != head.feature_dim() || !sigma_phi.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "covariance is {}x{}, head expects {} features",
                sigma_phi.rows(),
                sigma_phi.cols(),
                head.feature_dim()
            )));
        }
        let mut regularized = sigma_phi.clone();
        regularized.add_diagonal(ridge);
        let chol = cholesky(&regularized)?;
        Ok(Self {
            head,
            sigma_phi,
            ridge,
            regularized,
            chol,
        })
    }

    pub fn head(&self) -> &AuxHead {
        &self.head
    }

    pub fn sigma_phi(&self) -> &Matrix {
        &self.sigma_phi
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `Σ_φ + εI`
    pub fn regularized(&self) -> &Matrix {
        &self.regularized
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    pub fn predictive(&self, phi: &[f64]) -> Result<LogitPredictive> {
        laplace_predictive(self, phi)
    }

    pub fn dump(&self) -> PosteriorDump {
        let d = self.sigma_phi.rows();
        let eig = nalgebra::DMatrix::from_row_slice(d, d, self.regularized.as_slice())
            .symmetric_eigen()
            .eigenvalues;
        let mut values: Vec<f64> = eig.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        let min = values.first().copied().unwrap_or(0.0);
        let max = values.last().copied().unwrap_or(0.0);
        PosteriorDump {
            head: self.head.clone(),
            sigma_phi: self.sigma_phi.clone(),
            ridge: self.ridge,
            eigenvalues: EigenSummary {
                min,
                max,
                mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
                condition_number: if min > 0.0 { max / min } else { f64::INFINITY },
                values,
            },
        }
    }
}

/// Diagnostics document for a fitted posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDump {
    pub head: AuxHead,
    pub sigma_phi: Matrix,
    pub ridge: f64,
    pub eigenvalues: EigenSummary,
}

/// Eigenvalues of `Σ_φ + εI`, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub condition_number: f64,
    pub values: Vec<f64>,
}

/// Gaussian over logits with isotropic variance `sigma2 · I_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPredictive {
    pub mu: Vector,
    pub sigma2: f64,
}

pub fn laplace_predictive(post: &LaplacePosterior, phi: &[f64]) -> Result<LogitPredictive> {
    let mu = post.head.forward(phi)?;
    // Rounding can push an exact zero slightly negative.
    let sigma2 = post.regularized.quadratic_form(phi)?.max(0.0);
    Ok(LogitPredictive { mu, sigma2 })
}

/// `(1/S) Σ_s softmax(mu + sqrt(sigma2)·ε_s, temp)` with `ε_s ~ N(0, I_C)`.
/// A zero variance short-circuits to `softmax(mu, temp)`.
pub fn mc_predictive_softmax(
    pred: &LogitPredictive,
    samples: usize,
    temp: f64,
    rng: &mut RngStream,
) -> Vector {
    if pred.sigma2 == 0.0 || samples == 0 {
        return softmax(&pred.mu, temp);
    }
    let std = pred.sigma2.sqrt();
    let c = pred.mu.len();
    let mut acc = vec![0.0; c];
    let mut z = vec![0.0; c];
    for _ in 0..samples {
        for (zi, &m) in z.iter_mut().zip(&pred.mu) {
            *zi = m + std * rng.standard_normal();
        }
        for (a, p) in acc.iter_mut().zip(softmax(&z, temp)) {
            *a += p;
        }
    }
    let inv = 1.0 / samples as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Entropy (nats) of the Monte-Carlo averaged softmax.
pub fn predictive_entropy(
    pred: &LogitPredictive,
    samples: usize,
    temp: f64,
    rng: &mut RngStream,
) -> f64 {
    let p = mc_predictive_softmax(pred, samples, temp, rng);
    entropy(&p).expect("averaged softmax is a valid distribution")
}

/// `exp(beta · H^alpha)` without clamping.
pub fn entropy_weight_unclamped(h: f64, beta: f64, alpha: f64) -> Result<f64> {
    if !(h >= 0.0) || !h.is_finite() {
        return Err(Error::InvalidHyperparameter(format!("entropy {h} must be >= 0")));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidHyperparameter(format!("beta {beta} must be >= 0")));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidHyperparameter(format!("alpha {alpha} must be > 0")));
    }
    Ok((beta * h.powf(alpha)).exp())
}

/// `exp(beta · H^alpha)` clamped to `[1, cap]`.
pub fn entropy_weight(h: f64, beta: f64, alpha: f64, cap: f64) -> Result<f64> {
    if !(cap >= 1.0) {
        return Err(Error::InvalidHyperparameter(format!("weight cap {cap} must be >= 1")));
    }
    Ok(entropy_weight_unclamped(h, beta, alpha)?.clamp(1.0, cap))
}

/// Positive per-exit weights (e.g. cumulative FLOPs up to each exit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitEnsembleWeights(Vec<f64>);

impl ExitEnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "ensemble weight {w} must be positive"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Weighted average of per-exit distributions, normalized by the total weight.
pub fn ensemble_predict(probs: &[Vector], weights: &ExitEnsembleWeights) -> Result<Vector> {
    if probs.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if probs.len() != weights.0.len() {
        return Err(Error::DimMismatch {
            expected: weights.0.len(),
            actual: probs.len(),
            context: "ensemble members",
        });
    }
    let c = probs[0].len();
    for p in probs {
        if p.len() != c {
            return Err(Error::DimMismatch {
                expected: c,
                actual: p.len(),
                context: "ensemble class count",
            });
        }
        crate::numerics::validate_distribution(p, 1e-9)?;
    }
    let total: f64 = weights.0.iter().sum();
    let mut out = vec![0.0; c];
    for (p, &w) in probs.iter().zip(&weights.0) {
        let share = w / total;
        for (o, &v) in out.iter_mut().zip(p) {
            *o += share * v;
        }
    }
    Ok(out)
}

/// Predictive entropy for every row of `features`. Example `i` draws from
/// `root.derive_index(i)`, so the result does not depend on `threads`.
pub fn batch_predictive_entropy(
    post: &LaplacePosterior,
    features: &Matrix,
    samples: usize,
    temp: f64,
    root: &RngStream,
    threads: usize,
) -> Result<Vec<f64>> {
    let one = |i: usize| -> Result<f64> {
        let pred = post.predictive(features.row(i))?;
        let mut rng = root.derive_index(i as u64);
        Ok(predictive_entropy(&pred, samples, temp, &mut rng))
    };
    if threads <= 1 {
        return (0..features.rows()).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ConfigMismatch(format!("thread pool: {e}")))?;
    pool.install(|| (0..features.rows()).into_par_iter().map(one).collect())
}

/// Monte-Carlo reference for [`mc_predictive_softmax`] with 10^7 draws.
///
/// Deliberately shares no sampling code with the production path: it uses
/// its own ChaCha20 streams, Box–Muller normals and an inline softmax. Returns
/// the estimate and its per-coordinate standard error. Intended for tests.
pub fn oracle_mc_softmax(pred: &LogitPredictive, temp: f64) -> (Vector, Vector) {
    oracle_mc_softmax_with(pred, temp, 10_000_000)
}

pub fn oracle_mc_softmax_with(pred: &LogitPredictive, temp: f64, draws: usize) -> (Vector, Vector) {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const ORACLE_SEED: u64 = 0x0dd5_eed0_0000_0001;
    const CHUNKS: usize = 100;

    let c = pred.mu.len();
    if pred.sigma2 == 0.0 {
        let max = pred.mu.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temp));
        let e: Vec<f64> = pred.mu.iter().map(|&v| (v / temp - max).exp()).collect();
        let s: f64 = e.iter().sum();
        return (e.iter().map(|v| v / s).collect(), vec![0.0; c]);
    }
    let std = pred.sigma2.sqrt();
    let per_chunk = draws.div_ceil(CHUNKS);
    let (sum, sum_sq) = (0..CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha20Rng::seed_from_u64(ORACLE_SEED.wrapping_add(chunk as u64));
            let mut s = vec![0.0; c];
            let mut s2 = vec![0.0; c];
            let mut z = vec![0.0; c];
            let mut spare: Option<f64> = None;
            for _ in 0..per_chunk {
                for (k, zk) in z.iter_mut().enumerate() {
                    let eps = match spare.take() {
                        Some(v) => v,
                        None => {
                            let u1: f64 = 1.0 - rng.random::<f64>();
                            let u2: f64 = rng.random::<f64>();
                            let r = (-2.0 * u1.ln()).sqrt();
                            let theta = std::f64::consts::TAU * u2;
                            spare = Some(r * theta.sin());
                            r * theta.cos()
                        }
                    };
                    *zk = (pred.mu[k] + std * eps) / temp;
                }
                let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
                for k in 0..c {
                    let p = (z[k] - max).exp() / denom;
                    s[k] += p;
                    s2[k] += p * p;
                }
            }
            (s, s2)
        })
        .reduce(
            || (vec![0.0; c], vec![0.0; c]),
            |(mut a, mut a2), (b, b2)| {
                for k in 0..c {
                    a[k] += b[k];
                    a2[k] += b2[k];
                }
                (a, a2)
            },
        );
    let n = (per_chunk * CHUNKS) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(s2, m)| ((s2 / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}
