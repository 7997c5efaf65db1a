//! Effective rank of feature correlation matrices and the linear
//! encoder/predictor setting with Gaussian-noise views.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SYMMETRY_TOL: f64 = 1e-10;
const NEGATIVE_TOL: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest count as exact zeros.
const ZERO_REL: f64 = 1e-12;
/// Size of the fixed evaluation batch used to estimate correlations.
pub const EVAL_BATCH: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ErankError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("predictor did not converge: gradient residual {residual:e}")]
    NotConverged { residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErankReport {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    pub normalized: Vec<f64>,
    pub erank: f64,
}

/// Shannon entropy (natural log) of the normalized spectrum of a symmetric
/// positive semidefinite matrix.
pub fn erank(c: &DMatrix<f64>) -> Result<ErankReport, ErankError> {
    if !c.is_square() || c.nrows() == 0 {
        return Err(ErankError::Invalid(format!("matrix is {}x{}", c.nrows(), c.ncols())));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(ErankError::Invalid("matrix has non-finite entries".into()));
    }
    let asym = (c - c.transpose()).amax();
    if asym >= SYMMETRY_TOL {
        return Err(ErankError::Invalid(format!("matrix asymmetric by {asym:e}")));
    }
    let sym = (c + c.transpose()) * 0.5;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    if let Some(neg) = eigenvalues.iter().find(|v| **v < -NEGATIVE_TOL) {
        return Err(ErankError::Invalid(format!("negative eigenvalue {neg:e}")));
    }
    let top = eigenvalues[0];
    if top <= 0.0 {
        return Err(ErankError::Invalid("spectrum is identically zero".into()));
    }
    for v in &mut eigenvalues {
        if *v <= ZERO_REL * top {
            *v = 0.0;
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    let normalized: Vec<f64> = eigenvalues.iter().map(|v| v / total).collect();
    let erank = -normalized
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    Ok(ErankReport {
        eigenvalues,
        normalized,
        erank,
    })
}

/// `s_i = sqrt(d_i / (d_i + noise))`, with `noise` plugged in as given.
pub fn closed_form_filter(d: &[f64], noise: f64) -> Result<Vec<f64>, ErankError> {
    if !(noise > 0.0) || !noise.is_finite() {
        return Err(ErankError::Invalid(format!("noise parameter {noise} must be positive")));
    }
    validate_spectrum(d)?;
    Ok(d.iter().map(|di| (di / (di + noise)).sqrt()).collect())
}

fn validate_spectrum(d: &[f64]) -> Result<(), ErankError> {
    if d.is_empty() || d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(ErankError::Invalid("spectrum entries must be positive".into()));
    }
    if d.windows(2).any(|w| w[1] > w[0]) {
        return Err(ErankError::Invalid("spectrum must be non-increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSetting {
    pub n: usize,
    pub k: usize,
    /// Diagonal of the clean-data covariance, non-increasing.
    pub d: Vec<f64>,
    /// Variance of the additive Gaussian noise defining each view.
    pub sigma2: f64,
    pub lr: f64,
    pub seed: u64,
}

impl LinearSetting {
    /// `n = 8`, `k = 4`, `d_i = 8·2^{-i}`, unit noise variance.
    pub fn canonical(seed: u64) -> Self {
        LinearSetting {
            n: 8,
            k: 4,
            d: (0..8).map(|i| 8.0 * 0.5f64.powi(i)).collect(),
            sigma2: 1.0,
            lr: 1e-3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ErankError> {
        validate_spectrum(&self.d)?;
        if self.d.len() != self.n || self.k == 0 || self.k > self.n {
            return Err(ErankError::Invalid(format!(
                "need k ≤ n = len(d); got n = {}, k = {}, len(d) = {}",
                self.n,
                self.k,
                self.d.len()
            )));
        }
        if !(self.sigma2 > 0.0) || !(self.lr >= 0.0) {
            return Err(ErankError::Invalid("sigma2 must be positive and lr non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStep {
    pub step: usize,
    pub report: ErankReport,
    /// Training loss of the batch that produced this state; `None` at step 0.
    pub loss: Option<f64>,
    pub predictor_singular_values: Vec<f64>,
}

struct Sampler {
    rng: ChaCha8Rng,
    std: Vec<f64>,
}

impl Sampler {
    /// `n × batch` columns drawn from `N(0, D)`.
    fn clean(&mut self, batch: usize) -> DMatrix<f64> {
        let std = &self.std;
        let rng = &mut self.rng;
        DMatrix::from_fn(std.len(), batch, |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            std[i] * z
        })
    }

    fn noise(&mut self, rows: usize, batch: usize, sd: f64) -> DMatrix<f64> {
        let rng = &mut self.rng;
        DMatrix::from_fn(rows, batch, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
    }
}

fn correlation(features: &DMatrix<f64>) -> DMatrix<f64> {
    let n = features.ncols() as f64;
    let c = features * features.transpose() / n;
    (&c + c.transpose()) * 0.5
}

fn singular_values(w: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = w.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Trains encoder `W_f` and predictor `W` jointly on the reconstruction MSE
/// `‖W·W_f·x₁ − sg(W_f·x₂)‖²` of two independent noisy views, recording the
/// effective rank of the predictor-branch features on a fixed batch of
/// augmented inputs.
///
/// `W_f` starts with `N(0, 1/n)` entries and `W` at the identity.
pub fn run_linear_experiment(
    setting: &LinearSetting,
    steps: usize,
    batch: usize,
) -> Result<Vec<LinearStep>, ErankError> {
    setting.validate()?;
    if batch == 0 {
        return Err(ErankError::Invalid("batch must be positive".into()));
    }
    let (n, k) = (setting.n, setting.k);
    let sd = setting.sigma2.sqrt();
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(setting.seed),
        std: setting.d.iter().map(|v| v.sqrt()).collect(),
    };
    let mut wf = sampler.noise(k, n, (1.0 / n as f64).sqrt());
    let mut w = DMatrix::<f64>::identity(k, k);
    // Correlations are taken over augmented inputs, the distribution both
    // branches see.
    let eval = sampler.clean(EVAL_BATCH) + sampler.noise(n, EVAL_BATCH, sd);

    let record = |w: &DMatrix<f64>, wf: &DMatrix<f64>, step, loss| -> Result<LinearStep, ErankError> {
        Ok(LinearStep {
            step,
            report: erank(&correlation(&(w * wf * &eval)))?,
            loss,
            predictor_singular_values: singular_values(w),
        })
    };
    let mut out = vec![record(&w, &wf, 0, None)?];
    for step in 1..=steps {
        let x = sampler.clean(batch);
        let x1 = &x + sampler.noise(n, batch, sd);
        let x2 = &x + sampler.noise(n, batch, sd);
        let u = &wf * &x1;
        let err = &w * &u - &wf * &x2;
        let loss = err.norm_squared() / batch as f64;
        if !loss.is_finite() {
            return Err(ErankError::Diverged { step });
        }
        let scale = 2.0 / batch as f64;
        let grad_w = &err * u.transpose() * scale;
        let grad_wf = w.transpose() * &err * x1.transpose() * scale;
        w -= grad_w * setting.lr;
        wf -= grad_wf * setting.lr;
        out.push(record(&w, &wf, step, Some(loss))?);
    }
    Ok(out)
}

/// How the noise enters the filter denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterForm {
    /// `sqrt(d/(d+σ))`.
    Sigma,
    /// `sqrt(d/(d+σ²))`.
    Sigma2,
    /// `d/(d+σ²)`, the least-squares predictor.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Learned predictor singular values, non-increasing.
    pub learned: Vec<f64>,
    pub sigma_form: Vec<f64>,
    pub sigma2_form: Vec<f64>,
    pub regression_form: Vec<f64>,
    pub deviation_sigma: f64,
    pub deviation_sigma2: f64,
    pub deviation_regression: f64,
    /// Deviation from the default closed form `sqrt(d/(d+σ))`.
    pub deviation: f64,
    /// Form with the smallest deviation.
    pub closest: FilterForm,
    /// `‖W·A − B‖_F` for the population normal equations.
    pub residual: f64,
}

/// Residual on the population normal equations above which training is
/// reported as not converged.
pub const FILTER_RESIDUAL_TOL: f64 = 1e-2;

/// Freezes `W_f` on the top-`k` coordinate axes of `D`, trains only `W` by
/// SGD with iterate averaging over the second half of `steps`, and compares
/// its singular values with the closed-form filters.
pub fn verify_filter_convergence(setting: &LinearSetting, steps: usize) -> Result<FilterReport, ErankError> {
    setting.validate()?;
    if steps < 2 {
        return Err(ErankError::Invalid("need at least 2 steps".into()));
    }
    let (n, k) = (setting.n, setting.k);
    let batch = EVAL_BATCH;
    let sd = setting.sigma2.sqrt();
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(setting.seed),
        std: setting.d.iter().map(|v| v.sqrt()).collect(),
    };
    let wf = DMatrix::<f64>::from_fn(k, n, |i, j| if i == j { 1.0 } else { 0.0 });
    // Stable step for curvature 2·(d_1 + σ²).
    let lr = 0.5 / (setting.d[0] + setting.sigma2);
    let mut w = DMatrix::<f64>::identity(k, k);
    let mut avg = DMatrix::<f64>::zeros(k, k);
    let burn_in = steps / 2;
    for step in 1..=steps {
        let x = sampler.clean(batch);
        let u = &wf * (&x + sampler.noise(n, batch, sd));
        let t = &wf * (&x + sampler.noise(n, batch, sd));
        let err = &w * &u - t;
        if !err.iter().all(|v| v.is_finite()) {
            return Err(ErankError::Diverged { step });
        }
        w -= &err * u.transpose() * (2.0 * lr / batch as f64);
        if step > burn_in {
            avg += &w;
        }
    }
    avg /= (steps - burn_in) as f64;

    let dk = &setting.d[..k];
    let a = DMatrix::from_fn(k, k, |i, j| if i == j { dk[i] + setting.sigma2 } else { 0.0 });
    let b = DMatrix::from_fn(k, k, |i, j| if i == j { dk[i] } else { 0.0 });
    let residual = (&avg * a - b).norm();
    if residual > FILTER_RESIDUAL_TOL {
        return Err(ErankError::NotConverged { residual });
    }

    let learned = singular_values(&avg);
    let sigma_form = closed_form_filter(dk, sd)?;
    let sigma2_form = closed_form_filter(dk, setting.sigma2)?;
    let regression_form: Vec<f64> = dk.iter().map(|di| di / (di + setting.sigma2)).collect();
    let dev = |f: &[f64]| {
        learned
            .iter()
            .zip(f)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let (deviation_sigma, deviation_sigma2, deviation_regression) =
        (dev(&sigma_form), dev(&sigma2_form), dev(&regression_form));
    let closest = [
        (FilterForm::Sigma, deviation_sigma),
        (FilterForm::Sigma2, deviation_sigma2),
        (FilterForm::Regression, deviation_regression),
    ]
    .into_iter()
    .min_by(|a, b| a.1.total_cmp(&b.1))
    .map(|(f, _)| f)
    .unwrap();
    Ok(FilterReport {
        learned,
        sigma_form,
        sigma2_form,
        regression_form,
        deviation_sigma,
        deviation_sigma2,
        deviation_regression,
        deviation: deviation_sigma,
        closest,
        residual,
    })
}
