//! π-bisimulation metrics on tabular MDPs.
//!
//! The operator
//!
//! ```text
//! F(d)(i, j) = |r^π_i − r^π_j| + γ · W1(d)(P^π_i, P^π_j)
//! ```
//!
//! is iterated from `d = 0`; each Wasserstein term is an exact transport
//! problem restricted to the supports of the two next-state distributions.
//! The certifiers below check the contraction, diameter, approximation-gap
//! and zero-reward collapse properties numerically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{policy_dynamics, sample_dirichlet, MdpError, Policy, PolicyDynamics, TabularMdp};
use crate::transport::{min_cost_transport, TransportError};

/// Slack used when checking the certified inequalities.
pub const CERT_SLACK: f64 = 1e-9;

/// Relative residual below which successive-residual ratios are not recorded.
const RATIO_FLOOR: f64 = 1e-6;

/// Norms below this make cosine distance undefined.
pub const MIN_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("internal solver error: {0}")]
    Internal(String),
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("certified bound violated: {0}")]
    BoundViolated(String),
}

impl From<TransportError> for MetricError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Invalid(m) => MetricError::Invalid(m),
            TransportError::Internal(m) => MetricError::Internal(m),
        }
    }
}

/// Symmetric, non-negative state distance table with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricRows", into = "MetricRows")]
pub struct MetricMatrix {
    n: usize,
    d: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MetricRows {
    d: Vec<Vec<f64>>,
}

impl TryFrom<MetricRows> for MetricMatrix {
    type Error = MetricError;
    fn try_from(rows: MetricRows) -> Result<Self, MetricError> {
        MetricMatrix::from_rows(&rows.d)
    }
}

impl From<MetricMatrix> for MetricRows {
    fn from(m: MetricMatrix) -> Self {
        MetricRows { d: m.to_rows() }
    }
}

impl MetricMatrix {
    pub fn zeros(n: usize) -> Self {
        MetricMatrix {
            n,
            d: vec![0.0; n * n],
        }
    }

    /// Validates and wraps a full square table.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(MetricError::Invalid("metric must be square".into()));
        }
        let m = MetricMatrix {
            n,
            d: rows.concat(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a table from the strict upper triangle; `f(i, j)` is called for `i < j`.
    pub fn from_upper(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = MetricMatrix::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                let v = f(i, j);
                m.d[i * n + j] = v;
                m.d[j * n + i] = v;
            }
        }
        m
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let n = self.n;
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return Err(MetricError::Invalid(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(MetricError::Invalid(format!("entry ({i},{j}) = {v}")));
                }
                if v != self.get(j, i) {
                    return Err(MetricError::Invalid(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn max_entry(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// `‖self − other‖∞`.
    pub fn sup_distance(&self, other: &MetricMatrix) -> f64 {
        self.d
            .iter()
            .zip(&other.d)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.d.chunks(self.n).map(<[f64]>::to_vec).collect()
    }
}

/// Outcome of [`solve_fixed_point`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub metric: MetricMatrix,
    pub iterations: usize,
    pub residual: f64,
    pub contraction_ratio_observed: f64,
    pub diameter: f64,
    pub diameter_bound: f64,
}

/// Outcome of [`certify_gap_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub e_p: f64,
    pub gap_observed: f64,
    pub gap_bound: f64,
}

impl GapReport {
    pub fn holds(&self) -> bool {
        self.gap_observed <= self.gap_bound + CERT_SLACK
    }
}

/// `(R_max − R_min) / (1 − γ)`.
pub fn diameter_bound(r_min: f64, r_max: f64, gamma: f64) -> f64 {
    (r_max - r_min) / (1.0 - gamma)
}

fn check_probability(p: &[f64], what: &str) -> Result<(), MetricError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MetricError::Invalid(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(MetricError::Invalid(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// Exact Wasserstein-1 distance between `mu` and `nu` under `ground`.
pub fn wasserstein1(mu: &[f64], nu: &[f64], ground: &MetricMatrix) -> Result<f64, MetricError> {
    if mu.len() != ground.n() || nu.len() != ground.n() {
        return Err(MetricError::Invalid(format!(
            "distributions of length {} and {} against a {}-state metric",
            mu.len(),
            nu.len(),
            ground.n()
        )));
    }
    check_probability(mu, "mu")?;
    check_probability(nu, "nu")?;
    ground.validate()?;
    let a = SparseDist::from_dense(mu);
    let b = SparseDist::from_dense(nu);
    w1_sparse(&a, &b, ground)
}

/// Support and masses of a distribution.
#[derive(Debug, Clone)]
struct SparseDist {
    idx: Vec<usize>,
    mass: Vec<f64>,
}

impl SparseDist {
    fn from_dense(p: &[f64]) -> Self {
        let (idx, mass) = p
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        SparseDist { idx, mass }
    }
}

fn w1_sparse(a: &SparseDist, b: &SparseDist, ground: &MetricMatrix) -> Result<f64, MetricError> {
    if a.idx == b.idx && a.mass == b.mass {
        return Ok(0.0);
    }
    let cost: Vec<f64> = a
        .idx
        .iter()
        .flat_map(|&i| b.idx.iter().map(move |&j| ground.get(i, j)))
        .collect();
    Ok(min_cost_transport(&a.mass, &b.mass, &cost)?.cost.max(0.0))
}

/// Policy dynamics with precomputed sparse next-state supports.
struct PreparedDynamics {
    rewards: Vec<f64>,
    next: Vec<SparseDist>,
}

impl PreparedDynamics {
    fn new(dynamics: &PolicyDynamics) -> Self {
        PreparedDynamics {
            rewards: dynamics.r_pi.clone(),
            next: dynamics.p_pi.iter().map(|r| SparseDist::from_dense(r)).collect(),
        }
    }

    fn n(&self) -> usize {
        self.rewards.len()
    }

    fn apply(&self, d: &MetricMatrix, gamma: f64) -> Result<MetricMatrix, MetricError> {
        let n = self.n();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| {
                        let w = w1_sparse(&self.next[i], &self.next[j], d)?;
                        Ok((self.rewards[i] - self.rewards[j]).abs() + gamma * w)
                    })
                    .collect::<Result<Vec<f64>, MetricError>>()
            })
            .collect::<Result<_, _>>()?;
        Ok(MetricMatrix::from_upper(n, |i, j| rows[i][j - i - 1]))
    }
}

/// One application of the π-bisimulation operator.
pub fn apply_operator(
    d: &MetricMatrix,
    dynamics: &PolicyDynamics,
    gamma: f64,
) -> Result<MetricMatrix, MetricError> {
    dynamics.validate()?;
    d.validate()?;
    if d.n() != dynamics.n_states() {
        return Err(MetricError::Invalid(format!(
            "metric over {} states, dynamics over {}",
            d.n(),
            dynamics.n_states()
        )));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MetricError::Invalid(format!("gamma {gamma} outside (0,1)")));
    }
    PreparedDynamics::new(dynamics).apply(d, gamma)
}

/// Fixed-point iteration result including the full residual trace.
#[derive(Debug, Clone)]
pub struct FixedPointTrace {
    pub report: FixedPointReport,
    pub residuals: Vec<f64>,
}

/// Iterates the operator from `d = 0` until the sup-norm update is at most `tol`.
pub fn solve_fixed_point(
    mdp: &TabularMdp,
    policy: &Policy,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointReport, MetricError> {
    solve_fixed_point_traced(mdp, policy, tol, max_iter).map(|t| t.report)
}

/// [`solve_fixed_point`] that also returns every per-iteration residual.
pub fn solve_fixed_point_traced(
    mdp: &TabularMdp,
    policy: &Policy,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointTrace, MetricError> {
    if !(tol > 0.0) {
        return Err(MetricError::Invalid(format!("tol must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(MetricError::Invalid("max_iter must be at least 1".into()));
    }
    let dynamics = policy_dynamics(mdp, policy)?;
    let prepared = PreparedDynamics::new(&dynamics);
    let gamma = mdp.gamma();
    let (r_min, r_max) = mdp.reward_bounds();
    let bound = diameter_bound(r_min, r_max, gamma);

    let mut d = MetricMatrix::zeros(mdp.n_states());
    let mut residuals = Vec::new();
    let mut ratio: f64 = 0.0;
    for it in 1..=max_iter {
        let next = prepared.apply(&d, gamma)?;
        let residual = next.sup_distance(&d);
        if let Some(&prev) = residuals.last() {
            // Ratios of residuals near rounding level are noise.
            if prev > RATIO_FLOOR * d.max_entry().max(1.0) {
                ratio = ratio.max(residual / prev);
            }
        }
        residuals.push(residual);
        d = next;
        if residual <= tol {
            let diameter = d.max_entry();
            if diameter > bound + CERT_SLACK {
                return Err(MetricError::BoundViolated(format!(
                    "diameter {diameter} exceeds (R_max − R_min)/(1 − γ) = {bound}"
                )));
            }
            return Ok(FixedPointTrace {
                report: FixedPointReport {
                    metric: d,
                    iterations: it,
                    residual,
                    contraction_ratio_observed: ratio,
                    diameter,
                    diameter_bound: bound,
                },
                residuals,
            });
        }
    }
    Err(MetricError::NotConverged {
        iterations: max_iter,
        residual: *residuals.last().unwrap_or(&f64::INFINITY),
    })
}

/// `‖F d1 − F d2‖∞ / ‖d1 − d2‖∞`, or `None` when `d1 = d2`.
pub fn contraction_ratio(
    d1: &MetricMatrix,
    d2: &MetricMatrix,
    dynamics: &PolicyDynamics,
    gamma: f64,
) -> Result<Option<f64>, MetricError> {
    let denom = d1.sup_distance(d2);
    if denom == 0.0 {
        return Ok(None);
    }
    let f1 = apply_operator(d1, dynamics, gamma)?;
    let f2 = apply_operator(d2, dynamics, gamma)?;
    Ok(Some(f1.sup_distance(&f2) / denom))
}

/// Largest observed contraction ratio over `n_trials` random metric pairs
/// with entries uniform on `[0, diameter bound]`.
pub fn certify_contraction(
    mdp: &TabularMdp,
    policy: &Policy,
    n_trials: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if n_trials == 0 {
        return Err(MetricError::Invalid("n_trials must be at least 1".into()));
    }
    let dynamics = policy_dynamics(mdp, policy)?;
    let (r_min, r_max) = mdp.reward_bounds();
    let scale = diameter_bound(r_min, r_max, mdp.gamma()).max(1.0);
    let n = mdp.n_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_trials {
        let d1 = MetricMatrix::from_upper(n, |_, _| scale * rng.random::<f64>());
        let d2 = MetricMatrix::from_upper(n, |_, _| scale * rng.random::<f64>());
        if let Some(r) = contraction_ratio(&d1, &d2, &dynamics, mdp.gamma())? {
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Mixes each transition row with Dirichlet noise: `(1−ε)·P + ε·noise`.
pub fn perturb_transitions(
    mdp: &TabularMdp,
    scale: f64,
    seed: u64,
) -> Result<TabularMdp, MetricError> {
    if !(0.0..=1.0).contains(&scale) {
        return Err(MetricError::Invalid(format!("perturbation scale {scale} outside [0,1]")));
    }
    if scale == 0.0 {
        return Ok(mdp.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mdp.n_states();
    let transition = mdp
        .transitions()
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|row| {
                    let noise = sample_dirichlet(&mut rng, n);
                    let mut mixed: Vec<f64> = row
                        .iter()
                        .zip(&noise)
                        .map(|(p, q)| (1.0 - scale) * p + scale * q)
                        .collect();
                    let sum: f64 = mixed.iter().sum();
                    mixed.iter_mut().for_each(|p| *p /= sum);
                    mixed
                })
                .collect()
        })
        .collect();
    Ok(mdp.with_transitions(transition)?)
}

fn iteration_budget(tol: f64, gamma: f64, diameter: f64) -> usize {
    let needed = ((tol / diameter.max(tol)).ln() / gamma.ln()).ceil();
    needed.max(1.0) as usize + 100
}

/// Compares the fixed points of `mdp` and `perturbed` (same rewards, different
/// transitions) against `2·E_P/(1−γ)`, with `E_P` measured under the true metric.
pub fn gap_between(
    mdp: &TabularMdp,
    perturbed: &TabularMdp,
    policy: &Policy,
    tol: f64,
) -> Result<GapReport, MetricError> {
    if mdp.n_states() != perturbed.n_states() || mdp.gamma() != perturbed.gamma() {
        return Err(MetricError::Invalid("perturbed MDP differs in shape or discount".into()));
    }
    let (r_min, r_max) = mdp.reward_bounds();
    let budget = iteration_budget(tol, mdp.gamma(), diameter_bound(r_min, r_max, mdp.gamma()));
    let exact = solve_fixed_point(mdp, policy, tol, budget)?;
    let approx = solve_fixed_point(perturbed, policy, tol, budget)?;
    let true_dyn = policy_dynamics(mdp, policy)?;
    let pert_dyn = policy_dynamics(perturbed, policy)?;
    let mut e_p: f64 = 0.0;
    for s in 0..mdp.n_states() {
        let a = SparseDist::from_dense(&true_dyn.p_pi[s]);
        let b = SparseDist::from_dense(&pert_dyn.p_pi[s]);
        e_p = e_p.max(w1_sparse(&a, &b, &exact.metric)?);
    }
    Ok(GapReport {
        e_p,
        gap_observed: exact.metric.sup_distance(&approx.metric),
        gap_bound: 2.0 * e_p / (1.0 - mdp.gamma()),
    })
}

/// Builds a Dirichlet-perturbed copy of `mdp` and measures the fixed-point gap.
pub fn certify_gap_bound(
    mdp: &TabularMdp,
    policy: &Policy,
    perturbation_scale: f64,
    tol: f64,
    seed: u64,
) -> Result<GapReport, MetricError> {
    if perturbation_scale < 0.0 {
        return Err(MetricError::Invalid("perturbation scale must be non-negative".into()));
    }
    let perturbed = perturb_transitions(mdp, perturbation_scale, seed)?;
    gap_between(mdp, &perturbed, policy, tol)
}

/// Fixed point of a zero-reward MDP; fails unless every entry is at most `tol`.
pub fn collapse_witness(
    mdp: &TabularMdp,
    policy: &Policy,
    tol: f64,
) -> Result<MetricMatrix, MetricError> {
    if !mdp.is_zero_reward() {
        return Err(MetricError::Invalid("collapse witness needs an all-zero reward".into()));
    }
    let report = solve_fixed_point(mdp, policy, tol, 2)?;
    if report.diameter > tol {
        return Err(MetricError::BoundViolated(format!(
            "zero-reward fixed point has entry {}",
            report.diameter
        )));
    }
    Ok(report.metric)
}

/// `1 − u·v / (‖u‖‖v‖)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::Invalid(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu2 = u.iter().map(|x| x * x).sum::<f64>();
    let nv2 = v.iter().map(|x| x * x).sum::<f64>();
    let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
    if nu < MIN_NORM || nv < MIN_NORM {
        return Err(MetricError::Invalid(format!(
            "cosine distance undefined for norms {nu:e} and {nv:e}"
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu2 * nv2).sqrt()).clamp(0.0, 2.0))
}
