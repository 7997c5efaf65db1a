//! Certifiers for the metric and effective-rank properties, bundled for the
//! command line and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::erank::{run_linear_experiment, verify_filter_convergence, ErankError, LinearSetting, EVAL_BATCH};
use crate::mdp::{make_random_mdp, MdpError, Policy, TabularMdp};
use crate::metric::{
    certify_contraction, certify_gap_bound, collapse_witness, solve_fixed_point, MetricError, CERT_SLACK,
};

/// Fixed-point tolerance used by every certifier.
pub const SOLVE_TOL: f64 = 1e-10;
pub const SOLVE_MAX_ITER: usize = 10_000;
/// Steps over which the linear experiment's erank must rise strictly.
pub const ERANK_PHASE_STEPS: usize = 10;
/// Seeds out of ten that must show the rise.
pub const ERANK_MIN_SEEDS: usize = 9;
pub const FILTER_STEPS: usize = 4000;
pub const FILTER_TOL: f64 = 5e-2;

#[derive(Debug, thiserror::Error)]
pub enum CertifyError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Erank(#[from] ErankError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

fn random_mdps(count: usize, gamma: f64, seed: u64) -> Result<Vec<TabularMdp>, MdpError> {
    (0..count as u64)
        .map(|i| {
            let n = 3 + (i as usize % 5);
            let a = 1 + (i as usize % 3);
            make_random_mdp(n, a, (0.0, 1.0), gamma, seed.wrapping_mul(1000).wrapping_add(i))
        })
        .collect()
}

fn uniform(mdp: &TabularMdp) -> Policy {
    Policy::uniform(mdp.n_states(), mdp.n_actions())
}

/// Largest observed operator ratio over `count` random MDPs per discount.
pub fn check_contraction(count: usize, gammas: &[f64], seed: u64) -> Result<Check, CertifyError> {
    let mut worst = f64::NEG_INFINITY;
    let mut passed = true;
    for &gamma in gammas {
        for (i, mdp) in random_mdps(count, gamma, seed)?.iter().enumerate() {
            let ratio = certify_contraction(mdp, &uniform(mdp), 4, seed ^ i as u64)?;
            passed &= ratio <= gamma + CERT_SLACK;
            worst = worst.max(ratio - gamma);
        }
    }
    Ok(Check {
        name: "contraction".into(),
        passed,
        detail: format!(
            "{} MDPs, max(ratio − γ) = {worst:.3e} (allowed {CERT_SLACK:e})",
            count * gammas.len()
        ),
    })
}

pub fn check_diameter(count: usize, gammas: &[f64], seed: u64) -> Result<Check, CertifyError> {
    let mut worst = f64::NEG_INFINITY;
    let mut passed = true;
    for &gamma in gammas {
        for mdp in random_mdps(count, gamma, seed)? {
            match solve_fixed_point(&mdp, &uniform(&mdp), SOLVE_TOL, SOLVE_MAX_ITER) {
                Ok(r) => {
                    passed &= r.diameter <= r.diameter_bound + CERT_SLACK;
                    worst = worst.max(r.diameter - r.diameter_bound);
                }
                Err(MetricError::BoundViolated(_)) => passed = false,
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(Check {
        name: "diameter bound".into(),
        passed,
        detail: format!("{} fixed points, max(diam − bound) = {worst:.3e}", count * gammas.len()),
    })
}

pub fn check_gap(bases: usize, trials: usize, seed: u64) -> Result<Check, CertifyError> {
    let mut passed = true;
    let mut worst_ratio: f64 = 0.0;
    for (b, mdp) in random_mdps(bases, 0.9, seed ^ 0xa5a5)?.iter().enumerate() {
        for t in 0..trials {
            let scale = 0.05 + 0.9 * t as f64 / trials.max(1) as f64;
            let r = certify_gap_bound(mdp, &uniform(mdp), scale, SOLVE_TOL, seed ^ ((b * trials + t) as u64))?;
            passed &= r.holds();
            if r.gap_bound > 0.0 {
                worst_ratio = worst_ratio.max(r.gap_observed / r.gap_bound);
            }
        }
    }
    Ok(Check {
        name: "gap bound".into(),
        passed,
        detail: format!("{} perturbations, max gap/bound = {worst_ratio:.4}", bases * trials),
    })
}

pub fn check_collapse(count: usize, seed: u64) -> Result<Check, CertifyError> {
    let mut passed = true;
    let mut worst: f64 = 0.0;
    for mdp in random_mdps(count, 0.99, seed ^ 0x0c0c)? {
        let zero = vec![vec![0.0; mdp.n_actions()]; mdp.n_states()];
        let mdp = mdp.with_rewards(zero)?;
        match collapse_witness(&mdp, &uniform(&mdp), 1e-9) {
            Ok(m) => worst = worst.max(m.max_entry()),
            Err(MetricError::BoundViolated(_)) => passed = false,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Check {
        name: "zero-reward collapse".into(),
        passed,
        detail: format!("{count} MDPs, max entry = {worst:e}"),
    })
}

/// First step at which the erank fails to rise, if any within `steps`.
pub fn first_non_increase(series: &[f64], steps: usize) -> Option<usize> {
    series
        .windows(2)
        .take(steps)
        .position(|w| w[1] <= w[0])
        .map(|i| i + 1)
}

pub fn check_erank_improvement(seed: u64) -> Result<Check, CertifyError> {
    let mut rising = 0;
    let mut firsts = Vec::new();
    for s in 0..10 {
        let setting = LinearSetting::canonical(seed.wrapping_mul(10).wrapping_add(s));
        let run = run_linear_experiment(&setting, ERANK_PHASE_STEPS, EVAL_BATCH)?;
        let series: Vec<f64> = run.iter().map(|r| r.report.erank).collect();
        let first = first_non_increase(&series, ERANK_PHASE_STEPS);
        rising += usize::from(first.is_none());
        firsts.push(first);
    }
    Ok(Check {
        name: "erank improvement".into(),
        passed: rising >= ERANK_MIN_SEEDS,
        detail: format!(
            "{rising}/10 seeds rise strictly over {ERANK_PHASE_STEPS} steps (need {ERANK_MIN_SEEDS}); first non-increase {firsts:?}"
        ),
    })
}

pub fn check_filter(seed: u64) -> Result<Check, CertifyError> {
    let r = verify_filter_convergence(&LinearSetting::canonical(seed), FILTER_STEPS)?;
    Ok(Check {
        name: "low-pass filter".into(),
        passed: r.deviation < FILTER_TOL,
        detail: format!(
            "deviation {:.4} from sqrt(d/(d+σ)), {:.4} from sqrt(d/(d+σ²)), {:.4} from d/(d+σ²); closest {:?}; residual {:.2e}",
            r.deviation_sigma, r.deviation_sigma2, r.deviation_regression, r.closest, r.residual
        ),
    })
}

/// Runs every certifier at a size suited to the command line.
pub fn certify_all(seed: u64) -> Result<Vec<Check>, CertifyError> {
    let gammas = [0.5, 0.9, 0.99];
    Ok(vec![
        check_contraction(10, &gammas, seed)?,
        check_diameter(10, &gammas, seed)?,
        check_gap(3, 5, seed)?,
        check_collapse(5, seed)?,
        check_erank_improvement(seed)?,
        check_filter(seed)?,
    ])
}
