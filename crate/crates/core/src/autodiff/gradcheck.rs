use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Bound, Graph, Var};
use super::params::ParameterSet;
use super::TensorError;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `step`.
///
/// Every coordinate is checked when there are at most `n_coords` of them;
/// otherwise a seeded uniform subsample of `n_coords` is used.
pub fn grad_check<F>(
    f: F,
    params: &ParameterSet,
    step: f64,
    tolerance: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, TensorError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Invalid(format!("finite-difference step {step}")));
    }
    let eval = |p: &ParameterSet| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let bound = g.bind(p, false);
        let out = f(&mut g, &bound)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let bound = g.bind(params, true);
    let loss = f(&mut g, &bound)?;
    let grads = g.backward(loss)?.named(&bound);

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= n_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, coords.len(), n_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
        passed: true,
    };
    let mut probe = params.clone();
    for &c in &chosen {
        let (name, i) = &coords[c];
        let orig = params.get(name).unwrap().data()[*i];
        probe.get_mut(name).unwrap().data_mut()[*i] = orig + step;
        let plus = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig - step;
        let minus = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        let abs = (numeric - analytic).abs();
        let rel = abs / numeric.abs().max(analytic.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), *i));
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
