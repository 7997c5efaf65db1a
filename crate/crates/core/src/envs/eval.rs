//! Learned latent distances checked against the exact metric of the
//! underlying gridworld.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{observations_to_tensor, Distractor, EnvSpec, PixelGridEnv};
use super::stats::{median, paired_permutation_test, pearson, spearman, PermutationReport};
use super::EnvError;
use crate::autodiff::Tensor;
use crate::mdp::Policy;
use crate::metric::{cosine_distance, solve_fixed_point, FixedPointReport, MetricMatrix};
use crate::perception::SiameseEncoderPair;

pub const ORACLE_TOL: f64 = 1e-8;
pub const ORACLE_MAX_ITER: usize = 20_000;

/// Exact metric of the environment's MDP under the uniform behavior policy.
pub fn exact_metric(env: &EnvSpec) -> Result<FixedPointReport, EnvError> {
    let e = PixelGridEnv::new(env.clone(), 0)?;
    let mdp = e.mdp();
    let policy = Policy::uniform(mdp.n_states(), mdp.n_actions());
    Ok(solve_fixed_point(mdp, &policy, ORACLE_TOL, ORACLE_MAX_ITER)?)
}

/// Online-encoder latents `[n][d]` of canonical observations of `states`.
pub fn state_latents(
    pair: &SiameseEncoderPair,
    env: &PixelGridEnv,
    states: &[usize],
    phases: &[usize],
) -> Result<Tensor, EnvError> {
    let obs: Vec<_> = states
        .iter()
        .zip(phases)
        .map(|(&s, &p)| env.canonical_observation(s, p))
        .collect();
    let refs: Vec<&[_]> = obs.iter().map(Vec::as_slice).collect();
    let x = observations_to_tensor(&refs, env.spec().frame_size)?;
    Ok(pair.embed(&x, false)?)
}

fn latent_distance(z: &Tensor, i: usize, j: usize) -> Result<f64, EnvError> {
    Ok(cosine_distance(z.row(i), z.row(j))?)
}

/// `n_pairs` ordered pairs of distinct states, drawn uniformly.
pub fn sample_state_pairs(n_states: usize, n_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_pairs)
        .map(|_| {
            let i = rng.random_range(0..n_states);
            let j = (i + rng.random_range(1..n_states)) % n_states;
            (i, j)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n_pairs: usize,
    pub spearman: f64,
    pub pearson: f64,
    pub pairs: Vec<(usize, usize)>,
    pub learned: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Correlates learned cosine distances with `oracle` on the given pairs.
pub fn alignment_on_pairs(
    pair: &SiameseEncoderPair,
    env: &EnvSpec,
    oracle: &MetricMatrix,
    pairs: &[(usize, usize)],
) -> Result<AlignmentReport, EnvError> {
    let e = PixelGridEnv::new(env.clone(), 0)?;
    let n = e.mdp().n_states();
    if oracle.n() != n {
        return Err(EnvError::Invalid(format!("oracle covers {} states, MDP has {n}", oracle.n())));
    }
    let states: Vec<usize> = (0..n).collect();
    let z = state_latents(pair, &e, &states, &vec![0; n])?;
    let learned = pairs
        .iter()
        .map(|&(i, j)| latent_distance(&z, i, j))
        .collect::<Result<Vec<_>, _>>()?;
    let exact: Vec<f64> = pairs.iter().map(|&(i, j)| oracle.get(i, j)).collect();
    Ok(AlignmentReport {
        n_pairs: pairs.len(),
        spearman: spearman(&exact, &learned),
        pearson: pearson(&exact, &learned),
        pairs: pairs.to_vec(),
        learned,
        exact,
    })
}

pub fn evaluate_metric_alignment(
    pair: &SiameseEncoderPair,
    env: &EnvSpec,
    n_pairs: usize,
    seed: u64,
) -> Result<AlignmentReport, EnvError> {
    let oracle = exact_metric(env)?;
    let pairs = sample_state_pairs(oracle.metric.n(), n_pairs, seed);
    alignment_on_pairs(pair, env, &oracle.metric, &pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentComparison {
    pub trained: AlignmentReport,
    pub untrained: AlignmentReport,
    /// One-sided test that the trained encoder tracks the exact metric better.
    pub test: PermutationReport,
}

impl AlignmentComparison {
    pub fn significant(&self, level: f64) -> bool {
        self.test.observed > 0.0 && self.test.p_value < level
    }
}

/// Both encoders evaluated on the same pairs, then a paired permutation test.
pub fn compare_alignment(
    trained: &SiameseEncoderPair,
    untrained: &SiameseEncoderPair,
    env: &EnvSpec,
    n_pairs: usize,
    n_perm: usize,
    seed: u64,
) -> Result<AlignmentComparison, EnvError> {
    let oracle = exact_metric(env)?;
    let pairs = sample_state_pairs(oracle.metric.n(), n_pairs, seed);
    let t = alignment_on_pairs(trained, env, &oracle.metric, &pairs)?;
    let u = alignment_on_pairs(untrained, env, &oracle.metric, &pairs)?;
    let test = paired_permutation_test(&t.exact, &t.learned, &u.learned, n_perm, seed ^ 0x5eed);
    Ok(AlignmentComparison {
        trained: t,
        untrained: u,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub n_states: usize,
    pub trained_mean: f64,
    pub untrained_mean: f64,
    pub states: Vec<usize>,
    pub phases: Vec<usize>,
    pub trained: Vec<f64>,
    pub untrained: Vec<f64>,
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Cosine distance between latents of clean and distracted renders of the
/// same sampled states. Drifting backgrounds use a random phase per state.
pub fn evaluate_distractor_invariance(
    trained: &SiameseEncoderPair,
    untrained: &SiameseEncoderPair,
    clean: &EnvSpec,
    distracted: &EnvSpec,
    n_states: usize,
    seed: u64,
) -> Result<InvarianceReport, EnvError> {
    if clean.grid != distracted.grid || clean.frame_size != distracted.frame_size || clean.stack != distracted.stack {
        return Err(EnvError::Invalid(
            "clean and distracted environments must share the MDP and render shape".into(),
        ));
    }
    let ec = PixelGridEnv::new(clean.clone(), 0)?;
    let ed = PixelGridEnv::new(distracted.clone(), 0)?;
    let n = ec.mdp().n_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<usize> = (0..n_states).map(|_| rng.random_range(0..n)).collect();
    let phases: Vec<usize> = states
        .iter()
        .map(|_| match distracted.distractor {
            Distractor::DriftingNoise { .. } => rng.random_range(0..distracted.frame_size),
            _ => 0,
        })
        .collect();
    let distances = |pair: &SiameseEncoderPair| -> Result<Vec<f64>, EnvError> {
        let zc = state_latents(pair, &ec, &states, &vec![0; n_states])?;
        let zd = state_latents(pair, &ed, &states, &phases)?;
        (0..n_states)
            .map(|i| Ok(cosine_distance(zc.row(i), zd.row(i))?))
            .collect()
    };
    let t = distances(trained)?;
    let u = distances(untrained)?;
    Ok(InvarianceReport {
        n_states,
        trained_mean: mean(&t),
        untrained_mean: mean(&u),
        states,
        phases,
        trained: t,
        untrained: u,
    })
}

/// Median pairwise cosine distance between latents of every state's
/// canonical observation.
pub fn median_pairwise_distance(pair: &SiameseEncoderPair, env: &EnvSpec) -> Result<f64, EnvError> {
    let e = PixelGridEnv::new(env.clone(), 0)?;
    let n = e.mdp().n_states();
    let states: Vec<usize> = (0..n).collect();
    let z = state_latents(pair, &e, &states, &vec![0; n])?;
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(latent_distance(&z, i, j)?);
        }
    }
    Ok(median(&d).unwrap_or(0.0))
}
