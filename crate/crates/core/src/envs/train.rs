//! Masked latent reconstruction with the behavior loss, driven by a uniform
//! random policy.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::grid::{observations_to_tensor, PixelGridEnv};
use super::replay::{collect, ReplayBuffer};
use super::EnvError;
use crate::autodiff::{clip_grad_norm, Adam, Graph, ParameterSet, Tensor};
use crate::dynamics::{embed_actions, forward_dynamics, LatentDynamics, PREFIX as DYNAMICS_PREFIX};
use crate::erank::erank;
use crate::objective::{
    behavior_loss, combine_losses, reconstruction_loss, sample_partners, RewardNormalizer,
};
use crate::perception::{apply_mask, generate_mask, Actions, SiameseEncoderPair};

/// Checkpoint names of the momentum encoder are the online names behind this prefix.
pub const MOMENTUM_PREFIX: &str = "momentum/";

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "l_behavior",
    "l_reconstruction",
    "l_total",
    "latent_erank",
    "grad_norm",
    "wall_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_behavior: f64,
    pub l_reconstruction: f64,
    pub l_total: f64,
    /// Effective rank of the online latents of the batch.
    pub latent_erank: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Per-stream seeds drawn from the run seed.
struct Seeds {
    env: u64,
    encoder: u64,
    dynamics: u64,
    sampler: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Seeds {
            env: rng.random(),
            encoder: rng.random(),
            dynamics: rng.random(),
            sampler: rng.random(),
        }
    }
}

/// Encoder pair and transformer as initialized for `config`.
pub fn initial_models(config: &RunConfig) -> Result<(SiameseEncoderPair, LatentDynamics), EnvError> {
    config.validate()?;
    let seeds = Seeds::new(config.seed);
    let pair = SiameseEncoderPair::new(config.encoder.clone(), config.ema, seeds.encoder)?;
    let dynamics = LatentDynamics::new(config.transformer.clone(), seeds.dynamics)?;
    Ok((pair, dynamics))
}

/// Online encoder, momentum encoder and transformer in one parameter set.
pub fn checkpoint_params(pair: &SiameseEncoderPair, dynamics: &LatentDynamics) -> ParameterSet {
    let mut out = pair.online.clone();
    for (name, t) in pair.momentum.iter() {
        out.insert(&format!("{MOMENTUM_PREFIX}{name}"), t.clone());
    }
    for (name, t) in dynamics.params.iter() {
        out.insert(name, t.clone());
    }
    out
}

/// Inverse of [`checkpoint_params`]; layouts are checked against `config`.
pub fn models_from_checkpoint(
    config: &RunConfig,
    ckpt: &ParameterSet,
) -> Result<(SiameseEncoderPair, LatentDynamics), EnvError> {
    let (fresh, fresh_dyn) = initial_models(config)?;
    let mut online = ParameterSet::new();
    let mut momentum = ParameterSet::new();
    let mut dyn_params = ParameterSet::new();
    for (name, t) in ckpt.iter() {
        if let Some(rest) = name.strip_prefix(MOMENTUM_PREFIX) {
            momentum.insert(rest, t.clone());
        } else if name.starts_with(DYNAMICS_PREFIX) {
            dyn_params.insert(name, t.clone());
        } else {
            online.insert(name, t.clone());
        }
    }
    fresh_dyn.params.check_same_layout(&dyn_params)?;
    let pair = SiameseEncoderPair::from_parts(fresh.config, online, momentum, config.ema)?;
    Ok((pair, LatentDynamics { config: fresh_dyn.config, params: dyn_params }))
}

/// Effective rank of the `[N][d]` rows' second-moment matrix `ZᵀZ/N`; NaN
/// when every row is zero.
pub fn latent_erank(z: &Tensor) -> f64 {
    let s = z.shape();
    if s.len() != 2 || s[0] == 0 {
        return f64::NAN;
    }
    let m = DMatrix::from_row_slice(s[0], s[1], z.data());
    let c = m.transpose() * &m / s[0] as f64;
    erank(&c).map_or(f64::NAN, |r| r.erank)
}

/// Snapshot written when a loss or gradient turns non-finite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: usize,
    pub l_behavior: f64,
    pub l_reconstruction: f64,
    pub l_total: f64,
    pub window_starts: Vec<usize>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub parameter_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub pair: SiameseEncoderPair,
    pub dynamics: LatentDynamics,
    /// Parameters after the last step, as written to `final.ckpt`.
    pub checkpoint: ParameterSet,
}

struct Batch {
    starts: Vec<usize>,
    frames: Tensor,
    masked: Tensor,
    actions: Vec<Actions>,
    raw_actions: Vec<Vec<usize>>,
    rewards: Vec<Vec<f64>>,
}

fn sample_batch(
    config: &RunConfig,
    buffer: &ReplayBuffer,
    normalizer: &RewardNormalizer,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, EnvError> {
    let (b, k, size) = (config.batch_size, config.seq_len, config.env.frame_size);
    let starts = buffer.sample_windows(b, k, rng)?;
    let mut frames = Vec::with_capacity(b * k * config.env.stack * size * size);
    let mut masked = Vec::with_capacity(frames.capacity());
    let mut raw_actions = Vec::with_capacity(b);
    let mut rewards = Vec::with_capacity(b);
    for &s in &starts {
        let window: Vec<_> = buffer.window(s, k).collect();
        let obs: Vec<&[_]> = window.iter().map(|t| t.observation.as_slice()).collect();
        let seq = observations_to_tensor(&obs, size)?;
        let mask = generate_mask(k, size, size, config.mask_ratio, config.cube, rng.random())?;
        masked.extend_from_slice(apply_mask(&seq, &mask)?.data());
        frames.extend_from_slice(seq.data());
        raw_actions.push(window.iter().map(|t| t.action).collect::<Vec<_>>());
        rewards.push(window.iter().map(|t| normalizer.normalize(t.reward)).collect());
    }
    let shape = vec![b * k, config.env.stack, size, size];
    Ok(Batch {
        starts,
        frames: Tensor::new(shape.clone(), frames)?,
        masked: Tensor::new(shape, masked)?,
        actions: raw_actions.iter().cloned().map(Actions::Discrete).collect(),
        raw_actions,
        rewards,
    })
}

fn parameter_norms(p: &ParameterSet) -> BTreeMap<String, f64> {
    p.iter().map(|(n, t)| (n.to_string(), t.norm())).collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), EnvError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, EnvError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(EnvError::Invalid(format!("unexpected metrics header {header:?}")));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Runs the training loop. With `out` set, writes `config.json`,
/// `metrics.csv`, `checkpoints/step_{n}.ckpt` and `final.ckpt` there.
pub fn train(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome, EnvError> {
    let (mut pair, mut dynamics) = initial_models(config)?;
    let seeds = Seeds::new(config.seed);
    let mut env = PixelGridEnv::new(config.env.clone(), seeds.env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sampler);
    let mut buffer = ReplayBuffer::new(config.replay_capacity)?;
    let mut adam_encoder = Adam::new(config.adam);
    let mut adam_dynamics = Adam::new(config.adam);
    let mut metrics = Vec::with_capacity(config.train_steps);

    let ckpt_dir: Option<PathBuf> = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), config.to_json())?;
            let c = dir.join("checkpoints");
            if config.checkpoint_every > 0 {
                fs::create_dir_all(&c)?;
            }
            Some(c)
        }
        None => None,
    };

    collect(&mut env, config.min_replay, &mut buffer, &mut rng)?;
    let started = Instant::now();
    let (b, k, d) = (config.batch_size, config.seq_len, config.encoder.latent_dim);

    for step in 1..=config.train_steps {
        collect(&mut env, config.env_steps_per_update, &mut buffer, &mut rng)?;
        let normalizer = RewardNormalizer::fit(buffer.iter().map(|t| &t.reward))
            .expect("replay holds at least one transition");
        let batch = sample_batch(config, &buffer, &normalizer, &mut rng)?;
        let partners = sample_partners(b, &mut rng)?;

        let targets = pair.embed(&batch.frames, true)?.reshape(&[b, k, d])?;
        let mut g = Graph::new();
        let x = g.constant(batch.masked);
        let (z, enc_bound) = pair.encode(&mut g, x, false)?;
        let dyn_bound = g.bind(&dynamics.params, true);
        let states = g.reshape(z, &[b, k, d])?;
        let acts = embed_actions(&mut g, &dyn_bound, &dynamics.config, &batch.actions)?;
        let pred = forward_dynamics(&mut g, &dyn_bound, &dynamics.config, states, acts)?;
        let l_beh = behavior_loss(&mut g, states, pred, &batch.rewards, &partners, config.gamma)?;
        let l_rec = reconstruction_loss(&mut g, &targets, pred)?;
        let total = combine_losses(&mut g, l_beh, l_rec, config.beta, config.weighting)?;
        let (lb, lr, lt) = (g.value(l_beh).item(), g.value(l_rec).item(), g.value(total).item());

        let grads = g.backward(total)?;
        let mut named = grads.named(&enc_bound);
        named.extend(grads.named(&dyn_bound));
        let norm = clip_grad_norm(&mut named, config.max_grad_norm);
        if !(lt.is_finite() && norm.is_finite()) {
            let mut all = pair.online.clone();
            all.extend(dynamics.params.clone())?;
            let diag = Diagnostic {
                step,
                l_behavior: lb,
                l_reconstruction: lr,
                l_total: lt,
                window_starts: batch.starts,
                actions: batch.raw_actions,
                rewards: batch.rewards,
                parameter_norms: parameter_norms(&all),
            };
            let text = serde_json::to_string_pretty(&diag)?;
            if let Some(dir) = out {
                fs::write(dir.join("diagnostic.json"), &text)?;
                write_metrics(&dir.join("metrics.csv"), &metrics)?;
            }
            return Err(EnvError::NonFinite { step, diagnostic: text });
        }
        let (dyn_grads, enc_grads): (BTreeMap<_, _>, BTreeMap<_, _>) =
            named.into_iter().partition(|(n, _)| n.starts_with(DYNAMICS_PREFIX));
        adam_encoder.step(&mut pair.online, &enc_grads)?;
        adam_dynamics.step(&mut dynamics.params, &dyn_grads)?;
        pair.ema_update();

        metrics.push(MetricsRow {
            step,
            l_behavior: lb,
            l_reconstruction: lr,
            l_total: lt,
            latent_erank: latent_erank(g.value(z)),
            grad_norm: norm,
            wall_ms: if config.log_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if let Some(dir) = &ckpt_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                checkpoint_params(&pair, &dynamics).save(&dir.join(format!("step_{step}.ckpt")))?;
            }
        }
    }

    let checkpoint = checkpoint_params(&pair, &dynamics);
    if let Some(dir) = out {
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        metrics,
        pair,
        dynamics,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardKind;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::small(4, 4, RewardKind::DenseDistance);
        c.batch_size = 4;
        c.seq_len = 4;
        c.cube = crate::perception::CubeShape::new(2, 3, 3);
        c.min_replay = 60;
        c.train_steps = 3;
        c
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let mut c = tiny();
        c.train_steps = 0;
        let out = train(&c, None).unwrap();
        let (pair, dynamics) = initial_models(&c).unwrap();
        assert_eq!(out.checkpoint, checkpoint_params(&pair, &dynamics));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn checkpoint_round_trips_into_models() {
        let c = tiny();
        let out = train(&c, None).unwrap();
        let (pair, dynamics) = models_from_checkpoint(&c, &out.checkpoint).unwrap();
        assert_eq!(pair, out.pair);
        assert_eq!(dynamics, out.dynamics);
        assert_ne!(pair.online, pair.momentum);
        assert_eq!(out.metrics.len(), 3);
        assert!(out.metrics.iter().all(|r| r.l_total.is_finite() && r.wall_ms == 0));
    }

    #[test]
    fn erank_of_orthogonal_rows() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!((latent_erank(&z) - 3f64.ln()).abs() < 1e-12);
        assert!(latent_erank(&Tensor::zeros(&[2, 3])).is_nan());
    }
}
