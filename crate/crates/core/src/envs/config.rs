use serde::{Deserialize, Serialize};

use super::grid::{Distractor, EnvSpec};
use super::EnvError;
use crate::autodiff::AdamConfig;
use crate::dynamics::{ActionSpace, TransformerConfig};
use crate::mdp::{GridSpec, RewardKind};
use crate::objective::LossWeighting;
use crate::perception::{ConvSpec, CubeShape, EncoderConfig};

/// Every hyperparameter of a training run. Written next to each run's
/// metrics as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSpec,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    /// Window length `K`.
    pub seq_len: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub cube: CubeShape,
    pub beta: f64,
    pub weighting: LossWeighting,
    /// Discount inside the behavior target; must equal the environment's.
    pub gamma: f64,
    pub ema: f64,
    pub adam: AdamConfig,
    pub max_grad_norm: f64,
    pub train_steps: usize,
    pub replay_capacity: usize,
    /// Random-policy steps collected before the first update.
    pub min_replay: usize,
    pub env_steps_per_update: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Wall time makes the CSV machine dependent, so it is off by default.
    pub log_wall_time: bool,
}

impl Default for RunConfig {
    /// 10×10 dense-reward gridworld rendered at 48×48.
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        RunConfig {
            seed: 0,
            env: EnvSpec {
                grid: GridSpec {
                    width: 10,
                    height: 10,
                    reward: RewardKind::DenseDistance,
                    goal: (9, 9),
                    slip_prob: 0.1,
                    gamma: 0.99,
                },
                frame_size: 48,
                stack: 3,
                distractor: Distractor::None,
                episode_len: 100,
            },
            transformer: TransformerConfig {
                d_model: encoder.latent_dim,
                ..TransformerConfig::default()
            },
            encoder,
            seq_len: 16,
            batch_size: 64,
            mask_ratio: 0.5,
            cube: CubeShape::new(8, 7, 7),
            beta: 0.5,
            weighting: LossWeighting::default(),
            gamma: 0.99,
            ema: 0.95,
            adam: AdamConfig::default(),
            max_grad_norm: 10.0,
            train_steps: 10_000,
            replay_capacity: 100_000,
            min_replay: 2000,
            env_steps_per_update: 1,
            checkpoint_every: 1000,
            log_wall_time: false,
        }
    }
}

impl RunConfig {
    /// Minutes-scale configuration on 20×20 frames.
    pub fn small(width: usize, height: usize, reward: RewardKind) -> Self {
        let frame_size = 20;
        let encoder = EncoderConfig {
            in_channels: 3,
            frame_size,
            convs: vec![
                ConvSpec { channels: 8, kernel: 4, stride: 2 },
                ConvSpec { channels: 16, kernel: 3, stride: 2 },
            ],
            latent_dim: 16,
        };
        RunConfig {
            seed: 0,
            env: EnvSpec {
                grid: GridSpec {
                    width,
                    height,
                    reward,
                    goal: (width - 1, height - 1),
                    slip_prob: 0.1,
                    gamma: 0.9,
                },
                frame_size,
                stack: 3,
                distractor: Distractor::None,
                episode_len: 50,
            },
            transformer: TransformerConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
                ff_width: 32,
                max_steps: 8,
                relative_bias: true,
                action_space: ActionSpace::Discrete { n_actions: 4 },
            },
            encoder,
            seq_len: 8,
            batch_size: 16,
            mask_ratio: 0.5,
            cube: CubeShape::new(4, 3, 3),
            beta: 0.5,
            weighting: LossWeighting::default(),
            gamma: 0.9,
            ema: 0.95,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            max_grad_norm: 10.0,
            train_steps: 200,
            replay_capacity: 10_000,
            min_replay: 500,
            env_steps_per_update: 1,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.env.validate()?;
        let bad = |m: String| Err(EnvError::Invalid(m));
        if self.encoder.in_channels != self.env.stack || self.encoder.frame_size != self.env.frame_size {
            return bad(format!(
                "encoder expects {} channels at {}px, environment renders {} at {}px",
                self.encoder.in_channels, self.encoder.frame_size, self.env.stack, self.env.frame_size
            ));
        }
        self.encoder.flat_dim()?;
        self.transformer.validate()?;
        if self.transformer.d_model != self.encoder.latent_dim {
            return bad(format!(
                "transformer width {} differs from latent dimension {}",
                self.transformer.d_model, self.encoder.latent_dim
            ));
        }
        if self.transformer.action_space != (ActionSpace::Discrete { n_actions: 4 }) {
            return bad("gridworld runs need a 4-action discrete action space".into());
        }
        if self.seq_len < 2 || self.seq_len > self.transformer.max_steps {
            return bad(format!(
                "window length {} must lie in [2, {}]",
                self.seq_len, self.transformer.max_steps
            ));
        }
        if self.seq_len > self.env.episode_len {
            return bad(format!(
                "window length {} exceeds episode length {}",
                self.seq_len, self.env.episode_len
            ));
        }
        if self.batch_size < 2 {
            return bad("behavior pairing needs a batch of at least 2".into());
        }
        if self.gamma != self.env.grid.gamma {
            return bad(format!(
                "loss discount {} differs from environment discount {}",
                self.gamma, self.env.grid.gamma
            ));
        }
        if !(self.beta >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("beta must be non-negative and max_grad_norm positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return bad(format!("EMA coefficient {} outside [0, 1]", self.ema));
        }
        if self.min_replay < self.seq_len || self.replay_capacity < self.min_replay {
            return bad(format!(
                "need seq_len ≤ min_replay ≤ replay_capacity, got {} / {} / {}",
                self.seq_len, self.min_replay, self.replay_capacity
            ));
        }
        crate::perception::generate_mask(
            self.seq_len,
            self.env.frame_size,
            self.env.frame_size,
            self.mask_ratio,
            self.cube,
            0,
        )?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        for c in [RunConfig::default(), RunConfig::small(5, 5, RewardKind::SparseGoal)] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn mismatched_discount_rejected() {
        let mut c = RunConfig::small(5, 5, RewardKind::DenseDistance);
        c.gamma = 0.5;
        assert!(c.validate().is_err());
    }
}
