//! Rendered gridworld with optional procedural background distractors.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::autodiff::Tensor;
use crate::mdp::{make_gridworld, GridSpec, TabularMdp};

pub const AGENT_VALUE: f32 = 1.0;
pub const GOAL_VALUE: f32 = 0.6;
pub const BACKGROUND_VALUE: f32 = 0.1;
/// Distractor backgrounds take values in `[0, NOISE_MAX]`.
pub const NOISE_MAX: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distractor {
    #[default]
    None,
    /// Fixed value-noise background.
    StaticNoise { seed: u64 },
    /// Value-noise background translated by `speed` pixels per global step.
    DriftingNoise { seed: u64, speed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub grid: GridSpec,
    pub frame_size: usize,
    pub stack: usize,
    pub distractor: Distractor,
    /// Steps per episode before the time limit ends it.
    pub episode_len: usize,
}

impl EnvSpec {
    /// Pixels per grid cell.
    pub fn cell_px(&self) -> usize {
        self.frame_size / self.grid.width.max(self.grid.height)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.stack == 0 || self.episode_len == 0 {
            return Err(EnvError::Invalid("stack and episode_len must be positive".into()));
        }
        if self.cell_px() < 2 {
            return Err(EnvError::Invalid(format!(
                "{}px frames cannot draw a {}x{} grid with at least 2px per cell",
                self.frame_size, self.grid.width, self.grid.height
            )));
        }
        Ok(())
    }
}

/// Periodic value-noise field with period `size` in both directions.
#[derive(Debug, Clone)]
struct NoiseField {
    size: usize,
    values: Vec<f32>,
}

impl NoiseField {
    fn new(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lattice = (size / 6).max(2);
        let knots: Vec<f32> = (0..lattice * lattice)
            .map(|_| rng.random::<f32>() * NOISE_MAX)
            .collect();
        let scale = lattice as f32 / size as f32;
        let mut values = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f32 * scale, y as f32 * scale);
                let (x0, y0) = (u.floor() as usize % lattice, v.floor() as usize % lattice);
                let (x1, y1) = ((x0 + 1) % lattice, (y0 + 1) % lattice);
                let (fx, fy) = (u.fract(), v.fract());
                let k = |a: usize, b: usize| knots[b * lattice + a];
                let top = k(x0, y0) * (1.0 - fx) + k(x1, y0) * fx;
                let bottom = k(x0, y1) * (1.0 - fx) + k(x1, y1) * fx;
                values.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, NOISE_MAX));
            }
        }
        NoiseField { size, values }
    }

    fn at(&self, x: usize, y: usize, shift: usize) -> f32 {
        self.values[((y + shift) % self.size) * self.size + (x + shift) % self.size]
    }
}

/// Gridworld observed through rendered `[stack][H][W]` frames.
#[derive(Debug, Clone)]
pub struct PixelGridEnv {
    spec: EnvSpec,
    mdp: TabularMdp,
    noise: Option<NoiseField>,
    rng: ChaCha8Rng,
    state: usize,
    episode_step: usize,
    global_step: u64,
    episode: u64,
    done: bool,
    frames: VecDeque<Arc<[f32]>>,
}

impl PixelGridEnv {
    pub fn new(spec: EnvSpec, seed: u64) -> Result<Self, EnvError> {
        spec.validate()?;
        let mdp = make_gridworld(&spec.grid)?;
        let noise = match spec.distractor {
            Distractor::None => None,
            Distractor::StaticNoise { seed } | Distractor::DriftingNoise { seed, .. } => {
                Some(NoiseField::new(spec.frame_size, seed))
            }
        };
        let mut env = PixelGridEnv {
            spec,
            mdp,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: 0,
            episode_step: 0,
            global_step: 0,
            episode: u64::MAX,
            done: true,
            frames: VecDeque::new(),
        };
        env.reset();
        Ok(env)
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Underlying tabular MDP, for oracle computations only.
    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Index of the current episode, counting from 0.
    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    fn draw_state(&mut self, dist: &[f64]) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (s, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        dist.len() - 1
    }

    /// Starts a new episode from the MDP's initial distribution.
    pub fn reset(&mut self) -> Vec<Arc<[f32]>> {
        let init = self.mdp.initial_dist().to_vec();
        self.state = self.draw_state(&init);
        self.episode = self.episode.wrapping_add(1);
        self.episode_step = 0;
        self.done = false;
        let frame = self.render_frame(self.state, self.phase());
        self.frames = std::iter::repeat_n(frame, self.spec.stack).collect();
        self.observation()
    }

    /// Current stacked observation, oldest frame first.
    pub fn observation(&self) -> Vec<Arc<[f32]>> {
        self.frames.iter().cloned().collect()
    }

    fn phase(&self) -> usize {
        match self.spec.distractor {
            Distractor::DriftingNoise { speed, .. } => {
                (self.global_step as usize).wrapping_mul(speed) % self.spec.frame_size.max(1)
            }
            _ => 0,
        }
    }

    /// Advances the MDP; returns the new stacked observation, the reward
    /// `r(s, a)` and whether the time limit was reached.
    pub fn step(&mut self, action: usize) -> Result<(Vec<Arc<[f32]>>, f64, bool), EnvError> {
        if action >= self.mdp.n_actions() {
            return Err(EnvError::Invalid(format!(
                "action {action} out of range for {} actions",
                self.mdp.n_actions()
            )));
        }
        if self.done {
            return Err(EnvError::Invalid("step on a finished episode; call reset".into()));
        }
        let reward = self.mdp.reward(self.state, action);
        let next = self.mdp.transition(self.state, action).to_vec();
        self.state = self.draw_state(&next);
        self.episode_step += 1;
        self.global_step += 1;
        self.done = self.episode_step >= self.spec.episode_len;
        let frame = self.render_frame(self.state, self.phase());
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok((self.observation(), reward, self.done))
    }

    /// Pixel rectangle `(x0, y0, side)` occupied by a grid cell.
    pub fn cell_rect(&self, s: usize) -> (usize, usize, usize) {
        let px = self.spec.cell_px();
        let (x, y) = self.spec.grid.cell_of(s);
        (x * px, y * px, px)
    }

    /// Single `[H][W]` frame for underlying state `s` at distractor phase `phase`.
    pub fn render_frame(&self, s: usize, phase: usize) -> Arc<[f32]> {
        let size = self.spec.frame_size;
        let mut img: Vec<f32> = match &self.noise {
            None => vec![BACKGROUND_VALUE; size * size],
            Some(field) => (0..size * size)
                .map(|i| field.at(i % size, i / size, phase))
                .collect(),
        };
        let (gx, gy) = self.spec.grid.goal;
        let goal = self.spec.grid.state_of(gx, gy);
        for (s, value) in [(goal, GOAL_VALUE), (s, AGENT_VALUE)] {
            let (x0, y0, side) = self.cell_rect(s);
            for y in y0..y0 + side {
                img[y * size + x0..y * size + x0 + side].fill(value);
            }
        }
        img.into()
    }

    /// `[stack][H][W]` observation of state `s` with every frame equal, as
    /// used for evaluation.
    pub fn canonical_observation(&self, s: usize, phase: usize) -> Vec<Arc<[f32]>> {
        let frame = self.render_frame(s, phase);
        vec![frame; self.spec.stack]
    }
}

/// Stacks observations into a `[N][stack][H][W]` tensor.
pub fn observations_to_tensor(obs: &[&[Arc<[f32]>]], frame_size: usize) -> Result<Tensor, EnvError> {
    let stack = obs.first().map_or(0, |o| o.len());
    let plane = frame_size * frame_size;
    let mut data = Vec::with_capacity(obs.len() * stack * plane);
    for o in obs {
        if o.len() != stack || o.iter().any(|f| f.len() != plane) {
            return Err(EnvError::Invalid("observations differ in shape".into()));
        }
        for f in o.iter() {
            data.extend(f.iter().map(|&v| f64::from(v)));
        }
    }
    Ok(Tensor::new(vec![obs.len(), stack, frame_size, frame_size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::RewardKind;

    pub(crate) fn spec(distractor: Distractor, reward: RewardKind) -> EnvSpec {
        EnvSpec {
            grid: GridSpec {
                width: 5,
                height: 5,
                reward,
                goal: (4, 4),
                slip_prob: 0.1,
                gamma: 0.9,
            },
            frame_size: 20,
            stack: 3,
            distractor,
            episode_len: 10,
        }
    }

    #[test]
    fn same_state_same_frame() {
        let env = PixelGridEnv::new(spec(Distractor::None, RewardKind::DenseDistance), 0).unwrap();
        assert_eq!(env.render_frame(7, 0), env.render_frame(7, 0));
        assert_ne!(env.render_frame(7, 0), env.render_frame(8, 0));
    }

    #[test]
    fn drifting_background_spares_sprites() {
        let env = PixelGridEnv::new(
            spec(Distractor::DriftingNoise { seed: 3, speed: 1 }, RewardKind::DenseDistance),
            0,
        )
        .unwrap();
        let (a, b) = (env.render_frame(6, 0), env.render_frame(6, 5));
        assert_ne!(a, b);
        let (x0, y0, side) = env.cell_rect(6);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                assert_eq!(a[y * 20 + x], AGENT_VALUE);
                assert_eq!(b[y * 20 + x], AGENT_VALUE);
            }
        }
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_reward_steps() {
        let mut env = PixelGridEnv::new(spec(Distractor::None, RewardKind::Zero), 1).unwrap();
        for t in 0..10 {
            let (_, r, done) = env.step(t % 4).unwrap();
            assert_eq!(r, 0.0);
            assert_eq!(done, t == 9);
        }
        assert!(env.step(0).is_err());
        env.reset();
        assert!(env.step(4).is_err());
    }
}
