//! Finite MDPs, stationary policies and the policy-conditioned dynamics
//! `(P^π, r^π)` that the bisimulation operator consumes.
//!
//! Generators are pure functions of their arguments (including the seed), so
//! every test family is reproducible across runs and machines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on probability-row sums.
pub const PROB_TOL: f64 = 1e-9;

/// Largest gridworld accepted by [`make_gridworld`].
pub const MAX_GRID_CELLS: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid generator argument: {0}")]
    Argument(String),
}

fn check_distribution(row: &[f64], what: &str) -> Result<(), MdpError> {
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(MdpError::Invalid(format!("{what} has invalid entry {p}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(MdpError::Invalid(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<(), MdpError> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(MdpError::Invalid(format!("gamma must lie in (0,1), got {gamma}")))
    }
}

/// Renormalizes a probability row when floating-point drift exceeds 1e-12.
fn renormalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        row.iter_mut().for_each(|p| *p /= sum);
    }
}

/// A finite MDP with stochastic transitions and deterministic rewards `r(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
}

/// On-disk JSON layout of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = MdpError;

    fn try_from(doc: MdpDocument) -> Result<Self, MdpError> {
        let mdp = TabularMdp::new(doc.transition, doc.reward, doc.gamma, doc.initial_dist)?;
        if mdp.n_states != doc.n_states || mdp.n_actions != doc.n_actions {
            return Err(MdpError::Dimension(format!(
                "declared {}x{} but arrays are {}x{}",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            transition: m.transition,
            reward: m.reward,
            initial_dist: m.initial_dist,
        }
    }
}

impl TabularMdp {
    /// Builds and validates an MDP from `transition[s][a][s']` and `reward[s][a]`.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self, MdpError> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(MdpError::Invalid("no states".into()));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(MdpError::Invalid("no actions".into()));
        }
        check_gamma(gamma)?;
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != n_actions {
                return Err(MdpError::Dimension(format!(
                    "state {s} has {} actions, expected {n_actions}",
                    rows.len()
                )));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_states {
                    return Err(MdpError::Dimension(format!(
                        "transition[{s}][{a}] has length {}, expected {n_states}",
                        row.len()
                    )));
                }
                check_distribution(row, &format!("transition[{s}][{a}]"))?;
            }
        }
        if reward.len() != n_states || reward.iter().any(|r| r.len() != n_actions) {
            return Err(MdpError::Dimension(format!(
                "reward must be {n_states}x{n_actions}"
            )));
        }
        if reward.iter().flatten().any(|r| !r.is_finite()) {
            return Err(MdpError::Invalid("non-finite reward".into()));
        }
        if initial_dist.len() != n_states {
            return Err(MdpError::Dimension(format!(
                "initial_dist has length {}, expected {n_states}",
                initial_dist.len()
            )));
        }
        check_distribution(&initial_dist, "initial_dist")?;
        Ok(TabularMdp {
            n_states,
            n_actions,
            gamma,
            transition,
            reward,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Next-state distribution `P(·|s,a)`.
    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.reward
    }

    pub fn transitions(&self) -> &[Vec<Vec<f64>>] {
        &self.transition
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Smallest and largest reward in the table, i.e. the tightest `[R_min, R_max]`.
    pub fn reward_bounds(&self) -> (f64, f64) {
        self.reward.iter().flatten().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), &r| (lo.min(r), hi.max(r)),
        )
    }

    pub fn is_zero_reward(&self) -> bool {
        self.reward.iter().flatten().all(|&r| r == 0.0)
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MdpError> {
        check_gamma(gamma)?;
        Ok(TabularMdp {
            gamma,
            ..self.clone()
        })
    }

    /// Same rewards and discount over a replacement transition tensor.
    pub fn with_transitions(&self, transition: Vec<Vec<Vec<f64>>>) -> Result<Self, MdpError> {
        TabularMdp::new(
            transition,
            self.reward.clone(),
            self.gamma,
            self.initial_dist.clone(),
        )
    }

    /// Same dynamics with a replacement reward table.
    pub fn with_rewards(&self, reward: Vec<Vec<f64>>) -> Result<Self, MdpError> {
        TabularMdp::new(
            self.transition.clone(),
            reward,
            self.gamma,
            self.initial_dist.clone(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("MDP serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        serde_json::from_str(text).map_err(|e| MdpError::Invalid(e.to_string()))
    }
}

/// A stationary stochastic policy `π(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, MdpError> {
        if probs.is_empty() {
            return Err(MdpError::Invalid("policy has no states".into()));
        }
        let n_actions = probs[0].len();
        for (s, row) in probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(MdpError::Dimension(format!("policy row {s} length mismatch")));
            }
            check_distribution(row, &format!("policy[{s}]"))?;
        }
        Ok(Policy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Policy {
            probs: vec![vec![p; n_actions]; n_states],
        }
    }

    /// One-hot policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self, MdpError> {
        let probs = actions
            .iter()
            .map(|&a| {
                if a >= n_actions {
                    return Err(MdpError::Argument(format!("action {a} out of range")));
                }
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Policy::new(probs)
    }

    /// Convex combination `λ·a + (1−λ)·b`.
    pub fn mix(a: &Policy, b: &Policy, lambda: f64) -> Result<Self, MdpError> {
        if a.n_states() != b.n_states() || a.n_actions() != b.n_actions() {
            return Err(MdpError::Dimension("policies differ in shape".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MdpError::Argument(format!("mixing weight {lambda} outside [0,1]")));
        }
        let probs = a
            .probs
            .iter()
            .zip(&b.probs)
            .map(|(ra, rb)| {
                ra.iter()
                    .zip(rb)
                    .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                    .collect()
            })
            .collect();
        Ok(Policy { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }
}

/// Policy-averaged transition matrix and reward vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDynamics {
    pub p_pi: Vec<Vec<f64>>,
    pub r_pi: Vec<f64>,
}

impl PolicyDynamics {
    pub fn n_states(&self) -> usize {
        self.r_pi.len()
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let n = self.r_pi.len();
        if self.p_pi.len() != n {
            return Err(MdpError::Dimension("p_pi rows != r_pi length".into()));
        }
        for (s, row) in self.p_pi.iter().enumerate() {
            if row.len() != n {
                return Err(MdpError::Dimension(format!("p_pi row {s} length mismatch")));
            }
            check_distribution(row, &format!("p_pi[{s}]"))?;
        }
        if self.r_pi.iter().any(|r| !r.is_finite()) {
            return Err(MdpError::Invalid("non-finite r_pi".into()));
        }
        Ok(())
    }
}

/// `P^π[s][s'] = Σ_a π(a|s) P(s'|s,a)` and `r^π[s] = Σ_a π(a|s) r(s,a)`.
pub fn policy_dynamics(mdp: &TabularMdp, policy: &Policy) -> Result<PolicyDynamics, MdpError> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(MdpError::Dimension(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let n = mdp.n_states();
    let mut p_pi = vec![vec![0.0; n]; n];
    let mut r_pi = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.reward(s, a);
            for (acc, p) in p_pi[s].iter_mut().zip(mdp.transition(s, a)) {
                *acc += w * p;
            }
        }
    }
    Ok(PolicyDynamics { p_pi, r_pi })
}

/// Samples a probability vector from the symmetric Dirichlet(1) distribution.
pub(crate) fn sample_dirichlet(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
    renormalize(&mut row);
    row
}

/// Random MDP with Dirichlet(1) transition rows and rewards uniform on `reward_range`.
pub fn make_random_mdp(
    n_states: usize,
    n_actions: usize,
    reward_range: (f64, f64),
    gamma: f64,
    seed: u64,
) -> Result<TabularMdp, MdpError> {
    if n_states < 2 {
        return Err(MdpError::Argument(format!("need at least 2 states, got {n_states}")));
    }
    if n_actions < 1 {
        return Err(MdpError::Argument("need at least 1 action".into()));
    }
    let (lo, hi) = reward_range;
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(MdpError::Argument(format!("empty reward range [{lo}, {hi}]")));
    }
    check_gamma(gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transition = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| sample_dirichlet(&mut rng, n_states))
                .collect()
        })
        .collect();
    let reward = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| lo + (hi - lo) * rng.random::<f64>())
                .collect()
        })
        .collect();
    let initial_dist = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(transition, reward, gamma, initial_dist)
}

/// Reward attached to gridworld cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// `1 − manhattan(s', goal)/max_manhattan`, averaged over successors.
    DenseDistance,
    /// Reward 1 on entering the goal cell, 0 elsewhere.
    SparseGoal,
    Zero,
}

/// The four grid moves, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
    ];

    fn delta(self) -> (isize, isize) {
        match self {
            GridAction::Up => (0, -1),
            GridAction::Down => (0, 1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub reward: RewardKind,
    /// Goal cell as `(x, y)`.
    pub goal: (usize, usize),
    pub slip_prob: f64,
    pub gamma: f64,
}

impl GridSpec {
    /// State index of cell `(x, y)`; rows are laid out top to bottom.
    pub fn state_of(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_of(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    fn step_cell(&self, s: usize, action: GridAction) -> usize {
        let (x, y) = self.cell_of(s);
        let (dx, dy) = action.delta();
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
            s
        } else {
            self.state_of(nx as usize, ny as usize)
        }
    }
}

/// Gridworld with 4 moves; with probability `slip_prob` one of the other three
/// moves is taken uniformly. Moves into the border leave the agent in place.
pub fn make_gridworld(spec: &GridSpec) -> Result<TabularMdp, MdpError> {
    let n = spec.width * spec.height;
    if spec.width == 0 || spec.height == 0 || n < 2 {
        return Err(MdpError::Argument("grid needs at least two cells".into()));
    }
    if n > MAX_GRID_CELLS {
        return Err(MdpError::Argument(format!(
            "grid has {n} cells, at most {MAX_GRID_CELLS} supported"
        )));
    }
    if !(0.0..=1.0).contains(&spec.slip_prob) {
        return Err(MdpError::Argument(format!("slip_prob {} outside [0,1]", spec.slip_prob)));
    }
    let (gx, gy) = spec.goal;
    if gx >= spec.width || gy >= spec.height {
        return Err(MdpError::Argument(format!(
            "goal ({gx}, {gy}) outside {}x{} grid",
            spec.width, spec.height
        )));
    }
    check_gamma(spec.gamma)?;

    let goal = spec.state_of(gx, gy);
    let max_dist = (spec.width - 1 + spec.height - 1) as f64;
    let closeness = |s: usize| {
        let (x, y) = spec.cell_of(s);
        let d = x.abs_diff(gx) + y.abs_diff(gy);
        1.0 - d as f64 / max_dist
    };

    let mut transition = vec![vec![vec![0.0; n]; 4]; n];
    let mut reward = vec![vec![0.0; 4]; n];
    for s in 0..n {
        for intended in GridAction::ALL {
            let row = &mut transition[s][intended as usize];
            row[spec.step_cell(s, intended)] += 1.0 - spec.slip_prob;
            for other in GridAction::ALL.into_iter().filter(|&o| o != intended) {
                row[spec.step_cell(s, other)] += spec.slip_prob / 3.0;
            }
            renormalize(row);
            reward[s][intended as usize] = match spec.reward {
                RewardKind::Zero => 0.0,
                RewardKind::SparseGoal => row[goal],
                RewardKind::DenseDistance => {
                    row.iter().enumerate().map(|(t, p)| p * closeness(t)).sum()
                }
            };
        }
    }
    let initial_dist = vec![1.0 / n as f64; n];
    TabularMdp::new(transition, reward, spec.gamma, initial_dist)
}
