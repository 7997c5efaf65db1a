use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use super::grid::PixelGridEnv;
use super::EnvError;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Stacked frames observed before acting, oldest first.
    pub observation: Vec<Arc<[f32]>>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    /// Underlying state id, kept for oracle evaluation only.
    pub state: usize,
    pub episode: u64,
}

/// Fixed-capacity ring of transitions; the oldest entries are evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, EnvError> {
        if capacity == 0 {
            return Err(EnvError::Invalid("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// A window is valid when its first and last entries belong to the same
    /// episode; episodes occupy contiguous stretches of the ring.
    pub fn is_valid_window(&self, start: usize, len: usize) -> bool {
        len > 0
            && start + len <= self.items.len()
            && self.items[start].episode == self.items[start + len - 1].episode
    }

    pub fn valid_starts(&self, len: usize) -> Vec<usize> {
        if len == 0 || len > self.items.len() {
            return Vec::new();
        }
        (0..=self.items.len() - len)
            .filter(|&s| self.is_valid_window(s, len))
            .collect()
    }

    /// Draws `count` window starts uniformly (with replacement) among valid
    /// windows of length `len`.
    pub fn sample_windows(&self, count: usize, len: usize, rng: &mut impl Rng) -> Result<Vec<usize>, EnvError> {
        let starts = self.valid_starts(len);
        if starts.is_empty() {
            return Err(EnvError::Invalid(format!(
                "no window of length {len} fits inside one episode among {} transitions",
                self.items.len()
            )));
        }
        Ok((0..count)
            .map(|_| starts[rng.random_range(0..starts.len())])
            .collect())
    }

    pub fn window(&self, start: usize, len: usize) -> impl Iterator<Item = &Transition> {
        self.items.range(start..start + len)
    }
}

/// Runs `n_steps` uniformly random actions, resetting the environment at each
/// time limit, and appends every transition to `buffer`.
pub fn collect(
    env: &mut PixelGridEnv,
    n_steps: usize,
    buffer: &mut ReplayBuffer,
    rng: &mut impl Rng,
) -> Result<(), EnvError> {
    let n_actions = env.mdp().n_actions();
    for _ in 0..n_steps {
        if env.is_done() {
            env.reset();
        }
        let episode = env.episode();
        let observation = env.observation();
        let state = env.state();
        let action = rng.random_range(0..n_actions);
        let (_, reward, done) = env.step(action)?;
        buffer.push(Transition {
            observation,
            action,
            reward,
            done,
            state,
            episode,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(episode: u64) -> Transition {
        Transition {
            observation: Vec::new(),
            action: 0,
            reward: 0.0,
            done: false,
            state: 0,
            episode,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for i in 0..150 {
            let mut t = item(0);
            t.state = i;
            b.push(t);
        }
        assert_eq!(b.len(), 100);
        assert_eq!(b.get(0).unwrap().state, 50);
    }

    #[test]
    fn windows_stay_inside_episodes() {
        let k = 4;
        for lens in [vec![1, 3, 4, 5, 1], vec![5, 4, 3, 1]] {
            let mut b = ReplayBuffer::new(64).unwrap();
            for (ep, &n) in lens.iter().enumerate() {
                for _ in 0..n {
                    b.push(item(ep as u64));
                }
            }
            for s in b.valid_starts(k) {
                let eps: Vec<u64> = b.window(s, k).map(|t| t.episode).collect();
                assert!(eps.iter().all(|e| *e == eps[0]));
            }
            // Episodes of length 4 and 5 give 1 and 2 windows.
            assert_eq!(b.valid_starts(k).len(), 3);
        }
    }

    #[test]
    fn empty_buffer_has_no_windows() {
        let b = ReplayBuffer::new(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample_windows(1, 2, &mut rng).is_err());
    }
}
