use std::sync::Arc;

use bisimlab::envs::{collect, Distractor, EnvSpec, PixelGridEnv, ReplayBuffer, Transition};
use bisimlab::mdp::{GridSpec, RewardKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn transition(episode: u64, t: usize) -> Transition {
    Transition {
        observation: vec![Arc::from(vec![0.0f32; 4])],
        action: t % 4,
        reward: 0.0,
        done: false,
        state: t,
        episode,
    }
}

fn spec(episode_len: usize) -> EnvSpec {
    EnvSpec {
        grid: GridSpec {
            width: 4,
            height: 4,
            reward: RewardKind::SparseGoal,
            goal: (3, 3),
            slip_prob: 0.2,
            gamma: 0.9,
        },
        frame_size: 8,
        stack: 2,
        distractor: Distractor::None,
        episode_len,
    }
}

/// Every valid start is checked against a direct scan of the episode ids.
#[test]
fn windows_never_cross_episodes_on_adversarial_lengths() {
    let k = 5;
    let lengths = [1, k - 1, k, k + 1];
    for rotation in 0..lengths.len() {
        let mut buf = ReplayBuffer::new(1000).unwrap();
        let mut expected = 0;
        for (ep, &len) in lengths.iter().cycle().skip(rotation).take(12).enumerate() {
            for t in 0..len {
                buf.push(transition(ep as u64, t));
            }
            expected += (len + 1).saturating_sub(k);
        }
        let starts = buf.valid_starts(k);
        assert_eq!(starts.len(), expected);
        for s in 0..buf.len() {
            let ids: Vec<u64> = buf.window(s, k.min(buf.len() - s)).map(|t| t.episode).collect();
            let clean = ids.len() == k && ids.iter().all(|e| *e == ids[0]);
            assert_eq!(starts.contains(&s), clean, "start {s}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rotation as u64);
        for s in buf.sample_windows(200, k, &mut rng).unwrap() {
            assert!(buf.is_valid_window(s, k));
        }
    }
}

#[test]
fn windows_after_eviction_stay_inside_episodes() {
    let k = 4;
    let mut env = PixelGridEnv::new(spec(k + 1), 3).unwrap();
    let mut buf = ReplayBuffer::new(37).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    collect(&mut env, 200, &mut buf, &mut rng).unwrap();
    assert_eq!(buf.len(), 37);
    for s in buf.valid_starts(k) {
        let w: Vec<&Transition> = buf.window(s, k).collect();
        assert!(w.iter().all(|t| t.episode == w[0].episode));
        assert!(w[..k - 1].iter().all(|t| !t.done));
    }
}

#[test]
fn collect_zero_steps_leaves_buffer_unchanged() {
    let mut env = PixelGridEnv::new(spec(10), 0).unwrap();
    let mut buf = ReplayBuffer::new(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    collect(&mut env, 0, &mut buf, &mut rng).unwrap();
    assert!(buf.is_empty());
}

#[test]
fn seeded_collect_is_reproducible() {
    let run = || {
        let mut env = PixelGridEnv::new(spec(7), 11).unwrap();
        let mut buf = ReplayBuffer::new(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        collect(&mut env, 50, &mut buf, &mut rng).unwrap();
        buf.iter().cloned().collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn episode_boundaries_follow_time_limit() {
    let mut env = PixelGridEnv::new(spec(3), 0).unwrap();
    let mut buf = ReplayBuffer::new(64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    collect(&mut env, 9, &mut buf, &mut rng).unwrap();
    let eps: Vec<u64> = buf.iter().map(|t| t.episode).collect();
    assert_eq!(eps, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    let done: Vec<bool> = buf.iter().map(|t| t.done).collect();
    assert_eq!(done.iter().filter(|d| **d).count(), 3);
}
