#![allow(dead_code)]

use bisimlab::autodiff::{grad_check, Bound, GradCheckReport, Graph, ParameterSet, Tensor, TensorError, Var};
use bisimlab::dynamics::{embed_actions, forward_dynamics, ActionSpace, TransformerConfig};
use bisimlab::objective::{
    behavior_loss_with_targets, behavior_targets, combine_losses, reconstruction_loss, LossWeighting,
};
use bisimlab::perception::{encoder_forward, Actions, ConvSpec, EncoderConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from 0 so ReLU kinks stay outside the stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let r = g.constant(randn(g.shape(out), seed ^ 0xabcdef));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

type Build = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var, TensorError>>;

fn case(params: &[(&str, Tensor)], build: Build) -> (ParameterSet, Build) {
    let mut p = ParameterSet::new();
    for (n, t) in params {
        p.insert(n, t.clone());
    }
    (p, build)
}

/// Every differentiable primitive, each wrapped in a scalar projection.
pub fn primitive_cases() -> Vec<(&'static str, ParameterSet, Build)> {
    let mut out: Vec<(&'static str, ParameterSet, Build)> = Vec::new();
    let mut push = |name: &'static str, (p, b): (ParameterSet, Build)| out.push((name, p, b));

    push("matmul", case(&[("a", randn(&[3, 4], 1)), ("b", randn(&[4, 2], 2))], Box::new(|g, p| {
        let y = g.matmul(p["a"], p["b"])?;
        project(g, y, 1)
    })));
    push("bmm", case(&[("a", randn(&[2, 3, 4], 3)), ("b", randn(&[2, 4, 2], 4))], Box::new(|g, p| {
        let y = g.bmm(p["a"], p["b"])?;
        project(g, y, 2)
    })));
    push("add_broadcast", case(&[("a", randn(&[3, 4], 5)), ("b", randn(&[4], 6))], Box::new(|g, p| {
        let y = g.add(p["a"], p["b"])?;
        project(g, y, 3)
    })));
    push("sub", case(&[("a", randn(&[2, 3], 7)), ("b", randn(&[2, 3], 8))], Box::new(|g, p| {
        let y = g.sub(p["a"], p["b"])?;
        project(g, y, 4)
    })));
    push("mul", case(&[("a", randn(&[2, 3], 9)), ("b", randn(&[2, 3], 10))], Box::new(|g, p| {
        let y = g.mul(p["a"], p["b"])?;
        project(g, y, 5)
    })));
    push("scale", case(&[("a", randn(&[5], 11))], Box::new(|g, p| {
        let y = g.scale(p["a"], -1.7);
        project(g, y, 6)
    })));
    push("relu", case(&[("a", away_from_zero(&[6], 12))], Box::new(|g, p| {
        let y = g.relu(p["a"]);
        project(g, y, 7)
    })));
    push("gelu", case(&[("a", randn(&[6], 13))], Box::new(|g, p| {
        let y = g.gelu(p["a"]);
        project(g, y, 8)
    })));
    push("conv2d", case(
        &[("x", randn(&[2, 2, 5, 5], 14)), ("w", randn(&[3, 2, 3, 3], 15)), ("b", randn(&[3], 16))],
        Box::new(|g, p| {
            let y = g.conv2d(p["x"], p["w"], Some(p["b"]), 2, 1)?;
            project(g, y, 9)
        }),
    ));
    push("layer_norm", case(
        &[("x", randn(&[3, 5], 17)), ("gain", randn(&[5], 18)), ("bias", randn(&[5], 19))],
        Box::new(|g, p| {
            let y = g.layer_norm(p["x"], p["gain"], p["bias"], 1e-5)?;
            project(g, y, 10)
        }),
    ));
    push("softmax_last", case(&[("x", randn(&[2, 3, 4], 20))], Box::new(|g, p| {
        let y = g.softmax(p["x"], 2)?;
        project(g, y, 11)
    })));
    push("softmax_first", case(&[("x", randn(&[3, 4], 21))], Box::new(|g, p| {
        let y = g.softmax(p["x"], 0)?;
        project(g, y, 12)
    })));
    push("embedding", case(&[("t", randn(&[4, 3], 22))], Box::new(|g, p| {
        let y = g.embedding(p["t"], &[2, 0, 2, 3, 2])?;
        project(g, y, 13)
    })));
    push("concat", case(&[("a", randn(&[2, 3], 23)), ("b", randn(&[2, 2], 24))], Box::new(|g, p| {
        let y = g.concat(&[p["a"], p["b"], p["a"]], 1)?;
        project(g, y, 14)
    })));
    push("slice", case(&[("x", randn(&[3, 5, 2], 25))], Box::new(|g, p| {
        let y = g.slice(p["x"], 1, 1, 4)?;
        project(g, y, 15)
    })));
    push("reshape", case(&[("x", randn(&[2, 6], 26))], Box::new(|g, p| {
        let y = g.reshape(p["x"], &[3, 2, 2])?;
        project(g, y, 16)
    })));
    push("transpose", case(&[("x", randn(&[2, 3, 4], 27))], Box::new(|g, p| {
        let y = g.transpose(p["x"])?;
        project(g, y, 17)
    })));
    push("sum", case(&[("x", randn(&[3, 3], 28))], Box::new(|g, p| {
        let sq = g.mul(p["x"], p["x"])?;
        Ok(g.sum(sq))
    })));
    push("mean", case(&[("x", randn(&[3, 3], 29))], Box::new(|g, p| {
        let sq = g.mul(p["x"], p["x"])?;
        Ok(g.mean(sq))
    })));
    push("mse", case(&[("a", randn(&[4, 2], 30)), ("b", randn(&[4, 2], 31))], Box::new(|g, p| {
        g.mse(p["a"], p["b"])
    })));
    push("cosine_distance", case(&[("a", randn(&[4, 3], 32)), ("b", randn(&[4, 3], 33))], Box::new(|g, p| {
        let y = g.cosine_distance_batch(p["a"], p["b"])?;
        project(g, y, 18)
    })));
    out
}

pub fn check_primitives() -> Vec<(&'static str, GradCheckReport)> {
    primitive_cases()
        .into_iter()
        .map(|(name, p, build)| {
            let r = grad_check(build, &p, FD_STEP, PRIMITIVE_TOL, usize::MAX, 0).expect(name);
            (name, r)
        })
        .collect()
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 3,
        frame_size: 12,
        convs: vec![
            ConvSpec { channels: 4, kernel: 4, stride: 2 },
            ConvSpec { channels: 4, kernel: 3, stride: 1 },
        ],
        latent_dim: 6,
    }
}

pub fn small_transformer() -> TransformerConfig {
    TransformerConfig {
        d_model: 6,
        layers: 2,
        heads: 2,
        ff_width: 8,
        max_steps: 4,
        relative_bias: true,
        action_space: ActionSpace::Discrete { n_actions: 3 },
    }
}

/// Encoder, transformer and both losses on one graph.
pub fn check_composed(weighting: LossWeighting) -> GradCheckReport {
    let (b, k) = (3, 4);
    let enc = small_encoder();
    let tf = small_transformer();
    let mut params = enc.init(1).unwrap();
    params.extend(tf.init(2).unwrap()).unwrap();
    let frames = Tensor::randn(&[b * k, 3, 12, 12], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).map(|v| v.abs().min(1.0));
    let targets = randn(&[b, k, 6], 4);
    let actions: Vec<Actions> = (0..b).map(|i| Actions::Discrete((0..k).map(|t| (i + t) % 3).collect())).collect();
    let rewards: Vec<Vec<f64>> = (0..b).map(|i| (0..k).map(|t| ((i * k + t) % 5) as f64 / 4.0).collect()).collect();
    let partners = vec![1, 2, 0];
    let forward = move |g: &mut Graph, p: &Bound| -> Result<(Var, Var), TensorError> {
        let x = g.constant(frames.clone());
        let z = encoder_forward(g, p, &enc, x)?;
        let states = g.reshape(z, &[b, k, 6])?;
        let acts = embed_actions(g, p, &tf, &actions)?;
        Ok((states, forward_dynamics(g, p, &tf, states, acts)?))
    };
    // The behavior target is a stop-gradient quantity, so it is frozen at the
    // unperturbed parameters; otherwise the differences would move it too.
    let mut g0 = Graph::new();
    let b0 = g0.bind(&params, false);
    let (_, pred0) = forward(&mut g0, &b0).unwrap();
    let frozen = behavior_targets(g0.value(pred0), &rewards, &partners, 0.9).unwrap();
    let f = move |g: &mut Graph, p: &Bound| -> Result<Var, TensorError> {
        let (states, pred) = forward(g, p)?;
        let beh = behavior_loss_with_targets(g, states, &frozen, &partners)?;
        let rec = reconstruction_loss(g, &targets, pred)?;
        combine_losses(g, beh, rec, 0.5, weighting)
    };
    grad_check(f, &params, FD_STEP, COMPOSED_TOL, 400, 11).unwrap()
}

/// Minimum transport cost over every basic feasible solution of the
/// transport polytope between `a` (rows) and `b` (columns). Each basis is a
/// spanning tree of `m + n − 1` cells, solved by peeling leaves.
pub fn brute_force_w1(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (m, n) = (a.len(), b.len());
    assert!(m * n <= 16, "brute force limited to 16 cells");
    let need = m + n - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << (m * n)) {
        if mask.count_ones() as usize != need {
            continue;
        }
        let mut open: Vec<(usize, usize)> = (0..m * n)
            .filter(|c| mask >> c & 1 == 1)
            .map(|c| (c / n, c % n))
            .collect();
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let mut total = 0.0;
        let mut feasible = true;
        while !open.is_empty() {
            let leaf = (0..m)
                .find_map(|i| {
                    let cells: Vec<usize> = (0..open.len()).filter(|&c| open[c].0 == i).collect();
                    (cells.len() == 1).then(|| (cells[0], true))
                })
                .or_else(|| {
                    (0..n).find_map(|j| {
                        let cells: Vec<usize> = (0..open.len()).filter(|&c| open[c].1 == j).collect();
                        (cells.len() == 1).then(|| (cells[0], false))
                    })
                });
            let Some((c, by_row)) = leaf else {
                feasible = false;
                break;
            };
            let (i, j) = open.swap_remove(c);
            let x = if by_row { ra[i] } else { rb[j] };
            if x < -1e-12 {
                feasible = false;
                break;
            }
            ra[i] -= x;
            rb[j] -= x;
            total += x * cost[i][j];
        }
        let balanced = ra.iter().chain(&rb).all(|r| r.abs() < 1e-12);
        if feasible && balanced {
            best = best.min(total);
        }
    }
    best
}
