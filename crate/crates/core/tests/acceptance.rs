//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::time::Instant;

use bisimlab::autodiff::{Graph, ParameterSet, Tensor};
use bisimlab::certify::{
    check_collapse, check_contraction, check_diameter, check_erank_improvement, check_filter, check_gap,
};
use bisimlab::envs::eval::compare_alignment;
use bisimlab::envs::{initial_models, median_pairwise_distance, train, RunConfig};
use bisimlab::erank::erank;
use bisimlab::mdp::{make_random_mdp, Policy, RewardKind};
use bisimlab::metric::{diameter_bound, solve_fixed_point, wasserstein1, MetricMatrix};
use bisimlab::objective::LossWeighting;
use bisimlab::perception::{generate_mask, CubeShape, SiameseEncoderPair};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];
const W1_TOL: f64 = 1e-10;
const COLLAPSE_TOL: f64 = 1e-9;
const SIGNIFICANCE: f64 = 0.05;
const COLLAPSE_MEDIAN: f64 = 0.01;
/// Fraction of `ln(min(B·K, d))` the full objective's batch-latent erank must keep.
const ERANK_FLOOR_FRACTION: f64 = 0.25;
/// Trailing steps averaged for the batch-latent erank.
const ERANK_WINDOW: usize = 100;
const TRAIN_STEPS: usize = 2000;

type Outcome = Result<(bool, String), String>;

fn contraction() -> Outcome {
    let c = check_contraction(50, &GAMMAS, 0).map_err(|e| e.to_string())?;
    Ok((c.passed, c.detail))
}

fn diameter() -> Outcome {
    let c = check_diameter(50, &GAMMAS, 0).map_err(|e| e.to_string())?;
    let spot = diameter_bound(0.0, 1.0, 0.99);
    let spot_ok = (spot - 100.0).abs() < 1e-9;
    Ok((c.passed && spot_ok, format!("{}; bound(γ=0.99, range 1) = {spot}", c.detail)))
}

fn gap() -> Outcome {
    let c = check_gap(5, 20, 0).map_err(|e| e.to_string())?;
    Ok((c.passed, c.detail))
}

fn collapse() -> Outcome {
    let c = check_collapse(20, 0).map_err(|e| e.to_string())?;
    let mut worst_iter = 0;
    for i in 0..20 {
        let mdp = make_random_mdp(3 + i % 6, 1 + i % 3, (0.0, 0.0), 0.99, 500 + i as u64).map_err(|e| e.to_string())?;
        let r = solve_fixed_point(&mdp, &Policy::uniform(mdp.n_states(), mdp.n_actions()), COLLAPSE_TOL, 2)
            .map_err(|e| e.to_string())?;
        if r.diameter > COLLAPSE_TOL {
            return Ok((false, format!("zero-reward MDP {i} has entry {}", r.diameter)));
        }
        worst_iter = worst_iter.max(r.iterations);
    }
    Ok((c.passed && worst_iter <= 2, format!("{}; at most {worst_iter} iterations", c.detail)))
}

fn wasserstein_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 8;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let ground = MetricMatrix::from_upper(n, |i, j| {
            ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
        });
        let draw = |rng: &mut ChaCha8Rng| {
            let size = rng.random_range(1..=4);
            let support = rand::seq::index::sample(rng, n, size).into_vec();
            let w: Vec<f64> = (0..size).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            let mut full = vec![0.0; n];
            for (s, v) in support.iter().zip(&w) {
                full[*s] = v / total;
            }
            full
        };
        let (mu, nu) = (draw(&mut rng), draw(&mut rng));
        let rows: Vec<usize> = (0..n).filter(|&i| mu[i] > 0.0).collect();
        let cols: Vec<usize> = (0..n).filter(|&j| nu[j] > 0.0).collect();
        let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
        let b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
        let cost: Vec<Vec<f64>> = rows.iter().map(|&i| cols.iter().map(|&j| ground.get(i, j)).collect()).collect();
        let oracle = common::brute_force_w1(&a, &b, &cost);
        let got = wasserstein1(&mu, &nu, &ground).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs());
    }
    Ok((worst <= W1_TOL, format!("200 cases, max |W1 − enumeration| = {worst:.2e}")))
}

fn gradients() -> Outcome {
    let prims = common::check_primitives();
    let worst = prims
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(n, r)| (n.to_string(), r.max_rel_error))
        .unwrap();
    let prim_ok = prims.iter().all(|(_, r)| r.passed);
    let composed: Vec<_> = [LossWeighting::ReconstructionFirst, LossWeighting::BehaviorFirst]
        .into_iter()
        .map(common::check_composed)
        .collect();
    let comp_ok = composed.iter().all(|r| r.passed);
    let comp_worst = composed.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok((
        prim_ok && comp_ok,
        format!(
            "{} primitives, worst {} rel {:.2e} (tol {:.0e}); composed rel {comp_worst:.2e} (tol {:.0e})",
            prims.len(),
            worst.0,
            worst.1,
            common::PRIMITIVE_TOL,
            common::COMPOSED_TOL
        ),
    ))
}

fn masking() -> Outcome {
    let k = 16;
    let shapes = [(84, CubeShape::new(8, 12, 12)), (48, CubeShape::new(8, 7, 7))];
    let mut worst_margin = f64::NEG_INFINITY;
    let mut ok = true;
    for (size, cube) in shapes {
        let slack = cube.volume() as f64 / (k * size * size) as f64;
        for eta in [0.3, 0.5, 0.7] {
            for seed in 0..5 {
                let m = generate_mask(k, size, size, eta, cube, seed).map_err(|e| e.to_string())?;
                let again = generate_mask(k, size, size, eta, cube, seed).map_err(|e| e.to_string())?;
                let dev = (m.masked_fraction() - eta).abs();
                ok &= dev <= slack && m.bits() == again.bits();
                worst_margin = worst_margin.max(dev - slack);
            }
        }
    }
    Ok((ok, format!("30 masks, max(|achieved − η| − cube/volume) = {worst_margin:.4}; reproducible")))
}

fn ema() -> Outcome {
    let cfg = common::small_encoder();
    let ones = {
        let mut p = cfg.init(0).map_err(|e| e.to_string())?;
        p.iter_mut().for_each(|(_, t)| t.data_mut().fill(1.0));
        p
    };
    let zeros = {
        let mut p = ones.clone();
        p.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        p
    };
    let mut pair = SiameseEncoderPair::from_parts(cfg.clone(), ones, zeros, 0.5).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        pair.ema_update();
    }
    let exact = pair.momentum.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.875));

    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3, 12, 12], 0.5));
    pair.encode(&mut g, x, true).map_err(|e| e.to_string())?;
    let after_momentum = g.grad_leaves();
    pair.encode(&mut g, x, false).map_err(|e| e.to_string())?;
    let leaves = g.grad_leaves();
    let online: Vec<String> = pair.online.names().map(str::to_string).collect();
    let structural = after_momentum.is_empty() && leaves == online;
    Ok((
        exact && structural,
        format!(
            "3 steps give 0.875 exactly: {exact}; gradient leaves are exactly the {} online tensors: {structural}",
            online.len()
        ),
    ))
}

fn erank_improvement() -> Outcome {
    let anchor = erank(&DMatrix::<f64>::identity(4, 4)).map_err(|e| e.to_string())?.erank;
    let anchor_ok = (anchor - 4f64.ln()).abs() < 1e-12;
    let c = check_erank_improvement(0).map_err(|e| e.to_string())?;
    Ok((c.passed && anchor_ok, format!("erank(I_4) = {anchor:.4}; {}", c.detail)))
}

fn filter() -> Outcome {
    let c = check_filter(0).map_err(|e| e.to_string())?;
    Ok((c.passed, format!("{} (tol {:.0e} on the sqrt(d/(d+σ)) form)", c.detail, bisimlab::certify::FILTER_TOL)))
}

fn collapse_vs_rescue() -> Outcome {
    let mut base = RunConfig::small(10, 10, RewardKind::SparseGoal);
    base.train_steps = TRAIN_STEPS;
    let mut behavior_only = base.clone();
    behavior_only.weighting = LossWeighting::BehaviorFirst;
    behavior_only.beta = 0.0;
    let collapsed = train(&behavior_only, None).map_err(|e| e.to_string())?;
    let median = median_pairwise_distance(&collapsed.pair, &base.env).map_err(|e| e.to_string())?;

    let full = train(&base, None).map_err(|e| e.to_string())?;
    let tail = |rows: &[bisimlab::envs::MetricsRow]| {
        let t = &rows[rows.len().saturating_sub(ERANK_WINDOW)..];
        t.iter().map(|r| r.latent_erank).sum::<f64>() / t.len() as f64
    };
    let floor = ERANK_FLOOR_FRACTION * ((base.batch_size * base.seq_len).min(base.encoder.latent_dim) as f64).ln();
    let full_erank = tail(&full.metrics);
    let beh_erank = tail(&collapsed.metrics);
    Ok((
        median < COLLAPSE_MEDIAN && full_erank >= floor,
        format!(
            "behavior-only median cosine distance {median:.4} (need < {COLLAPSE_MEDIAN}); full-objective erank {full_erank:.3} vs floor {floor:.3} (behavior-only erank {beh_erank:.3})"
        ),
    ))
}

fn alignment() -> Outcome {
    let mut c = RunConfig::small(10, 10, RewardKind::DenseDistance);
    c.train_steps = TRAIN_STEPS;
    let out = train(&c, None).map_err(|e| e.to_string())?;
    let (untrained, _) = initial_models(&c).map_err(|e| e.to_string())?;
    let cmp = compare_alignment(&out.pair, &untrained, &c.env, 500, 999, 1).map_err(|e| e.to_string())?;
    Ok((
        cmp.significant(SIGNIFICANCE),
        format!(
            "Spearman trained {:.3} vs untrained {:.3} on {} pairs, permutation p = {:.4}",
            cmp.trained.spearman, cmp.untrained.spearman, cmp.trained.n_pairs, cmp.test.p_value
        ),
    ))
}

fn determinism() -> Outcome {
    let mut c = RunConfig::small(5, 5, RewardKind::DenseDistance);
    c.train_steps = 20;
    c.min_replay = 100;
    c.checkpoint_every = 10;
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        train(&c, Some(d.path())).map_err(|e| e.to_string())?;
    }
    let files = ["config.json", "metrics.csv", "final.ckpt", "checkpoints/step_10.ckpt", "checkpoints/step_20.ckpt"];
    let mut same = true;
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        same &= a == b;
    }
    let reloaded = ParameterSet::load(&dirs[0].path().join("final.ckpt")).map_err(|e| e.to_string())?;
    Ok((same && reloaded.all_finite(), format!("{} artifacts byte-identical across two runs: {same}", files.len())))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("contraction", contraction),
        ("diameter bound", diameter),
        ("gap bound", gap),
        ("zero-reward collapse", collapse),
        ("wasserstein oracle", wasserstein_oracle),
        ("gradients", gradients),
        ("masking contract", masking),
        ("ema", ema),
        ("erank improvement", erank_improvement),
        ("low-pass filter", filter),
        ("collapse vs rescue", collapse_vs_rescue),
        ("alignment", alignment),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = match std::panic::catch_unwind(run) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        failed += usize::from(!ok);
        println!(
            "{:>2}. {} {name}: {detail} [{:.1}s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
