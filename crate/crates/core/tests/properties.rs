mod common;

use bisimlab::autodiff::{ParameterSet, Tensor};
use bisimlab::envs::stats::spearman;
use bisimlab::erank::erank;
use bisimlab::mdp::{make_random_mdp, Policy};
use bisimlab::metric::{solve_fixed_point, wasserstein1, MetricMatrix};
use bisimlab::perception::{generate_mask, CubeMask, CubeShape};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::option::weighted(0.5, 0.05f64..1.0), n).prop_filter_map("empty support", |w| {
        let total: f64 = w.iter().flatten().sum();
        (total > 0.0 && w.iter().flatten().count() <= 4)
            .then(|| w.iter().map(|v| v.unwrap_or(0.0) / total).collect())
    })
}

fn ground(n: usize) -> impl Strategy<Value = MetricMatrix> {
    prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), n).prop_map(move |pts| {
        MetricMatrix::from_upper(n, |i, j| (pts[i].0 - pts[j].0).abs() + (pts[i].1 - pts[j].1).abs())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wasserstein_matches_enumeration(mu in distribution(6), nu in distribution(6), d in ground(6)) {
        let rows: Vec<usize> = (0..6).filter(|&i| mu[i] > 0.0).collect();
        let cols: Vec<usize> = (0..6).filter(|&j| nu[j] > 0.0).collect();
        let cost: Vec<Vec<f64>> = rows.iter().map(|&i| cols.iter().map(|&j| d.get(i, j)).collect()).collect();
        let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
        let b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
        let oracle = common::brute_force_w1(&a, &b, &cost);
        let got = wasserstein1(&mu, &nu, &d).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-10, "{got} vs {oracle}");
        let back = wasserstein1(&nu, &mu, &d).unwrap();
        prop_assert!((got - back).abs() <= 1e-12);
        prop_assert!(wasserstein1(&mu, &mu, &d).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn fixed_point_is_a_pseudometric(seed in 0u64..1000, n in 2usize..6, a in 1usize..4) {
        let mdp = make_random_mdp(n, a, (0.0, 1.0), 0.8, seed).unwrap();
        let r = solve_fixed_point(&mdp, &Policy::uniform(n, a), 1e-10, 10_000).unwrap();
        let d = &r.metric;
        for i in 0..n {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..n {
                    prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-9);
                }
            }
        }
        prop_assert!(r.diameter <= r.diameter_bound + 1e-9);
    }

    #[test]
    fn erank_invariances(diag in prop::collection::vec(0.01f64..5.0, 4), angle in 0.0f64..std::f64::consts::TAU, scale in 0.01f64..100.0) {
        let c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag));
        let base = erank(&c).unwrap().erank;
        prop_assert!(base >= 0.0 && base <= 4f64.ln() + 1e-12);
        prop_assert!((erank(&(&c * scale)).unwrap().erank - base).abs() <= 1e-12);
        let (s, co) = angle.sin_cos();
        let mut q = DMatrix::<f64>::identity(4, 4);
        q[(0, 0)] = co;
        q[(0, 2)] = -s;
        q[(2, 0)] = s;
        q[(2, 2)] = co;
        let rotated = &q * &c * q.transpose();
        let rotated = (&rotated + rotated.transpose()) * 0.5;
        prop_assert!((erank(&rotated).unwrap().erank - base).abs() <= 1e-12);
    }

    #[test]
    fn mask_fraction_within_one_cube(k in 4usize..12, size in 10usize..30, eta in 0.05f64..0.9, seed in 0u64..1000) {
        let cube = CubeShape::new(2, 3, 4);
        let m = generate_mask(k, size, size, eta, cube, seed).unwrap();
        let slack = cube.volume() as f64 / (k * size * size) as f64;
        prop_assert!(m.masked_fraction() >= eta);
        prop_assert!(m.masked_fraction() - eta <= slack);
        let mut bytes = Vec::new();
        m.write_bitset(&mut bytes).unwrap();
        let (kk, hh, ww, bits) = CubeMask::read_bitset(bytes.as_slice()).unwrap();
        prop_assert_eq!((kk, hh, ww), (k, size, size));
        prop_assert_eq!(bits.as_slice(), m.bits());
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..40), split in 1usize..6) {
        let mut p = ParameterSet::new();
        p.insert("a/weight", Tensor::from_vec(values.clone()));
        let rows = values.len().div_ceil(split);
        let padded: Vec<f64> = values.iter().copied().chain(std::iter::repeat(0.5)).take(rows * split).collect();
        p.insert("b", Tensor::new(vec![rows, split], padded).unwrap());
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        let back = ParameterSet::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &p);
        bytes.push(0);
        prop_assert!(ParameterSet::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn spearman_ignores_monotone_maps(x in prop::collection::vec(-10.0f64..10.0, 3..30)) {
        let y: Vec<f64> = x.iter().map(|v| v * v * v + 2.0 * v).collect();
        let s = spearman(&x, &y);
        let distinct = x.iter().any(|v| *v != x[0]);
        if distinct {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
