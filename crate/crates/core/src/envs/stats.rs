//! Rank statistics and a paired permutation test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson needs equal lengths");
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    /// `spearman(reference, a) − spearman(reference, b)`.
    pub observed: f64,
    pub p_value: f64,
    pub n_perm: usize,
}

/// One-sided paired test that `a` tracks `reference` better than `b` does.
///
/// Each permutation swaps `a_i` and `b_i` independently with probability ½;
/// the p-value is `(1 + #{perm ≥ observed}) / (1 + n_perm)`.
pub fn paired_permutation_test(
    reference: &[f64],
    a: &[f64],
    b: &[f64],
    n_perm: usize,
    seed: u64,
) -> PermutationReport {
    assert!(reference.len() == a.len() && a.len() == b.len(), "paired inputs differ in length");
    let observed = spearman(reference, a) - spearman(reference, b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pa = a.to_vec();
    let mut pb = b.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        for i in 0..a.len() {
            if rng.random::<bool>() {
                pa[i] = b[i];
                pb[i] = a[i];
            } else {
                pa[i] = a[i];
                pb[i] = b[i];
            }
        }
        if spearman(reference, &pa) - spearman(reference, &pb) >= observed {
            hits += 1;
        }
    }
    PermutationReport {
        observed,
        p_value: (1 + hits) as f64 / (1 + n_perm) as f64,
        n_perm,
    }
}
