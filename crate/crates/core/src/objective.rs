//! Behavior (bisimulation) loss, latent reconstruction loss and their
//! weighted combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::metric::cosine_distance;

/// Random cyclic permutation (Sattolo) of `0..n`: no element is its own
/// partner. Requires `n ≥ 2`.
pub fn sample_partners(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>, TensorError> {
    if n < 2 {
        return Err(TensorError::Invalid(format!("pairing needs at least 2 sequences, got {n}")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// Stop-gradient behavior targets `|r_i,t − r_j,t| + γ·d̄(ŝ_i,t+1, ŝ_j,t+1)` for
/// `t = 0..K−1`, flattened `[B·(K−1)]` in `(batch, step)` order.
pub fn behavior_targets(
    predicted: &Tensor,
    rewards: &[Vec<f64>],
    partners: &[usize],
    gamma: f64,
) -> Result<Vec<f64>, TensorError> {
    let s = predicted.shape();
    if s.len() != 3 || rewards.len() != s[0] || partners.len() != s[0] {
        return Err(TensorError::Shape(format!(
            "predictions {s:?}, {} reward rows, {} partners",
            rewards.len(),
            partners.len()
        )));
    }
    let (b, k, d) = (s[0], s[1], s[2]);
    if rewards.iter().any(|r| r.len() != k) {
        return Err(TensorError::Shape(format!("reward rows must have length {k}")));
    }
    let at = |i: usize, t: usize| &predicted.data()[(i * k + t) * d..(i * k + t + 1) * d];
    let mut out = Vec::with_capacity(b * (k - 1));
    for i in 0..b {
        let j = partners[i];
        for t in 0..k - 1 {
            let succ = cosine_distance(at(i, t + 1), at(j, t + 1))
                .map_err(|e| TensorError::Invalid(e.to_string()))?;
            out.push((rewards[i][t] - rewards[j][t]).abs() + gamma * succ);
        }
    }
    Ok(out)
}

/// Mean squared gap between current cosine distances of `latents[B][K][d]`
/// (online, masked inputs) and the constant operator targets built from the
/// transformer outputs `predicted[B][K][d]`.
pub fn behavior_loss(
    g: &mut Graph,
    latents: Var,
    predicted: Var,
    rewards: &[Vec<f64>],
    partners: &[usize],
    gamma: f64,
) -> Result<Var, TensorError> {
    let s = g.shape(latents).to_vec();
    if s.len() != 3 || g.shape(predicted) != s.as_slice() {
        return Err(TensorError::Shape(format!(
            "latents {s:?} and predictions {:?} must both be [B, K, d]",
            g.shape(predicted)
        )));
    }
    if s[1] < 2 {
        return Err(TensorError::Invalid("behavior loss needs K ≥ 2".into()));
    }
    let targets = behavior_targets(g.value(predicted), rewards, partners, gamma)?;
    behavior_loss_with_targets(g, latents, &targets, partners)
}

/// [`behavior_loss`] against precomputed targets from [`behavior_targets`].
pub fn behavior_loss_with_targets(
    g: &mut Graph,
    latents: Var,
    targets: &[f64],
    partners: &[usize],
) -> Result<Var, TensorError> {
    let s = g.shape(latents).to_vec();
    if s.len() != 3 || s[1] < 2 || partners.len() != s[0] || targets.len() != s[0] * (s[1] - 1) {
        return Err(TensorError::Shape(format!(
            "latents {s:?}, {} partners, {} targets",
            partners.len(),
            targets.len()
        )));
    }
    let (b, k, d) = (s[0], s[1], s[2]);
    let rows = g.reshape(latents, &[b, k * d])?;
    let paired = g.embedding(rows, partners)?;
    let mut sides = [latents, paired];
    for v in &mut sides {
        let full = g.reshape(*v, &[b, k, d])?;
        let head = g.slice(full, 1, 0, k - 1)?;
        *v = g.reshape(head, &[b * (k - 1), d])?;
    }
    let current = g.cosine_distance_batch(sides[0], sides[1])?;
    let target = g.constant(Tensor::new(vec![b * (k - 1)], targets.to_vec())?);
    g.mse(current, target)
}

/// MSE between transformer outputs and constant momentum-encoder latents of
/// the unmasked frames, both `[B][K][d]`.
pub fn reconstruction_loss(g: &mut Graph, targets: &Tensor, predicted: Var) -> Result<Var, TensorError> {
    if targets.shape() != g.shape(predicted) {
        return Err(TensorError::Shape(format!(
            "reconstruction targets {:?} vs predictions {:?}",
            targets.shape(),
            g.shape(predicted)
        )));
    }
    let t = g.constant(targets.clone());
    g.mse(predicted, t)
}

/// Which term the weight `β` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// `L_rec + β·L_behavior`.
    #[default]
    ReconstructionFirst,
    /// `L_behavior + β·L_rec`.
    BehaviorFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_behavior: f64,
    pub l_reconstruction: f64,
    pub beta: f64,
    pub weighting: LossWeighting,
    pub l_total: f64,
}

pub fn total_loss(
    l_behavior: f64,
    l_reconstruction: f64,
    beta: f64,
    weighting: LossWeighting,
) -> Result<LossBreakdown, TensorError> {
    if !(beta >= 0.0) {
        return Err(TensorError::Invalid(format!("beta {beta} must be non-negative")));
    }
    let l_total = match weighting {
        LossWeighting::ReconstructionFirst => l_reconstruction + beta * l_behavior,
        LossWeighting::BehaviorFirst => l_behavior + beta * l_reconstruction,
    };
    Ok(LossBreakdown {
        l_behavior,
        l_reconstruction,
        beta,
        weighting,
        l_total,
    })
}

/// Records the weighted sum on the graph.
pub fn combine_losses(
    g: &mut Graph,
    behavior: Var,
    reconstruction: Var,
    beta: f64,
    weighting: LossWeighting,
) -> Result<Var, TensorError> {
    let (main, weighted) = match weighting {
        LossWeighting::ReconstructionFirst => (reconstruction, behavior),
        LossWeighting::BehaviorFirst => (behavior, reconstruction),
    };
    let w = g.scale(weighted, beta);
    g.add(main, w)
}

/// Min-max reward scaling to `[0, 1]` over the rewards seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub min: f64,
    pub max: f64,
}

impl RewardNormalizer {
    pub fn fit<'a>(rewards: impl IntoIterator<Item = &'a f64>) -> Option<Self> {
        rewards.into_iter().fold(None, |acc, &r| match acc {
            None => Some(RewardNormalizer { min: r, max: r }),
            Some(n) => Some(RewardNormalizer {
                min: n.min.min(r),
                max: n.max.max(r),
            }),
        })
    }

    /// Constant reward streams map to 0.
    pub fn normalize(&self, r: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            ((r - self.min) / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partners_form_derangement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 2..20 {
            let p = sample_partners(n, &mut rng).unwrap();
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, j)| i != *j));
        }
        assert!(sample_partners(1, &mut rng).is_err());
    }

    fn pair_loss(current: [[f64; 2]; 2], succ: [[f64; 2]; 2], rewards: [f64; 2]) -> f64 {
        // B = 2, K = 2, d = 2; only t = 0 contributes.
        let mut g = Graph::new();
        let z = g.constant(
            Tensor::new(vec![2, 2, 2], vec![current[0][0], current[0][1], 1.0, 0.0, current[1][0], current[1][1], 1.0, 0.0])
                .unwrap(),
        );
        let p = g.constant(
            Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, succ[0][0], succ[0][1], 1.0, 0.0, succ[1][0], succ[1][1]]).unwrap(),
        );
        let r = vec![vec![rewards[0], 0.0], vec![rewards[1], 0.0]];
        let loss = behavior_loss(&mut g, z, p, &r, &[1, 0], 0.9).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn identical_pair_contributes_nothing() {
        assert_eq!(pair_loss([[1.0, 2.0], [1.0, 2.0]], [[0.5, 0.5], [0.5, 0.5]], [0.3, 0.3]), 0.0);
    }

    #[test]
    fn hand_evaluated_pairs() {
        // Successors coincide, rewards 0 and 1: target 1.
        let succ = [[1.0, 1.0], [1.0, 1.0]];
        assert!(pair_loss([[1.0, 0.0], [0.0, 1.0]], succ, [0.0, 1.0]).abs() < 1e-15);
        assert!((pair_loss([[1.0, 0.0], [1.0, 0.0]], succ, [0.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_cases() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::full(&[1, 1, 2], 1.0));
        let loss = reconstruction_loss(&mut g, &Tensor::zeros(&[1, 1, 2]), pred).unwrap();
        assert_eq!(g.value(loss).item(), 1.0);
        let same = reconstruction_loss(&mut g, &Tensor::full(&[1, 1, 2], 1.0), pred).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        assert!(reconstruction_loss(&mut g, &Tensor::zeros(&[1, 2, 1]), pred).is_err());
    }

    #[test]
    fn weighting_conventions() {
        let eq = total_loss(1.0, 2.0, 0.5, LossWeighting::BehaviorFirst).unwrap();
        assert_eq!(eq.l_total, 2.0);
        let alg = total_loss(1.0, 2.0, 0.5, LossWeighting::ReconstructionFirst).unwrap();
        assert_eq!(alg.l_total, 2.5);
        assert_eq!(total_loss(1.0, 2.0, 0.0, LossWeighting::BehaviorFirst).unwrap().l_total, 1.0);
        assert!(total_loss(1.0, 2.0, -0.1, LossWeighting::BehaviorFirst).is_err());
    }

    #[test]
    fn normalizer_maps_to_unit_interval() {
        let n = RewardNormalizer::fit(&[2.0, -1.0, 5.0]).unwrap();
        assert_eq!(n.normalize(-1.0), 0.0);
        assert_eq!(n.normalize(5.0), 1.0);
        assert_eq!(n.normalize(2.0), 0.5);
        assert_eq!(RewardNormalizer::fit(&[3.0, 3.0]).unwrap().normalize(3.0), 0.0);
    }
}
