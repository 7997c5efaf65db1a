//! Pre-norm transformer over interleaved state/action tokens.
//!
//! Tokens are laid out as `(s_0, a_0, s_1, a_1, …)`, attention is
//! bidirectional, and relative position enters as a learned additive bias on
//! the attention logits indexed by the offset `j − i`. Outputs are read back
//! at the state positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParameterSet, Tensor, TensorError, Var};
use crate::perception::Actions;

pub const PREFIX: &str = "dynamics/";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionSpace {
    Discrete { n_actions: usize },
    Continuous { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Longest window `K` the positional table covers.
    pub max_steps: usize,
    pub relative_bias: bool,
    pub action_space: ActionSpace,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 50,
            layers: 2,
            heads: 1,
            ff_width: 128,
            max_steps: 16,
            relative_bias: true,
            action_space: ActionSpace::Discrete { n_actions: 4 },
        }
    }
}

fn name(suffix: &str) -> String {
    format!("{PREFIX}{suffix}")
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.d_model == 0 || self.heads == 0 || self.ff_width == 0 || self.max_steps == 0 {
            return Err(TensorError::Invalid("transformer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(TensorError::Invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        match self.action_space {
            ActionSpace::Discrete { n_actions: 0 } | ActionSpace::Continuous { dim: 0 } => {
                Err(TensorError::Invalid("empty action space".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of relative offsets, `2·(2K) − 1`.
    pub fn offsets(&self) -> usize {
        4 * self.max_steps - 1
    }

    pub fn init(&self, seed: u64) -> Result<ParameterSet, TensorError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.d_model;
        let mut p = ParameterSet::new();
        let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        match self.action_space {
            ActionSpace::Discrete { n_actions } => {
                p.insert(&name("action/embedding"), Tensor::randn(&[n_actions, d], 1.0, &mut rng));
            }
            ActionSpace::Continuous { dim } => {
                p.insert(&name("action/weight"), Tensor::randn(&[dim, d], std(dim), &mut rng));
                p.insert(&name("action/bias"), Tensor::zeros(&[d]));
            }
        }
        for l in 0..self.layers {
            let pre = format!("layer{l}/");
            for ln in ["ln1", "ln2"] {
                p.insert(&name(&format!("{pre}{ln}/gain")), Tensor::full(&[d], 1.0));
                p.insert(&name(&format!("{pre}{ln}/bias")), Tensor::zeros(&[d]));
            }
            for proj in ["q", "k", "v", "o"] {
                p.insert(&name(&format!("{pre}attn/w{proj}")), Tensor::randn(&[d, d], std(d), &mut rng));
                p.insert(&name(&format!("{pre}attn/b{proj}")), Tensor::zeros(&[d]));
            }
            if self.relative_bias {
                p.insert(
                    &name(&format!("{pre}attn/rel_bias")),
                    Tensor::randn(&[self.offsets(), self.heads], 0.1, &mut rng),
                );
            }
            p.insert(&name(&format!("{pre}ff/w1")), Tensor::randn(&[d, self.ff_width], std(d), &mut rng));
            p.insert(&name(&format!("{pre}ff/b1")), Tensor::zeros(&[self.ff_width]));
            p.insert(
                &name(&format!("{pre}ff/w2")),
                Tensor::randn(&[self.ff_width, d], std(self.ff_width), &mut rng),
            );
            p.insert(&name(&format!("{pre}ff/b2")), Tensor::zeros(&[d]));
        }
        Ok(p)
    }
}

/// Action tokens `[B][K][d]` for a batch of `B` action sequences of length `K`.
pub fn embed_actions(
    g: &mut Graph,
    params: &Bound,
    config: &TransformerConfig,
    actions: &[Actions],
) -> Result<Var, TensorError> {
    let b = actions.len();
    let k = actions.first().map_or(0, Actions::len);
    if b == 0 || k == 0 || actions.iter().any(|a| a.len() != k) {
        return Err(TensorError::Shape("action batch must be non-empty and rectangular".into()));
    }
    let d = config.d_model;
    let flat = match config.action_space {
        ActionSpace::Discrete { n_actions } => {
            let mut idx = Vec::with_capacity(b * k);
            for a in actions {
                let Actions::Discrete(a) = a else {
                    return Err(TensorError::Invalid("expected discrete actions".into()));
                };
                if let Some(bad) = a.iter().find(|&&i| i >= n_actions) {
                    return Err(TensorError::Invalid(format!(
                        "action {bad} out of range for {n_actions} actions"
                    )));
                }
                idx.extend_from_slice(a);
            }
            g.embedding(params[name("action/embedding").as_str()], &idx)?
        }
        ActionSpace::Continuous { dim } => {
            let mut rows = Vec::with_capacity(b * k * dim);
            for a in actions {
                let Actions::Continuous(a) = a else {
                    return Err(TensorError::Invalid("expected continuous actions".into()));
                };
                for v in a {
                    if v.len() != dim {
                        return Err(TensorError::Shape(format!(
                            "action vector of length {} for dimension {dim}",
                            v.len()
                        )));
                    }
                    rows.extend_from_slice(v);
                }
            }
            let x = g.constant(Tensor::new(vec![b * k, dim], rows)?);
            let y = g.matmul(x, params[name("action/weight").as_str()])?;
            g.add(y, params[name("action/bias").as_str()])?
        }
    };
    g.reshape(flat, &[b, k, d])
}

/// Maps state tokens `[B][K][d]` and action tokens `[B][K][d]` to the
/// outputs at the state positions, `[B][K][d]`.
pub fn forward_dynamics(
    g: &mut Graph,
    params: &Bound,
    config: &TransformerConfig,
    states: Var,
    actions: Var,
) -> Result<Var, TensorError> {
    let s = g.shape(states).to_vec();
    if s.len() != 3 || s[2] != config.d_model || g.shape(actions) != s.as_slice() {
        return Err(TensorError::Shape(format!(
            "state tokens {s:?} and action tokens {:?} must both be [B, K, {}]",
            g.shape(actions),
            config.d_model
        )));
    }
    let (b, k, d) = (s[0], s[1], s[2]);
    if k > config.max_steps {
        return Err(TensorError::Shape(format!(
            "window of {k} steps exceeds max_steps {}",
            config.max_steps
        )));
    }
    let t = 2 * k;
    let pairs = g.concat(&[states, actions], 2)?;
    let mut x = g.reshape(pairs, &[b, t, d])?;

    // Offset j − i shifted into table range.
    let centre = 2 * config.max_steps - 1;
    let offsets: Vec<usize> = (0..t)
        .flat_map(|i| (0..t).map(move |j| centre + j - i))
        .collect();

    for l in 0..config.layers {
        let p = |s: &str| params[name(&format!("layer{l}/{s}")).as_str()];
        let h = g.layer_norm(x, p("ln1/gain"), p("ln1/bias"), LN_EPS)?;
        let a = attention(g, config, h, &p, &offsets, b, t)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, p("ln2/gain"), p("ln2/bias"), LN_EPS)?;
        let h2 = g.reshape(h, &[b * t, d])?;
        let f = g.matmul(h2, p("ff/w1"))?;
        let f = g.add(f, p("ff/b1"))?;
        let f = g.gelu(f);
        let f = g.matmul(f, p("ff/w2"))?;
        let f = g.add(f, p("ff/b2"))?;
        let f = g.reshape(f, &[b, t, d])?;
        x = g.add(x, f)?;
    }
    let pairs = g.reshape(x, &[b, k, 2 * d])?;
    g.slice(pairs, 2, 0, d)
}

fn attention(
    g: &mut Graph,
    config: &TransformerConfig,
    h: Var,
    p: &dyn Fn(&str) -> Var,
    offsets: &[usize],
    b: usize,
    t: usize,
) -> Result<Var, TensorError> {
    let d = config.d_model;
    let dh = d / config.heads;
    let flat = g.reshape(h, &[b * t, d])?;
    let mut proj = |w: &str, bias: &str| -> Result<Var, TensorError> {
        let y = g.matmul(flat, p(w))?;
        let y = g.add(y, p(bias))?;
        g.reshape(y, &[b, t, d])
    };
    let q = proj("attn/wq", "attn/bq")?;
    let kk = proj("attn/wk", "attn/bk")?;
    let v = proj("attn/wv", "attn/bv")?;
    let bias = if config.relative_bias {
        let table = g.embedding(p("attn/rel_bias"), offsets)?;
        Some(table)
    } else {
        None
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for hd in 0..config.heads {
        let (lo, hi) = (hd * dh, (hd + 1) * dh);
        let qh = g.slice(q, 2, lo, hi)?;
        let kh = g.slice(kk, 2, lo, hi)?;
        let vh = g.slice(v, 2, lo, hi)?;
        let kt = g.transpose(kh)?;
        let logits = g.bmm(qh, kt)?;
        let mut logits = g.scale(logits, scale);
        if let Some(table) = bias {
            let col = g.slice(table, 1, hd, hd + 1)?;
            let col = g.reshape(col, &[t, t])?;
            logits = g.add(logits, col)?;
        }
        let weights = g.softmax(logits, 2)?;
        heads.push(g.bmm(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
    let merged = g.reshape(merged, &[b * t, d])?;
    let out = g.matmul(merged, p("attn/wo"))?;
    let out = g.add(out, p("attn/bo"))?;
    g.reshape(out, &[b, t, d])
}

/// Transformer and action-embedding weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDynamics {
    pub config: TransformerConfig,
    pub params: ParameterSet,
}

impl LatentDynamics {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self, TensorError> {
        let params = config.init(seed)?;
        Ok(LatentDynamics { config, params })
    }

    /// Evaluates the transformer without recording gradients.
    pub fn predict(&self, states: &Tensor, actions: &[Actions]) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let s = g.constant(states.clone());
        let a = embed_actions(&mut g, &bound, &self.config, actions)?;
        let out = forward_dynamics(&mut g, &bound, &self.config, s, a)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(relative_bias: bool) -> TransformerConfig {
        TransformerConfig {
            d_model: 6,
            layers: 2,
            heads: 2,
            ff_width: 8,
            max_steps: 4,
            relative_bias,
            action_space: ActionSpace::Discrete { n_actions: 3 },
        }
    }

    #[test]
    fn zero_weights_are_identity() {
        let cfg = config(true);
        let mut model = LatentDynamics::new(cfg.clone(), 1).unwrap();
        for (n, t) in model.params.iter_mut() {
            if !n.contains("action") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let acts = vec![Actions::Discrete(vec![0, 1, 2]); 2];
        let out = model.predict(&states, &acts).unwrap();
        assert_eq!(out, states);
    }

    #[test]
    fn equal_actions_give_equal_tokens() {
        let cfg = config(false);
        let params = cfg.init(2).unwrap();
        let mut g = Graph::new();
        let bound = g.bind(&params, false);
        let tok = embed_actions(&mut g, &bound, &cfg, &[Actions::Discrete(vec![1, 1])]).unwrap();
        let v = g.value(tok);
        assert_eq!(v.data()[..6], v.data()[6..]);
        assert_eq!(&v.data()[..6], &params.get("dynamics/action/embedding").unwrap().data()[6..12]);
        assert!(embed_actions(&mut g, &bound, &cfg, &[Actions::Discrete(vec![3])]).is_err());
    }

    #[test]
    fn window_longer_than_table_rejected() {
        let model = LatentDynamics::new(config(true), 1).unwrap();
        let states = Tensor::zeros(&[1, 5, 6]);
        assert!(model.predict(&states, &[Actions::Discrete(vec![0; 5])]).is_err());
    }
}
