use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::TensorError;

const MAGIC: &[u8; 8] = b"BISIMCKP";
const VERSION: u32 = 1;

/// Named tensors with unique names, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Moves every tensor of `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParameterSet) -> Result<(), TensorError> {
        for (name, t) in other.tensors {
            if self.tensors.contains_key(&name) {
                return Err(TensorError::Invalid(format!("duplicate parameter {name}")));
            }
            self.tensors.insert(name, t);
        }
        Ok(())
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParameterSet) -> Result<(), TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::Shape(format!(
                "parameter sets hold {} and {} tensors",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(TensorError::Shape(format!(
                    "parameter {na} {:?} does not match {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TensorError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(TensorError::Format(format!("rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| *n > 0 && *n < (1 << 32))
                .ok_or_else(|| TensorError::Format(format!("shape {shape:?} for {name}")))?;
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            if set.contains(&name) {
                return Err(TensorError::Format(format!("duplicate tensor {name}")));
            }
            set.insert(&name, Tensor::new(shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(TensorError::Format("trailing bytes".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let file = std::fs::File::open(path)?;
        ParameterSet::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Global L2 norm over a gradient map.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.5e-4,
        }
    }
}

/// Adam with bias-corrected moments. Parameters missing from the gradient
/// map are treated as having zero gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(TensorError::Shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(TensorError::Invalid(format!("gradient for unknown {name}"))),
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(Tensor::data);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(p: &ParameterSet) -> BTreeMap<String, Tensor> {
        p.iter().map(|(k, t)| (k.to_string(), t.map(|x| 2.0 * x))).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(vec![1.0, -2.0]));
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let zero: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[2]))].into();
        adam.step(&mut p, &zero).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_square() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let g = quadratic_grad(&p);
        adam.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().item();
        assert!(w < 1.0 && w > 0.0, "{w}");
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g: BTreeMap<_, _> = [("a".to_string(), Tensor::from_vec(vec![30.0, 40.0]))].into();
        let before = clip_grad_norm(&mut g, 10.0);
        assert_eq!(before, 50.0);
        assert!((grad_norm(&g) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ParameterSet::new();
        p.insert("enc/w", Tensor::new(vec![2, 1, 3], vec![0.1, -0.0, 1e-300, 5.0, f64::MAX, -3.5]).unwrap());
        p.insert("b", Tensor::scalar(std::f64::consts::PI));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParameterSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        buf.push(0);
        assert!(ParameterSet::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParameterSet::read_from(buf.as_slice()).is_err());
    }
}
