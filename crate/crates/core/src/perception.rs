//! Spacetime cube masking and the online/momentum convolutional encoder pair.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_output_size, Bound, Graph, ParameterSet, Tensor, TensorError, Var};

/// Discrete indices or continuous action vectors, one per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actions {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Discrete(a) => a.len(),
            Actions::Continuous(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `K` stacked-frame observations `[K][stack][H][W]` with actions and rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    frames: Tensor,
    pub actions: Actions,
    pub rewards: Vec<f64>,
}

impl ObservationSequence {
    pub fn new(frames: Tensor, actions: Actions, rewards: Vec<f64>) -> Result<Self, TensorError> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(TensorError::Shape(format!("frames must be [K][stack][H][W], got {s:?}")));
        }
        if s[0] < 2 {
            return Err(TensorError::Invalid(format!("sequence length {} < 2", s[0])));
        }
        if actions.len() != s[0] || rewards.len() != s[0] {
            return Err(TensorError::Shape(format!(
                "{} frames but {} actions and {} rewards",
                s[0],
                actions.len(),
                rewards.len()
            )));
        }
        if frames.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(TensorError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(ObservationSequence {
            frames,
            actions,
            rewards,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeShape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl CubeShape {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        CubeShape {
            depth,
            height,
            width,
        }
    }

    pub fn volume(&self) -> usize {
        self.depth * self.height * self.width
    }
}

/// Boolean spacetime mask `[K][H][W]`, shared by every stacked channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeMask {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
    pub ratio: f64,
    pub cube: CubeShape,
    pub seed: u64,
}

impl CubeMask {
    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.h + y) * self.w + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.bits.len() as f64
    }

    /// Header `K, H, W` as little-endian `u32`, then row-major bits packed
    /// least-significant-bit first.
    pub fn write_bitset(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in [self.k, self.h, self.w] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&bytes)
    }

    /// Reads back the mask bits written by [`CubeMask::write_bitset`].
    pub fn read_bitset(mut r: impl Read) -> Result<(usize, usize, usize, Vec<bool>), TensorError> {
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut bytes = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bytes)?;
        let bits = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok((dims[0], dims[1], dims[2], bits))
    }
}

/// Samples cube origins uniformly with replacement (cubes may overlap) until
/// at least `ceil(ratio·K·H·W)` cells are covered.
pub fn generate_mask(
    k: usize,
    h: usize,
    w: usize,
    ratio: f64,
    cube: CubeShape,
    seed: u64,
) -> Result<CubeMask, TensorError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TensorError::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if cube.volume() == 0 || cube.depth > k || cube.height > h || cube.width > w {
        return Err(TensorError::Invalid(format!(
            "cube {}x{}x{} does not fit a {k}x{h}x{w} volume",
            cube.depth, cube.height, cube.width
        )));
    }
    let total = k * h * w;
    let target = (ratio * total as f64).ceil() as usize;
    let mut bits = vec![false; total];
    let mut covered = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while covered < target {
        let t0 = rng.random_range(0..=k - cube.depth);
        let y0 = rng.random_range(0..=h - cube.height);
        let x0 = rng.random_range(0..=w - cube.width);
        for t in t0..t0 + cube.depth {
            for y in y0..y0 + cube.height {
                for x in x0..x0 + cube.width {
                    let cell = &mut bits[(t * h + y) * w + x];
                    if !*cell {
                        *cell = true;
                        covered += 1;
                    }
                }
            }
        }
    }
    Ok(CubeMask {
        k,
        h,
        w,
        bits,
        ratio,
        cube,
        seed,
    })
}

/// Zeroes every masked pixel of `[K][stack][H][W]` frames.
pub fn apply_mask(frames: &Tensor, mask: &CubeMask) -> Result<Tensor, TensorError> {
    let s = frames.shape();
    if s.len() != 4 || s[0] != mask.k || s[2] != mask.h || s[3] != mask.w {
        return Err(TensorError::Shape(format!(
            "frames {s:?} do not match mask [{}, {}, {}]",
            mask.k, mask.h, mask.w
        )));
    }
    let (stack, plane) = (s[1], s[2] * s[3]);
    let mut out = frames.clone();
    for (i, px) in out.data_mut().iter_mut().enumerate() {
        let t = i / (stack * plane);
        if mask.bits[t * plane + i % plane] {
            *px = 0.0;
        }
    }
    Ok(out)
}

pub fn cube_mask(
    seq: &ObservationSequence,
    ratio: f64,
    cube: CubeShape,
    seed: u64,
) -> Result<(Tensor, CubeMask), TensorError> {
    let s = seq.frames().shape();
    let mask = generate_mask(s[0], s[2], s[3], ratio, cube, seed)?;
    Ok((apply_mask(seq.frames(), &mask)?, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub frame_size: usize,
    pub convs: Vec<ConvSpec>,
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    /// Three stacked frames at 48×48.
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            frame_size: 48,
            convs: vec![
                ConvSpec { channels: 32, kernel: 4, stride: 2 },
                ConvSpec { channels: 64, kernel: 4, stride: 2 },
                ConvSpec { channels: 64, kernel: 3, stride: 1 },
            ],
            latent_dim: 50,
        }
    }
}

impl EncoderConfig {
    /// Spatial size after each convolution.
    pub fn feature_sizes(&self) -> Result<Vec<usize>, TensorError> {
        let mut size = self.frame_size;
        let mut sizes = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            size = conv_output_size(size, c.kernel, c.stride, 0).ok_or_else(|| {
                TensorError::Shape(format!("conv layer {i} does not fit a {size}x{size} input"))
            })?;
            sizes.push(size);
        }
        Ok(sizes)
    }

    pub fn flat_dim(&self) -> Result<usize, TensorError> {
        let side = self.feature_sizes()?.last().copied().unwrap_or(self.frame_size);
        let channels = self.convs.last().map_or(self.in_channels, |c| c.channels);
        Ok(channels * side * side)
    }

    /// He-normal weights and zero biases.
    pub fn init(&self, seed: u64) -> Result<ParameterSet, TensorError> {
        if self.in_channels == 0 || self.latent_dim == 0 || self.convs.iter().any(|c| c.channels == 0) {
            return Err(TensorError::Invalid("encoder dimensions must be positive".into()));
        }
        let flat = self.flat_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        let mut cin = self.in_channels;
        for (i, c) in self.convs.iter().enumerate() {
            let fan_in = cin * c.kernel * c.kernel;
            let shape = [c.channels, cin, c.kernel, c.kernel];
            p.insert(
                &format!("encoder/conv{i}/weight"),
                Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
            );
            p.insert(&format!("encoder/conv{i}/bias"), Tensor::zeros(&[c.channels]));
            cin = c.channels;
        }
        p.insert(
            "encoder/fc/weight",
            Tensor::randn(&[flat, self.latent_dim], (1.0 / flat as f64).sqrt(), &mut rng),
        );
        p.insert("encoder/fc/bias", Tensor::zeros(&[self.latent_dim]));
        Ok(p)
    }
}

/// Encodes `[N][C][H][W]` frames into `[N][latent_dim]` latents.
pub fn encoder_forward(
    g: &mut Graph,
    params: &Bound,
    config: &EncoderConfig,
    frames: Var,
) -> Result<Var, TensorError> {
    let s = g.shape(frames).to_vec();
    let expected = [config.in_channels, config.frame_size, config.frame_size];
    if s.len() != 4 || s[1..] != expected {
        return Err(TensorError::Shape(format!(
            "encoder expects [N, {}, {}, {}], got {s:?}",
            expected[0], expected[1], expected[2]
        )));
    }
    let mut x = frames;
    for (i, c) in config.convs.iter().enumerate() {
        let w = params[format!("encoder/conv{i}/weight").as_str()];
        let b = params[format!("encoder/conv{i}/bias").as_str()];
        let y = g.conv2d(x, w, Some(b), c.stride, 0)?;
        x = g.relu(y);
    }
    let flat = g.reshape(x, &[s[0], config.flat_dim()?])?;
    let z = g.matmul(flat, params["encoder/fc/weight"])?;
    g.add(z, params["encoder/fc/bias"])
}

/// Online encoder parameters and their exponential-moving-average shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseEncoderPair {
    pub config: EncoderConfig,
    pub online: ParameterSet,
    pub momentum: ParameterSet,
    pub m: f64,
}

impl SiameseEncoderPair {
    /// Fresh pair; the momentum copy starts equal to the online weights.
    pub fn new(config: EncoderConfig, m: f64, seed: u64) -> Result<Self, TensorError> {
        let online = config.init(seed)?;
        SiameseEncoderPair::from_parts(config, online.clone(), online, m)
    }

    pub fn from_parts(
        config: EncoderConfig,
        online: ParameterSet,
        momentum: ParameterSet,
        m: f64,
    ) -> Result<Self, TensorError> {
        if !(0.0..=1.0).contains(&m) {
            return Err(TensorError::Invalid(format!("EMA coefficient {m} outside [0, 1]")));
        }
        config.init(0)?.check_same_layout(&online)?;
        online.check_same_layout(&momentum)?;
        Ok(SiameseEncoderPair {
            config,
            online,
            momentum,
            m,
        })
    }

    /// Records the encoder on `g`. Online weights become trainable leaves;
    /// momentum weights enter as constants and never receive gradients.
    pub fn encode(
        &self,
        g: &mut Graph,
        frames: Var,
        use_momentum: bool,
    ) -> Result<(Var, Bound), TensorError> {
        let bound = if use_momentum {
            g.bind(&self.momentum, false)
        } else {
            g.bind(&self.online, true)
        };
        let z = encoder_forward(g, &bound, &self.config, frames)?;
        Ok((z, bound))
    }

    /// Latents of `[N][C][H][W]` frames without recording gradients.
    pub fn embed(&self, frames: &Tensor, use_momentum: bool) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(frames.clone());
        let params = if use_momentum { &self.momentum } else { &self.online };
        let bound = g.bind(params, false);
        let z = encoder_forward(&mut g, &bound, &self.config, x)?;
        Ok(g.value(z).clone())
    }

    /// `momentum ← m·momentum + (1 − m)·online`.
    pub fn ema_update(&mut self) {
        let m = self.m;
        for (name, shadow) in self.momentum.iter_mut() {
            let online = self.online.get(name).expect("layouts checked at construction");
            for (s, o) in shadow.data_mut().iter_mut().zip(online.data()) {
                *s = m * *s + (1.0 - m) * o;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            frame_size: 12,
            convs: vec![ConvSpec { channels: 4, kernel: 4, stride: 2 }, ConvSpec { channels: 4, kernel: 3, stride: 1 }],
            latent_dim: 5,
        }
    }

    fn sequence(k: usize, side: usize) -> ObservationSequence {
        let n = k * 3 * side * side;
        let frames = Tensor::new(vec![k, 3, side, side], (0..n).map(|i| (i % 97) as f64 / 96.0).collect()).unwrap();
        ObservationSequence::new(frames, Actions::Discrete(vec![0; k]), vec![0.0; k]).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let seq = sequence(4, 8);
        let (masked, mask) = cube_mask(&seq, 0.0, CubeShape::new(2, 3, 3), 1).unwrap();
        assert_eq!(&masked, seq.frames());
        assert_eq!(mask.masked_count(), 0);
    }

    #[test]
    fn unit_cubes_hit_exact_fraction() {
        let seq = sequence(4, 8);
        let (masked, mask) = cube_mask(&seq, 0.5, CubeShape::new(1, 1, 1), 3).unwrap();
        assert_eq!(mask.masked_count(), 128);
        for t in 0..4 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let v = masked.data()[((t * 3 + c) * 8 + y) * 8 + x];
                        if mask.get(t, y, x) {
                            assert_eq!(v, 0.0);
                        } else {
                            assert_eq!(v, seq.frames().data()[((t * 3 + c) * 8 + y) * 8 + x]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_cube_rejected() {
        assert!(generate_mask(4, 8, 8, 0.5, CubeShape::new(5, 2, 2), 0).is_err());
        assert!(generate_mask(4, 8, 8, 1.0, CubeShape::new(1, 1, 1), 0).is_err());
    }

    #[test]
    fn bitset_round_trip() {
        let mask = generate_mask(3, 5, 7, 0.4, CubeShape::new(1, 2, 2), 9).unwrap();
        let mut buf = Vec::new();
        mask.write_bitset(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + (3 * 5 * 7usize).div_ceil(8));
        let (k, h, w, bits) = CubeMask::read_bitset(buf.as_slice()).unwrap();
        assert_eq!((k, h, w), (3, 5, 7));
        assert_eq!(bits, mask.bits());
    }

    #[test]
    fn fresh_pair_outputs_agree() {
        let pair = SiameseEncoderPair::new(small_config(), 0.95, 4).unwrap();
        let frames = sequence(2, 12).frames().clone();
        assert_eq!(pair.embed(&frames, false).unwrap(), pair.embed(&frames, true).unwrap());
    }

    #[test]
    fn zero_frames_give_zero_latent() {
        let pair = SiameseEncoderPair::new(small_config(), 0.95, 4).unwrap();
        let z = pair.embed(&Tensor::zeros(&[2, 3, 12, 12]), false).unwrap();
        assert_eq!(z.shape(), &[2, 5]);
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ema_scalar_recurrence() {
        let mut online = ParameterSet::new();
        let config = small_config();
        let template = config.init(0).unwrap();
        let mut momentum = ParameterSet::new();
        for (name, t) in template.iter() {
            online.insert(name, Tensor::full(t.shape(), 1.0));
            momentum.insert(name, Tensor::zeros(t.shape()));
        }
        let mut pair = SiameseEncoderPair::from_parts(config, online.clone(), momentum, 0.5).unwrap();
        for _ in 0..3 {
            pair.ema_update();
        }
        assert!(pair.momentum.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.875)));
        assert_eq!(pair.online, online);
    }

    #[test]
    fn ema_extremes() {
        let mut pair = SiameseEncoderPair::new(small_config(), 1.0, 1).unwrap();
        let other = small_config().init(2).unwrap();
        pair.online = other.clone();
        let before = pair.momentum.clone();
        pair.ema_update();
        assert_eq!(pair.momentum, before);
        pair.m = 0.0;
        pair.ema_update();
        assert_eq!(pair.momentum, other);
    }

    #[test]
    fn momentum_weights_are_not_leaves() {
        let pair = SiameseEncoderPair::new(small_config(), 0.95, 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(sequence(2, 12).frames().clone());
        let (zm, _) = pair.encode(&mut g, x, true).unwrap();
        let (zo, _) = pair.encode(&mut g, x, false).unwrap();
        let loss = g.mse(zo, zm).unwrap();
        let _ = g.backward(loss).unwrap();
        assert!(g.grad_leaves().iter().all(|n| n.starts_with("encoder/")));
        assert_eq!(g.grad_leaves().len(), pair.online.len());
    }
}
