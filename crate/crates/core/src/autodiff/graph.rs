use std::collections::BTreeMap;

use super::params::ParameterSet;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::TensorError;
use crate::metric::MIN_NORM;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CosineDistance {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
        dots: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every (column row, output position, input offset) triple that
    /// lands inside the unpadded image of batch element `b`.
    fn for_each_tap(&self, b: usize, mut f: impl FnMut(usize, usize)) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.c + c) * self.h + iy as usize) * self.w
                                + ix as usize;
                            f(row * p + oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }
}

/// Output size of a strided convolution, or `None` if the kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.0)
    }

    /// Gradients keyed by parameter name for every bound parameter that was
    /// reached from the loss.
    pub fn named(&self, bound: &Bound) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Parameter names bound to graph leaves.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn merge(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }
}

impl std::ops::Index<&str> for Bound {
    type Output = Var;
    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

/// A tape of tensor operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so the tape is already
/// topologically sorted; recorded values are never mutated.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable named leaf.
    pub fn leaf(&mut self, value: Tensor, name: &str) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds every tensor of `params` as a leaf; trainable leaves carry the
    /// parameter name, frozen ones are recorded as constants.
    pub fn bind(&mut self, params: &ParameterSet, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.leaf(t.clone(), name)
                } else {
                    self.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Names of the leaves that will receive gradients.
    pub fn grad_leaves(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .filter_map(|n| n.name.clone())
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- forward primitives -------------------------------------------------

    /// `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[b,m,k] × [b,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may have a shape equal to a trailing suffix of
    /// `a`'s shape and is then broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bd = self.value(b).data();
        let width = bd.len();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(width) {
            chunk.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// 2-D convolution of `[N,C,H,W]` input with `[O,C,kh,kw]` weights and an
    /// optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(shape_err("conv2d", &si, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let out_h = conv_output_size(si[2], sw[2], stride, padding);
        let out_w = conv_output_size(si[3], sw[3], stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(TensorError::Shape(format!(
                "conv2d: kernel {sw:?} with stride {stride}, padding {padding} does not fit input {si:?}"
            )));
        };
        let geom = ConvGeometry {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let x = self.value(input).data();
        let mut cols = vec![0.0; geom.n * patch * pos];
        for b in 0..geom.n {
            let block = &mut cols[b * patch * pos..(b + 1) * patch * pos];
            geom.for_each_tap(b, |dst, src| block[dst] = x[src]);
        }
        let wd = self.value(weight).data();
        let mut out = vec![0.0; geom.n * geom.o * pos];
        for b in 0..geom.n {
            let out_b = &mut out[b * geom.o * pos..(b + 1) * geom.o * pos];
            if let Some(bv) = bias {
                for (o, &bias_o) in self.value(bv).data().iter().enumerate() {
                    out_b[o * pos..(o + 1) * pos].iter_mut().for_each(|v| *v = bias_o);
                }
            }
            gemm_acc(wd, &cols[b * patch * pos..(b + 1) * patch * pos], out_b, geom.o, patch, pos);
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![geom.n, geom.o, out_h, out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &sx, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normalized[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = normalized
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| xv[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Rows of a `[V, D]` table selected by `indices`, giving `[len, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(TensorError::Shape(format!("embedding table must be 2-D, got {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid(format!("index {bad} out of range for {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Shape(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::Shape(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Shape(format!("transpose of {shape:?}")));
        }
        let out = transpose_last2(self.value(x).data(), &shape);
        let mut new_shape = shape;
        let r = new_shape.len();
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mse", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let m = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// Row-wise `1 − cos(a_i, b_i)` for `[N, D]` inputs, giving `[N]`.
    ///
    /// Rows with norm below [`MIN_NORM`] are rejected.
    pub fn cosine_distance_batch(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("cosine_distance_batch", a, b)?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Shape(format!(
                "cosine_distance_batch expects [N, D], got {shape:?}"
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut norms_a = Vec::with_capacity(n);
        let mut norms_b = Vec::with_capacity(n);
        let mut dots = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (ra, rb) = (&da[i * d..(i + 1) * d], &db[i * d..(i + 1) * d]);
            let na2 = ra.iter().map(|x| x * x).sum::<f64>();
            let nb2 = rb.iter().map(|x| x * x).sum::<f64>();
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            if na < MIN_NORM || nb < MIN_NORM {
                return Err(TensorError::Invalid(format!(
                    "cosine distance undefined for row {i} (norms {na:e}, {nb:e})"
                )));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(1.0 - dot / (na2 * nb2).sqrt());
            norms_a.push(na);
            norms_b.push(nb);
            dots.push(dot);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::CosineDistance {
                a,
                b,
                norms_a,
                norms_b,
                dots,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Back-propagates from a scalar `loss` to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out.by_node.insert(idx, g);
            } else {
                self.propagate(node, &g, &mut grads);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape matches its node")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let width = self.value(*b).numel();
                    let mut db = vec![0.0; width];
                    for chunk in gd.chunks(width) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = gd.iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let db = gd.iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(va)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let da = gd.iter().zip(va).map(|(x, v)| x * gelu_grad(*v)).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv_backward(*input, *weight, *bias, geom, cols, gd, grads),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (i, (&gi, &ni)) in gd.iter().zip(normalized).enumerate() {
                        dg[i % d] += gi * ni;
                        db[i % d] += gi;
                    }
                    self.accumulate(grads, *gain, self.like(*gain, dg));
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> =
                            gd[span.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xhat = &normalized[span.clone()];
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, dh), xh) in dx[span].iter_mut().zip(&dxhat).zip(xhat) {
                            *o = is * (dh - mean_dxhat - xh * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *table, self.like(*table, dt));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, self.like(v, dv));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    dx[dst..dst + width * inner]
                        .copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, self.like(*x, gd.to_vec())),
            Op::Transpose(x) => {
                let dx = transpose_last2(gd, node.value.shape());
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0] / n as f64; n]));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gd[0] / va.len() as f64;
                let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.like(*b, diff.iter().map(|v| -v).collect()));
                }
                self.accumulate(grads, *a, self.like(*a, diff));
            }
            Op::CosineDistance {
                a,
                b,
                norms_a,
                norms_b,
                dots,
            } => {
                let d = self.shape(*a)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for i in 0..gd.len() {
                    let (na, nb, dot) = (norms_a[i], norms_b[i], dots[i]);
                    let inv = 1.0 / (na * nb);
                    for k in i * d..(i + 1) * d {
                        da[k] = -gd[i] * (vb[k] * inv - dot * va[k] * inv / (na * na));
                        db[k] = -gd[i] * (va[k] * inv - dot * vb[k] * inv / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeometry,
        cols: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (patch, pos, o) = (geom.patch(), geom.positions(), geom.o);
        if let Some(bv) = bias.filter(|b| self.rg(*b)) {
            let mut dbias = vec![0.0; o];
            for b in 0..geom.n {
                for (oc, acc) in dbias.iter_mut().enumerate() {
                    let start = (b * o + oc) * pos;
                    *acc += gd[start..start + pos].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, bv, self.like(bv, dbias));
        }
        if self.rg(weight) {
            let mut dw = vec![0.0; o * patch];
            for b in 0..geom.n {
                gemm_nt_acc(
                    &gd[b * o * pos..(b + 1) * o * pos],
                    &cols[b * patch * pos..(b + 1) * patch * pos],
                    &mut dw,
                    o,
                    pos,
                    patch,
                );
            }
            self.accumulate(grads, weight, self.like(weight, dw));
        }
        if self.rg(input) {
            let wd = self.value(weight).data();
            let mut dx = vec![0.0; self.value(input).numel()];
            let mut dcols = vec![0.0; patch * pos];
            for b in 0..geom.n {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn_acc(wd, &gd[b * o * pos..(b + 1) * o * pos], &mut dcols, o, patch, pos);
                geom.for_each_tap(b, |dst, src| dx[src] += dcols[dst]);
            }
            self.accumulate(grads, input, self.like(input, dx));
        }
    }
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![0.0; data.len()];
    for (blk_in, blk_out) in data.chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
        for i in 0..rows {
            for j in 0..cols {
                blk_out[j * rows + i] = blk_in[i * cols + j];
            }
        }
    }
    out
}
