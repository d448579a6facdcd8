//! Minimal reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records primitive applications in execution order, so node
//! ids are already a topological order. Leaves are trainable weight tensors;
//! constants are inputs that never receive a gradient. [`Graph::backward`]
//! walks the record once in reverse and accumulates gradients.

mod check;
mod optim;

pub use check::{finite_diff_check, relative_error, GradCheck, ProbeMode};
pub use optim::{sgd_step, Adam};

use crate::attention::window::{window_core, window_core_backward};
use crate::attention::LAYER_NORM_EPS;
use crate::conv3d::{conv_backward, conv_raw, Conv3dLayer};
use crate::error::{Result, VtpError};
use crate::tensor::{matmul_t, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `x (N×M) + b (M)` broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul {
        a: NodeId,
        a_trans: bool,
        b: NodeId,
        b_trans: bool,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BinMean {
        x: NodeId,
        bin_size: usize,
    },
    Concat(Vec<NodeId>),
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: [usize; 3],
        shape: (usize, usize, usize),
        col: Option<Vec<f64>>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    WindowAttention {
        inputs: [NodeId; 5],
        bin_size: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    HardReorder,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Gradients of a scalar output, one per leaf in creation order.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: Vec<NodeId>,
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.leaves.iter().position(|&l| l == leaf).map(|i| &self.grads[i])
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VtpError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("softmax needs at least one axis");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    softmax_rows(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// A trainable tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, t);
        self.leaves.push(id);
        id
    }

    /// An input that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.shape().len() != 2 || bv.len() != xv.cols() {
            return Err(VtpError::Shape(format!(
                "row bias {:?} does not fit {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let n = xv.cols();
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(n) {
            for (a, b) in row.iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        Ok(self.push(Op::AddRow(x, bias), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|a| a * c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn matmul_t(&mut self, a: NodeId, a_trans: bool, b: NodeId, b_trans: bool) -> Result<NodeId> {
        let v = matmul_t(self.value(a), a_trans, self.value(b), b_trans)?;
        Ok(self.push(
            Op::MatMul {
                a,
                a_trans,
                b,
                b_trans,
            },
            v,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).shape().len() != 2 {
            return Err(VtpError::Shape("transpose needs a 2-D tensor".into()));
        }
        let v = self.value(x).transpose();
        Ok(self.push(Op::Transpose(x), v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(Op::Relu(x), v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(Op::Log(x), v)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), v)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        self.push(Op::Softmax(x), v)
    }

    /// `x − logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("log_softmax needs an axis");
        let mut v = xv.clone();
        for row in v.data_mut().chunks_mut(n) {
            let lse = crate::attention::sinkhorn::log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|a| *a -= lse);
        }
        self.push(Op::LogSoftmax(x), v)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(Op::Mean(x), v)
    }

    /// Means of consecutive groups of `bin_size` rows: `L × e → N_b × e`.
    pub fn bin_mean(&mut self, x: NodeId, bin_size: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (l, e) = (xv.rows(), xv.cols());
        crate::voxelgrid::check_divisible(l, bin_size)?;
        let bins = crate::voxelgrid::partition_bins(xv, bin_size)?;
        let v = crate::attention::bin_mean(&bins);
        debug_assert_eq!(v.shape(), [l / bin_size, e]);
        Ok(self.push(Op::BinMean { x, bin_size }, v))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != first[1..] {
                return Err(VtpError::Shape(format!("concat {s:?} with {first:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    /// Same-padded 3D convolution of a `c_in × L` volume with weights
    /// `c_out × c_in·k³` and bias `c_out`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, dims: [usize; 3], kernel: usize) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let c_in = xv.rows();
        let layer = Conv3dLayer::from_parts(c_in, kernel, wv.clone(), bv.clone())?;
        if xv.cols() != dims.iter().product::<usize>() {
            return Err(VtpError::Shape(format!("volume {:?} vs dims {dims:?}", xv.shape())));
        }
        let (out, col) = conv_raw(xv.data(), dims, &layer);
        let v = Tensor::new(&[layer.c_out(), xv.cols()], out)?;
        Ok(self.push(
            Op::Conv3d {
                x,
                w,
                b,
                dims,
                shape: (c_in, layer.c_out(), kernel),
                col,
            },
            v,
        ))
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let e = xv.cols();
        if gv.len() != e || bv.len() != e {
            return Err(VtpError::Shape("layer norm gain/bias size".into()));
        }
        let mut normalized = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in normalized.chunks_mut(e) {
            let mean = row.iter().sum::<f64>() / e as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let mut out = normalized.clone();
        for row in out.chunks_mut(e) {
            for ((v, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * g + b;
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            v,
        ))
    }

    /// Local+sorted window attention on `L × e` sequences (heads
    /// concatenated, no output projection).
    pub fn window_attention(
        &mut self,
        inputs: [NodeId; 5],
        bin_size: usize,
        heads: usize,
    ) -> Result<NodeId> {
        let shape = self.value(inputs[0]).shape().to_vec();
        for &i in &inputs[1..] {
            if self.value(i).shape() != shape.as_slice() {
                return Err(VtpError::Shape("window attention operand shapes".into()));
            }
        }
        let e = shape[1];
        if heads == 0 || e % heads != 0 {
            return Err(VtpError::Config(format!("embed {e} not divisible by {heads} heads")));
        }
        crate::voxelgrid::check_divisible(shape[0], bin_size)?;
        let [q, k, v, ks, vs] = inputs.map(|i| self.value(i).data());
        let mut probs = Vec::new();
        let out = window_core(q, k, v, ks, vs, bin_size, e, heads, Some(&mut probs));
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Op::WindowAttention {
                inputs,
                bin_size,
                heads,
                probs,
            },
            value,
        ))
    }

    /// Argmax bin selection. Recorded so inference can share graph code, but
    /// [`Graph::backward`] refuses any path running through it.
    pub fn hard_reorder(&mut self, s: NodeId, bins: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        let bv = self.value(bins);
        let n_b = sv.rows();
        if bv.rows() != n_b {
            return Err(VtpError::Shape("hard reorder size".into()));
        }
        let width = bv.cols();
        let mut out = vec![0.0; bv.len()];
        for i in 0..n_b {
            let row = sv.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            out[i * width..(i + 1) * width].copy_from_slice(bv.row(best));
        }
        let v = Tensor::new(bv.shape(), out)?;
        Ok(self.push(Op::HardReorder, v))
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(VtpError::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |id: NodeId, t: Tensor| accumulate(&mut grads, id, t);
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(x, b) => {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape(), gb)?);
                    acc(*x, g);
                }
                Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
                Op::MatMul {
                    a,
                    a_trans,
                    b,
                    b_trans,
                } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match (a_trans, b_trans) {
                        (false, false) => (matmul_t(&g, false, bv, true)?, matmul_t(av, true, &g, false)?),
                        (false, true) => (matmul_t(&g, false, bv, false)?, matmul_t(&g, true, av, false)?),
                        (true, false) => (matmul_t(bv, false, &g, true)?, matmul_t(av, false, &g, false)?),
                        (true, true) => (matmul_t(bv, true, &g, true)?, matmul_t(&g, true, av, true)?),
                    };
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Transpose(x) => acc(*x, g.transpose()),
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, g.reshape(&shape)?);
                }
                Op::Relu(x) => acc(*x, g.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
                Op::Exp(x) => acc(*x, g.zip_map(&node.value, |d, y| d * y)),
                Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |d, v| d / v)),
                Op::Abs(x) => acc(
                    *x,
                    g.zip_map(self.value(*x), |d, v| {
                        if v > 0.0 {
                            d
                        } else if v < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Softmax(x) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv -= yv.exp() * total;
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    acc(*x, Tensor::full(self.value(*x).shape(), d));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    acc(*x, Tensor::full(xv.shape(), g.data()[0] / xv.len() as f64));
                }
                Op::BinMean { x, bin_size } => {
                    let xv = self.value(*x);
                    let e = xv.cols();
                    let inv = 1.0 / *bin_size as f64;
                    let gx = Tensor::from_fn(xv.shape(), |i| {
                        let (row, c) = (i / e, i % e);
                        g.at2(row / bin_size, c) * inv
                    });
                    acc(*x, gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let n = self.value(p).len();
                        acc(p, Tensor::new(&shape, g.data()[offset..offset + n].to_vec())?);
                        offset += n;
                    }
                }
                Op::Conv3d {
                    x,
                    w,
                    b,
                    dims,
                    shape,
                    col,
                } => {
                    let (gi, gw, gb) = conv_backward(
                        self.value(*x).data(),
                        col.as_deref(),
                        *dims,
                        *shape,
                        self.value(*w).data(),
                        g.data(),
                    );
                    acc(*x, Tensor::new(self.value(*x).shape(), gi)?);
                    acc(*w, Tensor::new(self.value(*w).shape(), gw)?);
                    acc(*b, Tensor::new(self.value(*b).shape(), gb)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let e = g.cols();
                    let gain_v = self.value(*gain).data();
                    let mut gg = vec![0.0; e];
                    let mut gbias = vec![0.0; e];
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((grow, nrow), out)) in g
                        .data()
                        .chunks(e)
                        .zip(normalized.chunks(e))
                        .zip(gx.chunks_mut(e))
                        .enumerate()
                    {
                        let mut sum_d = 0.0;
                        let mut sum_dn = 0.0;
                        for c in 0..e {
                            gg[c] += grow[c] * nrow[c];
                            gbias[c] += grow[c];
                            let d = grow[c] * gain_v[c];
                            sum_d += d;
                            sum_dn += d * nrow[c];
                        }
                        let inv = inv_std[r];
                        let n = e as f64;
                        for c in 0..e {
                            let d = grow[c] * gain_v[c];
                            out[c] = inv / n * (n * d - sum_d - nrow[c] * sum_dn);
                        }
                    }
                    acc(*x, Tensor::new(g.shape(), gx)?);
                    acc(*gain, Tensor::new(self.value(*gain).shape(), gg)?);
                    acc(*bias, Tensor::new(self.value(*bias).shape(), gbias)?);
                }
                Op::WindowAttention {
                    inputs,
                    bin_size,
                    heads,
                    probs,
                } => {
                    let [q, k, v, ks, vs] = inputs.map(|i| self.value(i).data());
                    let e = g.cols();
                    let parts = window_core_backward(q, k, v, ks, vs, probs, g.data(), *bin_size, e, *heads);
                    for (id, part) in inputs.iter().zip(parts) {
                        acc(*id, Tensor::new(g.shape(), part)?);
                    }
                }
                Op::HardReorder => {
                    return Err(VtpError::NotDifferentiable("hard reorder_bins"));
                }
            }
        }

        let grads = self
            .leaves
            .iter()
            .map(|&l| grads[l.0].take().unwrap_or_else(|| Tensor::zeros(self.value(l).shape())))
            .collect();
        Ok(Gradients {
            leaves: self.leaves.clone(),
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, t: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let wn = g.leaf(w.clone());
        let f = g.matmul_t(wn, true, wn, false).unwrap();
        let f = g.sum(f);
        assert_eq!(g.value(f).data(), &[5.25]);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(wn).unwrap(), &w.map(|x| 2.0 * x));
    }

    #[test]
    fn softmax_mean_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[1, 7], &mut rng));
        let s = g.softmax(x);
        let s2 = g.mul(s, s).unwrap();
        let f = g.mean(s2);
        let grads = g.backward(f).unwrap();
        assert!(grads.get(x).unwrap().sum().abs() < 1e-15);

        // mean(softmax(x)) itself is constant, so its gradient vanishes.
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[1, 7], &mut rng));
        let s = g.softmax(x);
        let f = g.mean(s);
        let grads = g.backward(f).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(VtpError::Shape(_))));
    }

    #[test]
    fn detached_leaves_get_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2], 3.0));
        let b = g.leaf(Tensor::full(&[2, 2], 1.0));
        let f = g.sum(a);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(b).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get(a).unwrap(), &Tensor::full(&[2], 1.0));
    }

    #[test]
    fn hard_reorder_blocks_backward() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let bins = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let r = g.hard_reorder(s, bins).unwrap();
        assert_eq!(g.value(r).row(0), &[3.0, 4.0, 5.0]);
        let f = g.sum(r);
        assert!(matches!(g.backward(f), Err(VtpError::NotDifferentiable(_))));
        // Off the output path it is harmless.
        let f2 = g.sum(bins);
        assert!(g.backward(f2).is_ok());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1], 2.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let f = g.sum(z);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }
}
