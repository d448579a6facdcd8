//! Bin-level correlation, bin reordering and the local+sorted window
//! attention. None of these ever builds an `L × L` score matrix.

use num_traits::Float;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::sinkhorn::SinkhornMatrix;
use crate::error::{Result, VtpError};
use crate::tensor::{gemm, matmul_t, Tensor};
use crate::voxelgrid::BinSequence;

/// How the Sinkhorn matrix is applied to the bins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum ReorderMode {
    /// Convex mixing `Σ_j S[i][j]·bin[j]`; differentiable.
    #[default]
    Soft,
    /// `bin[argmax_j S[i][j]]`; inference only.
    Hard,
}

/// Number of attention scores materialised by one encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LayerScoreCount {
    /// `N_b²` entries of the bin correlation matrix (shared by all heads).
    pub correlation: usize,
    /// `L·2B` window scores of a single head.
    pub window_per_head: usize,
    pub heads: usize,
}

impl LayerScoreCount {
    pub fn per_head_total(&self) -> usize {
        self.correlation + self.window_per_head
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScoreCounter {
    pub layers: Vec<LayerScoreCount>,
}

/// `N_b² + L·2B`.
pub fn sparse_score_elements(len: usize, bin_size: usize) -> usize {
    let n_b = len / bin_size;
    n_b * n_b + len * 2 * bin_size
}

pub fn dense_score_elements(len: usize) -> usize {
    len * len
}

/// Mean over the `B` axis of every bin: `N_b × e`.
pub fn bin_mean(bins: &BinSequence) -> Tensor {
    let (n_b, b, e) = (bins.bins(), bins.bin_size(), bins.embed());
    let mut out = Tensor::zeros(&[n_b, e]);
    let inv = 1.0 / b as f64;
    for i in 0..n_b {
        let block = bins.bin(i);
        let dst = &mut out.data_mut()[i * e..(i + 1) * e];
        for row in block.chunks(e) {
            for (d, &x) in dst.iter_mut().zip(row) {
                *d += x;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub fn bin_means(b_q: &BinSequence, b_k: &BinSequence) -> Result<(Tensor, Tensor)> {
    if b_q.tensor().shape() != b_k.tensor().shape() {
        return Err(VtpError::Shape("query and key bins differ in shape".into()));
    }
    Ok((bin_mean(b_q), bin_mean(b_k)))
}

/// `R[i][j] = ⟨q_mean[i], k_mean[j]⟩ / τ`.
pub fn correlation_matrix(q_mean: &Tensor, k_mean: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(VtpError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let r = matmul_t(q_mean, false, k_mean, true)?;
    Ok(r.map(|x| x / temperature))
}

/// Applies the Sinkhorn matrix to a set of bins.
pub fn reorder_bins(bins: &BinSequence, sink: &SinkhornMatrix, mode: ReorderMode) -> Result<BinSequence> {
    let n_b = bins.bins();
    if sink.size() != n_b {
        return Err(VtpError::Shape(format!(
            "sinkhorn matrix is {0}×{0} but there are {n_b} bins",
            sink.size()
        )));
    }
    let width = bins.bin_size() * bins.embed();
    let mut out = vec![0.0; n_b * width];
    match mode {
        ReorderMode::Soft => {
            gemm(n_b, n_b, width, sink.s.data(), false, bins.tensor().data(), false, &mut out, 0.0)
        }
        ReorderMode::Hard => {
            for (i, j) in sink.row_argmax().into_iter().enumerate() {
                out[i * width..(i + 1) * width].copy_from_slice(bins.bin(j));
            }
        }
    }
    BinSequence::from_tensor(Tensor::new(bins.tensor().shape(), out)?)
}

/// Per-head local+sorted window attention on raw `L × e` buffers, heads
/// concatenated, before the output projection.
///
/// When `probs` is given it receives the softmax weights laid out as
/// `[bin][head][row][2B]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_core<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    k_sorted: &[T],
    v_sorted: &[T],
    bin_size: usize,
    embed: usize,
    heads: usize,
    mut probs: Option<&mut Vec<T>>,
) -> Vec<T> {
    let (b, e) = (bin_size, embed);
    let l = q.len() / e;
    let n_b = l / b;
    let d = e / heads;
    let scale = T::one() / T::from(d).unwrap().sqrt();
    let mut out = vec![T::zero(); l * e];
    let mut scores = vec![T::zero(); 2 * b];
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
        p.reserve(n_b * heads * b * 2 * b);
    }
    let key = |i: usize, t: usize, c0: usize| -> &[T] {
        if t < b {
            &k[(i * b + t) * e + c0..(i * b + t) * e + c0 + d]
        } else {
            &k_sorted[(i * b + t - b) * e + c0..(i * b + t - b) * e + c0 + d]
        }
    };
    let value = |i: usize, t: usize, c0: usize| -> &[T] {
        if t < b {
            &v[(i * b + t) * e + c0..(i * b + t) * e + c0 + d]
        } else {
            &v_sorted[(i * b + t - b) * e + c0..(i * b + t - b) * e + c0 + d]
        }
    };
    for i in 0..n_b {
        for h in 0..heads {
            let c0 = h * d;
            for r in 0..b {
                let row = i * b + r;
                let qr = &q[row * e + c0..row * e + c0 + d];
                let mut max = T::neg_infinity();
                for (t, s) in scores.iter_mut().enumerate() {
                    let kt = key(i, t, c0);
                    let dot = qr.iter().zip(kt).fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total = total + *s;
                }
                let dst = &mut out[row * e + c0..row * e + c0 + d];
                for (t, s) in scores.iter_mut().enumerate() {
                    *s = *s / total;
                    for (o, &x) in dst.iter_mut().zip(value(i, t, c0)) {
                        *o = *o + *s * x;
                    }
                }
                if let Some(p) = probs.as_deref_mut() {
                    p.extend_from_slice(&scores);
                }
            }
        }
    }
    out
}

/// Gradient of [`window_core`]. Returns `(dq, dk, dv, dk_sorted, dv_sorted)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_core_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    k_sorted: &[f64],
    v_sorted: &[f64],
    probs: &[f64],
    grad_out: &[f64],
    bin_size: usize,
    embed: usize,
    heads: usize,
) -> [Vec<f64>; 5] {
    let (b, e) = (bin_size, embed);
    let l = q.len() / e;
    let n_b = l / b;
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; l * e];
    let mut dk = vec![0.0; l * e];
    let mut dv = vec![0.0; l * e];
    let mut dks = vec![0.0; l * e];
    let mut dvs = vec![0.0; l * e];
    let mut dp = vec![0.0; 2 * b];
    for i in 0..n_b {
        for h in 0..heads {
            let c0 = h * d;
            for r in 0..b {
                let row = i * b + r;
                let p = &probs[((i * heads + h) * b + r) * 2 * b..][..2 * b];
                let go = &grad_out[row * e + c0..row * e + c0 + d];
                // Offset of window entry t in its source buffer.
                let at = |t: usize| {
                    let src = if t < b { i * b + t } else { i * b + t - b };
                    src * e + c0
                };
                let mut weighted = 0.0;
                for t in 0..2 * b {
                    let o = at(t);
                    let vt = if t < b { &v[o..o + d] } else { &v_sorted[o..o + d] };
                    dp[t] = go.iter().zip(vt).map(|(a, c)| a * c).sum();
                    weighted += p[t] * dp[t];
                    let dvt = if t < b { &mut dv[o..o + d] } else { &mut dvs[o..o + d] };
                    for (g, &x) in dvt.iter_mut().zip(go) {
                        *g += p[t] * x;
                    }
                }
                let qr = &q[row * e + c0..row * e + c0 + d];
                for t in 0..2 * b {
                    let ds = p[t] * (dp[t] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let o = at(t);
                    let kt = if t < b { &k[o..o + d] } else { &k_sorted[o..o + d] };
                    let dqr = &mut dq[row * e + c0..row * e + c0 + d];
                    for (g, &x) in dqr.iter_mut().zip(kt) {
                        *g += ds * x;
                    }
                    let dkt = if t < b { &mut dk[o..o + d] } else { &mut dks[o..o + d] };
                    for (g, &x) in dkt.iter_mut().zip(qr) {
                        *g += ds * x;
                    }
                }
            }
        }
    }
    [dq, dk, dv, dks, dvs]
}

/// Full softmax attention over all `L` tokens per head, heads concatenated.
/// Materialises one `L × L` score matrix per head.
pub fn dense_attention<T: Float>(q: &[T], k: &[T], v: &[T], embed: usize, heads: usize) -> Vec<T> {
    let l = q.len() / embed;
    let d = embed / heads;
    let scale = T::one() / T::from(d).unwrap().sqrt();
    let mut out = vec![T::zero(); l * embed];
    let mut scores = vec![T::zero(); l * l];
    for h in 0..heads {
        let c0 = h * d;
        for r in 0..l {
            let qr = &q[r * embed + c0..r * embed + c0 + d];
            for t in 0..l {
                let kt = &k[t * embed + c0..t * embed + c0 + d];
                scores[r * l + t] = qr.iter().zip(kt).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
            }
        }
        for r in 0..l {
            let row = &mut scores[r * l..(r + 1) * l];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total = total + *s;
            }
            let dst = &mut out[r * embed + c0..r * embed + c0 + d];
            for (t, s) in row.iter().enumerate() {
                let w = *s / total;
                for (o, &x) in dst.iter_mut().zip(&v[t * embed + c0..t * embed + c0 + d]) {
                    *o = *o + w * x;
                }
            }
        }
    }
    out
}

/// Window attention for each bin over its own `B` elements plus the `B`
/// elements of its sorted counterpart, followed by the output projection
/// `w_o` (`e × e`, applied as `x·w_o`).
#[allow(clippy::too_many_arguments)]
pub fn windowed_attention(
    b_q: &BinSequence,
    b_k: &BinSequence,
    b_v: &BinSequence,
    sorted_k: &BinSequence,
    sorted_v: &BinSequence,
    heads: usize,
    w_o: &Tensor,
    counter: Option<&mut LayerScoreCount>,
) -> Result<BinSequence> {
    let shape = b_q.tensor().shape();
    for other in [b_k, b_v, sorted_k, sorted_v] {
        if other.tensor().shape() != shape {
            return Err(VtpError::Shape("window attention inputs differ in shape".into()));
        }
    }
    let e = b_q.embed();
    if heads == 0 || e % heads != 0 {
        return Err(VtpError::Config(format!("embed {e} not divisible by {heads} heads")));
    }
    if w_o.shape() != [e, e] {
        return Err(VtpError::Shape(format!("output projection {:?}, expected [{e}, {e}]", w_o.shape())));
    }
    let mut probs = Vec::new();
    let mixed = window_core(
        b_q.tensor().data(),
        b_k.tensor().data(),
        b_v.tensor().data(),
        sorted_k.tensor().data(),
        sorted_v.tensor().data(),
        b_q.bin_size(),
        e,
        heads,
        counter.is_some().then_some(&mut probs),
    );
    if let Some(c) = counter {
        c.window_per_head = probs.len() / heads;
        c.heads = heads;
    }
    let l = b_q.len();
    let mut out = vec![0.0; l * e];
    gemm(l, e, e, &mixed, false, w_o.data(), false, &mut out, 0.0);
    BinSequence::from_tensor(Tensor::new(shape, out)?)
}
