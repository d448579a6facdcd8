//! Sparse Sinkhorn transformer encoder over flattened voxel sequences.
//!
//! Each layer projects the sequence to queries, keys and values, scores
//! bins against each other through their mean query/key vectors, relaxes
//! that score matrix to a doubly-stochastic one with Sinkhorn iterations,
//! uses it to pull a matching "sorted" bin next to every bin, and finally
//! lets each bin attend over its own `B` elements plus the `B` elements of
//! its sorted partner. Attention and feed-forward sublayers are wrapped in
//! residual connections with post-layer normalization.

pub mod graph;
pub mod sinkhorn;
pub mod window;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use sinkhorn::{marginal_deviation, sinkhorn_normalize, SinkhornMatrix};
pub use window::{
    bin_mean, bin_means, correlation_matrix, dense_attention, dense_score_elements, reorder_bins,
    sparse_score_elements, windowed_attention, LayerScoreCount, ReorderMode, ScoreCounter,
};

use crate::conv3d::{conv3d_forward, Conv3dLayer};
use crate::error::{Result, VtpError};
use crate::tensor::{matmul_t, Tensor};
use crate::voxelgrid::{check_divisible, flatten, partition_bins, unflatten, BinSequence, FeatureVolume};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub embed: usize,
    pub heads: usize,
    pub bin_size: usize,
    pub sinkhorn_iters: usize,
    /// Divisor applied to the bin correlation matrix; `None` means `√embed`.
    pub temperature: Option<f64>,
    pub layers: usize,
    pub reorder: ReorderMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            embed: 256,
            heads: 2,
            bin_size: 128,
            sinkhorn_iters: 8,
            temperature: None,
            layers: 1,
            reorder: ReorderMode::Soft,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    pub fn tau(&self) -> f64 {
        self.temperature.unwrap_or((self.embed as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(VtpError::Config(format!(
                "embed {} must be a positive multiple of heads {}",
                self.embed, self.heads
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(VtpError::Config("sinkhorn_iters must be ≥ 1".into()));
        }
        if self.bin_size == 0 {
            return Err(VtpError::Config("bin_size must be ≥ 1".into()));
        }
        if !(self.tau() > 0.0 && self.tau().is_finite()) {
            return Err(VtpError::Config(format!("temperature must be positive, got {}", self.tau())));
        }
        Ok(())
    }

    /// Checks that a sequence of `len` voxels splits into whole bins.
    pub fn check_length(&self, len: usize) -> Result<()> {
        check_divisible(len, self.bin_size)
    }
}

/// Weights of one encoder layer. Linear maps act on row vectors (`x·W`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// `e × 4e` and `4e`.
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    /// `4e × e` and `e`.
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl EncoderLayerWeights {
    pub fn init<R: Rng + ?Sized>(embed: usize, rng: &mut R) -> Self {
        let e = embed;
        Self {
            w_q: uniform(&[e, e], e, rng),
            w_k: uniform(&[e, e], e, rng),
            w_v: uniform(&[e, e], e, rng),
            w_o: uniform(&[e, e], e, rng),
            ff1_w: uniform(&[e, 4 * e], e, rng),
            ff1_b: uniform(&[4 * e], e, rng),
            ff2_w: uniform(&[4 * e, e], 4 * e, rng),
            ff2_b: uniform(&[e], 4 * e, rng),
            ln1_gain: Tensor::full(&[e], 1.0),
            ln1_bias: Tensor::zeros(&[e]),
            ln2_gain: Tensor::full(&[e], 1.0),
            ln2_bias: Tensor::zeros(&[e]),
        }
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// The embedding convolution, the learnable positional table and the
/// encoder layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `j → e`, kernel 3.
    pub embed_conv: Conv3dLayer,
    /// `L × e`.
    pub positional: Tensor,
    pub layers: Vec<EncoderLayerWeights>,
}

impl AttentionWeights {
    pub fn init<R: Rng + ?Sized>(
        joints: usize,
        seq_len: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed_conv = Conv3dLayer::init(joints, cfg.embed, 3, rng)?;
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let positional = Tensor::from_fn(&[seq_len, cfg.embed], |_| normal.sample(rng));
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayerWeights::init(cfg.embed, rng))
            .collect();
        Ok(Self {
            embed_conv,
            positional,
            layers,
        })
    }

    pub fn embed(&self) -> usize {
        self.embed_conv.c_out()
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let e = cfg.embed;
        if self.embed_conv.c_out() != e || self.embed_conv.kernel() != 3 {
            return Err(VtpError::Shape("embedding conv does not match config".into()));
        }
        if self.positional.shape().len() != 2 || self.positional.cols() != e {
            return Err(VtpError::Shape(format!(
                "positional table {:?} does not have {e} columns",
                self.positional.shape()
            )));
        }
        if self.layers.len() != cfg.layers {
            return Err(VtpError::Shape(format!(
                "{} encoder layers but config asks for {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        let e4 = 4 * e;
        let want: [&[usize]; 12] = [
            &[e, e],
            &[e, e],
            &[e, e],
            &[e, e],
            &[e, e4],
            &[e4],
            &[e4, e],
            &[e],
            &[e],
            &[e],
            &[e],
            &[e],
        ];
        for layer in &self.layers {
            for ((name, got), exp) in layer.tensors().iter().zip(want) {
                if got.shape() != exp {
                    return Err(VtpError::Shape(format!(
                        "{name} is {:?}, expected {exp:?}",
                        got.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Row-wise layer normalization with gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let e = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(e) {
        let mean = row.iter().sum::<f64>() / e as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// `x·W + b` with `b` broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul_t(x, false, w, false)?;
    if let Some(b) = b {
        let n = y.cols();
        for row in y.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
    }
    Ok(y)
}

/// Embedding convolution, positional table, flatten and partition.
pub fn embed_volume(vol: &FeatureVolume, weights: &AttentionWeights, bin_size: usize) -> Result<BinSequence> {
    let conv = conv3d_forward(vol, &weights.embed_conv)?;
    let seq = flatten(&conv);
    if weights.positional.shape() != seq.shape() {
        return Err(VtpError::Shape(format!(
            "positional table {:?} does not match sequence {:?}",
            weights.positional.shape(),
            seq.shape()
        )));
    }
    let seq = seq.zip_map(&weights.positional, |a, b| a + b);
    partition_bins(&seq, bin_size)
}

/// One encoder layer on an `L × e` sequence.
pub fn encoder_layer(
    x: &Tensor,
    lw: &EncoderLayerWeights,
    cfg: &AttentionConfig,
    counter: Option<&mut ScoreCounter>,
) -> Result<Tensor> {
    let b = cfg.bin_size;
    let q = partition_bins(&linear(x, &lw.w_q, None)?, b)?;
    let k = partition_bins(&linear(x, &lw.w_k, None)?, b)?;
    let v = partition_bins(&linear(x, &lw.w_v, None)?, b)?;
    let (q_mean, k_mean) = bin_means(&q, &k)?;
    let r = correlation_matrix(&q_mean, &k_mean, cfg.tau())?;
    let sink = sinkhorn_normalize(&r, cfg.sinkhorn_iters)?;
    let k_sorted = reorder_bins(&k, &sink, cfg.reorder)?;
    let v_sorted = reorder_bins(&v, &sink, cfg.reorder)?;
    let mut count = LayerScoreCount {
        correlation: r.len(),
        window_per_head: 0,
        heads: cfg.heads,
    };
    let attn = windowed_attention(
        &q,
        &k,
        &v,
        &k_sorted,
        &v_sorted,
        cfg.heads,
        &lw.w_o,
        counter.is_some().then_some(&mut count),
    )?;
    if let Some(c) = counter {
        c.layers.push(count);
    }
    let x1 = layer_norm(
        &x.zip_map(&attn.to_sequence(), |a, b| a + b),
        &lw.ln1_gain,
        &lw.ln1_bias,
    );
    let hidden = linear(&x1, &lw.ff1_w, Some(&lw.ff1_b))?.map(|v| v.max(0.0));
    let ff = linear(&hidden, &lw.ff2_w, Some(&lw.ff2_b))?;
    Ok(layer_norm(&x1.zip_map(&ff, |a, b| a + b), &lw.ln2_gain, &lw.ln2_bias))
}

/// Transformer branch: `j`-channel volume in, `e`-channel volume out.
pub fn encoder_forward(
    vol: &FeatureVolume,
    weights: &AttentionWeights,
    cfg: &AttentionConfig,
) -> Result<FeatureVolume> {
    encoder_forward_counted(vol, weights, cfg, None)
}

pub fn encoder_forward_counted(
    vol: &FeatureVolume,
    weights: &AttentionWeights,
    cfg: &AttentionConfig,
    mut counter: Option<&mut ScoreCounter>,
) -> Result<FeatureVolume> {
    cfg.validate()?;
    weights.validate(cfg)?;
    let mut x = embed_volume(vol, weights, cfg.bin_size)?.to_sequence();
    for lw in &weights.layers {
        x = encoder_layer(&x, lw, cfg, counter.as_deref_mut())?;
    }
    unflatten(&x, vol.dims())
}
