//! The full per-person network: transformer branch, residual convolution
//! branch and the fused 3×3×3 head.

use rand::Rng;

use crate::attention::graph::encoder_graph;
use crate::attention::{encoder_forward, AttentionConfig, AttentionWeights};
use crate::autodiff::{Graph, NodeId};
use crate::conv3d::{residual_forward, Conv3dLayer, ResidualBlock};
use crate::error::{Result, VtpError};
use crate::posehead::{fuse_and_head, fuse_and_head_graph, integral_regression, JointProbabilityVolume, Pose3D};
use crate::tensor::Tensor;
use crate::voxelgrid::{FeatureVolume, GridSpec};

pub const HEAD_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct VtpWeights {
    pub attention: AttentionWeights,
    /// `J → f_c`.
    pub residual: ResidualBlock,
    /// `e + f_c → J`, kernel 3. Its bias stays zero and is not a trainable
    /// parameter: a per-joint constant cannot change a softmax over voxels.
    pub head: Conv3dLayer,
}

impl VtpWeights {
    pub fn init<R: Rng + ?Sized>(
        joints: usize,
        seq_len: usize,
        conv_channels: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = AttentionWeights::init(joints, seq_len, cfg, rng)?;
        let residual = ResidualBlock::init(joints, conv_channels, rng)?;
        let mut head = Conv3dLayer::init(cfg.embed + conv_channels, joints, HEAD_KERNEL, rng)?;
        head.bias = Tensor::zeros(&[joints]);
        Ok(Self {
            attention,
            residual,
            head,
        })
    }

    pub fn joints(&self) -> usize {
        self.head.c_out()
    }

    pub fn conv_channels(&self) -> usize {
        self.residual.c_out()
    }

    /// Parameter names in the order of [`VtpWeights::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "attention.embed_conv.weights".to_string(),
            "attention.embed_conv.bias".to_string(),
            "attention.positional".to_string(),
        ];
        for (i, l) in self.attention.layers.iter().enumerate() {
            names.extend(l.tensors().iter().map(|(n, _)| format!("attention.layer{i}.{n}")));
        }
        for part in ["conv1", "conv2", "skip"] {
            names.push(format!("residual.{part}.weights"));
            names.push(format!("residual.{part}.bias"));
        }
        names.push("head.weights".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.attention.params();
        let r = &self.residual;
        out.extend([
            &r.conv1.weights,
            &r.conv1.bias,
            &r.conv2.weights,
            &r.conv2.bias,
            &r.skip.weights,
            &r.skip.bias,
            &self.head.weights,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.attention.params_mut();
        let r = &mut self.residual;
        out.extend([
            &mut r.conv1.weights,
            &mut r.conv1.bias,
            &mut r.conv2.weights,
            &mut r.conv2.bias,
            &mut r.skip.weights,
            &mut r.skip.bias,
            &mut self.head.weights,
        ]);
        out
    }

    /// Replaces every parameter, checking shapes.
    pub fn load_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        let names = self.param_names();
        let mut slots = self.params_mut();
        if values.len() != slots.len() {
            return Err(VtpError::Shape(format!(
                "{} tensors given for {} parameters",
                values.len(),
                slots.len()
            )));
        }
        for ((slot, v), name) in slots.iter_mut().zip(values).zip(names) {
            if slot.shape() != v.shape() {
                return Err(VtpError::Shape(format!(
                    "{name} is {:?}, expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            **slot = v;
        }
        Ok(())
    }
}

/// Joint probabilities for one person volume.
pub fn forward_probabilities(
    vol: &FeatureVolume,
    weights: &VtpWeights,
    cfg: &AttentionConfig,
) -> Result<JointProbabilityVolume> {
    let x_t = encoder_forward(vol, &weights.attention, cfg)?;
    let x_c = residual_forward(vol, &weights.residual)?;
    fuse_and_head(&x_t, &x_c, &weights.head)
}

/// Regressed pose for one person volume on `grid`.
pub fn forward_pose(vol: &FeatureVolume, grid: &GridSpec, weights: &VtpWeights, cfg: &AttentionConfig) -> Result<Pose3D> {
    integral_regression(&forward_probabilities(vol, weights, cfg)?, grid)
}

/// Registers a volume and the parameter leaves (in [`VtpWeights::params`]
/// order) and builds the `J × L` probability node.
pub fn model_graph(
    g: &mut Graph,
    vol: NodeId,
    dims: [usize; 3],
    params: &[NodeId],
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    let n_att = AttentionWeights::param_count(cfg.layers);
    if params.len() != n_att + 7 {
        return Err(VtpError::Shape(format!("{} model parameters, expected {}", params.len(), n_att + 7)));
    }
    let x_t = encoder_graph(g, vol, dims, &params[..n_att], cfg)?;
    let r = &params[n_att..];
    let h = g.conv3d(vol, r[0], r[1], dims, 3)?;
    let h = g.conv3d(h, r[2], r[3], dims, 3)?;
    let skip = g.conv3d(vol, r[4], r[5], dims, 1)?;
    let x_c = g.add(h, skip)?;
    let x_c = g.relu(x_c);
    let joints = g.value(r[6]).rows();
    let head_b = g.constant(Tensor::zeros(&[joints]));
    fuse_and_head_graph(g, x_t, x_c, r[6], head_b, dims, HEAD_KERNEL)
}
