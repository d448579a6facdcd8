//! Branch fusion, per-joint voxel probabilities and integral regression.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::conv3d::{conv3d_forward, Conv3dLayer};
use crate::error::{Result, VtpError};
use crate::tensor::Tensor;
use crate::voxelgrid::{FeatureVolume, GridSpec, Vec3};

/// Per-joint probability over the voxels of a grid, `J × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointProbabilityVolume {
    dims: [usize; 3],
    values: Tensor,
}

impl JointProbabilityVolume {
    /// Checks non-negativity and per-joint normalization within 1e-9.
    pub fn new(values: Tensor, dims: [usize; 3]) -> Result<Self> {
        let l: usize = dims.iter().product();
        if values.shape().len() != 2 || values.cols() != l {
            return Err(VtpError::Shape(format!(
                "probability volume {:?} does not match dims {dims:?}",
                values.shape()
            )));
        }
        for j in 0..values.rows() {
            let row = values.row(j);
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(VtpError::NonFinite(format!("joint {j} has negative or NaN probability")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(VtpError::Shape(format!("joint {j} probabilities sum to {total}")));
            }
        }
        Ok(Self { dims, values })
    }

    pub fn joints(&self) -> usize {
        self.values.rows()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn joint(&self, j: usize) -> &[f64] {
        self.values.row(j)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// A 3D skeleton in world millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<Vec3>,
    pub skeleton: Vec<[usize; 2]>,
    pub confidence: Option<Vec<f64>>,
}

impl Pose3D {
    pub fn new(joints: Vec<Vec3>, skeleton: Vec<[usize; 2]>) -> Result<Self> {
        let pose = Self {
            joints,
            skeleton,
            confidence: None,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VtpError::NonFinite("pose joint coordinate".into()));
        }
        let n = self.joints.len();
        if let Some(&[a, b]) = self.skeleton.iter().find(|l| l[0] >= n || l[1] >= n) {
            return Err(VtpError::Shape(format!("limb ({a}, {b}) refers past {n} joints")));
        }
        if let Some(c) = &self.confidence {
            if c.len() != n {
                return Err(VtpError::Shape(format!("{} confidences for {n} joints", c.len())));
            }
        }
        Ok(())
    }

    pub fn translated(&self, d: Vec3) -> Pose3D {
        Pose3D {
            joints: self.joints.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect(),
            ..self.clone()
        }
    }
}

/// Softmax over each row of a `J × L` logit matrix.
fn softmax_rows(logits: &Tensor) -> Tensor {
    crate::autodiff::softmax(logits)
}

/// Concatenates the transformer (`e`) and convolution (`f_c`) branches along
/// channels, applies the head convolution and normalizes every joint over all
/// voxels with a softmax.
pub fn fuse_and_head(
    x_t: &FeatureVolume,
    x_c: &FeatureVolume,
    head_conv: &Conv3dLayer,
) -> Result<JointProbabilityVolume> {
    if x_t.dims() != x_c.dims() {
        return Err(VtpError::Shape(format!(
            "branch volumes have dims {:?} and {:?}",
            x_t.dims(),
            x_c.dims()
        )));
    }
    if head_conv.c_in() != x_t.channels() + x_c.channels() {
        return Err(VtpError::Shape(format!(
            "head expects {} channels, branches give {} + {}",
            head_conv.c_in(),
            x_t.channels(),
            x_c.channels()
        )));
    }
    let l = x_t.voxel_count();
    let mut data = x_t.tensor().data().to_vec();
    data.extend_from_slice(x_c.tensor().data());
    let fused = FeatureVolume::from_tensor(
        Tensor::new(&[x_t.channels() + x_c.channels(), l], data)?,
        x_t.dims(),
    )?;
    let logits = conv3d_forward(&fused, head_conv)?;
    if !logits.tensor().all_finite() {
        return Err(VtpError::NonFinite("head logits".into()));
    }
    JointProbabilityVolume::new(softmax_rows(logits.tensor()), x_t.dims())
}

/// `J_j = Σ P_j(v) · center(v)` over all voxels `v`, in world millimetres.
/// Confidence is the peak probability of each joint.
pub fn integral_regression(p: &JointProbabilityVolume, grid: &GridSpec) -> Result<Pose3D> {
    if grid.resolution != p.dims() {
        return Err(VtpError::Shape(format!(
            "grid {:?} vs probability dims {:?}",
            grid.resolution,
            p.dims()
        )));
    }
    let centers = grid.centers();
    let joints_t = p.tensor().matmul(&centers)?;
    let joints = (0..p.joints())
        .map(|j| {
            let r = joints_t.row(j);
            [r[0], r[1], r[2]]
        })
        .collect();
    let confidence = (0..p.joints())
        .map(|j| p.joint(j).iter().copied().fold(0.0, f64::max))
        .collect();
    Ok(Pose3D {
        joints,
        skeleton: Vec::new(),
        confidence: Some(confidence),
    })
}

/// Graph form of [`fuse_and_head`]: `e × L` and `f_c × L` nodes in, `J × L`
/// probability node out.
pub fn fuse_and_head_graph(
    g: &mut Graph,
    x_t: NodeId,
    x_c: NodeId,
    head_w: NodeId,
    head_b: NodeId,
    dims: [usize; 3],
    kernel: usize,
) -> Result<NodeId> {
    let fused = g.concat(&[x_t, x_c])?;
    let logits = g.conv3d(fused, head_w, head_b, dims, kernel)?;
    Ok(g.softmax(logits))
}

/// Graph form of [`integral_regression`]: `J × 3` joints.
pub fn integral_regression_graph(g: &mut Graph, p: NodeId, grid: &GridSpec) -> Result<NodeId> {
    let centers = g.constant(grid.centers());
    g.matmul(p, centers)
}

/// Per-joint L1 distance (summed over x, y, z), averaged over joints and
/// divided by `extent`.
pub fn l1_loss_graph(g: &mut Graph, joints: NodeId, target: &[Vec3], extent: f64) -> Result<NodeId> {
    let t = Tensor::new(&[target.len(), 3], target.iter().flatten().copied().collect())?;
    let t = g.constant(t);
    let d = g.sub(joints, t)?;
    let d = g.abs(d);
    let m = g.mean(d);
    Ok(g.scale(m, 3.0 / extent))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub joints: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Vec<f64>>,
}

/// The on-disk pose document: poses of one frame sharing a skeleton.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub poses: Vec<PoseRecord>,
    pub skeleton: Vec<[usize; 2]>,
}

impl PoseFile {
    pub fn from_poses(poses: &[Pose3D], skeleton: &[[usize; 2]]) -> Self {
        Self {
            poses: poses
                .iter()
                .map(|p| PoseRecord {
                    joints: p.joints.clone(),
                    confidence: p.confidence.clone(),
                })
                .collect(),
            skeleton: skeleton.to_vec(),
        }
    }

    pub fn to_poses(&self) -> Result<Vec<Pose3D>> {
        self.poses
            .iter()
            .map(|r| {
                let p = Pose3D {
                    joints: r.joints.clone(),
                    skeleton: self.skeleton.clone(),
                    confidence: r.confidence.clone(),
                };
                p.validate()?;
                Ok(p)
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
