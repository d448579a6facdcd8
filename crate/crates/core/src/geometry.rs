//! Pinhole cameras, 2D heatmap sampling and the multi-view feature volume.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtpError};
use crate::voxelgrid::{FeatureVolume, GridSpec, Vec3};

/// A distortion-free pinhole camera. `rotation` maps world to camera
/// coordinates (row-major), `translation` is in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "t")]
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(VtpError::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(VtpError::Config("image dimensions must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(VtpError::Config(format!(
                        "rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        if !self.translation.iter().chain(&[self.cx, self.cy]).all(|v| v.is_finite()) {
            return Err(VtpError::Config("camera parameters must be finite".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with world `+z` up and image
    /// `v` growing downward.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize(sub(target, eye))?;
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]))?;
        let down = cross(forward, right);
        let rotation = [
            right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1],
            forward[2],
        ];
        let re = mat_vec(&rotation, eye);
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation: [-re[0], -re[1], -re[2]],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// World point expressed in the camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let rp = mat_vec(&self.rotation, p);
        [
            rp[0] + self.translation[0],
            rp[1] + self.translation[1],
            rp[2] + self.translation[2],
        ]
    }

    pub fn in_image(&self, [u, v]: [f64; 2]) -> bool {
        (0.0..=(self.width - 1) as f64).contains(&u) && (0.0..=(self.height - 1) as f64).contains(&v)
    }
}

/// Perspective projection of a world point to pixel coordinates.
///
/// Returns `None` when the point is not strictly in front of the camera.
/// Points projecting outside the image are still returned.
pub fn project_point(cam: &CameraCalib, p: Vec3) -> Option<[f64; 2]> {
    let pc = cam.to_camera(p);
    if !(pc[2] > 0.0) {
        return None;
    }
    Some([
        cam.fx * pc[0] / pc[2] + cam.cx,
        cam.fy * pc[1] / pc[2] + cam.cy,
    ])
}

/// Per-joint 2D score maps of one view, `J × H × W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    joints: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(joints: usize, height: usize, width: usize) -> Self {
        Self {
            joints,
            height,
            width,
            values: vec![0.0; joints * height * width],
        }
    }

    pub fn new(joints: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if joints == 0 || height == 0 || width == 0 {
            return Err(VtpError::Shape("heatmap dimensions must be positive".into()));
        }
        if values.len() != joints * height * width {
            return Err(VtpError::Shape(format!(
                "heatmap {joints}×{height}×{width} needs {} values, got {}",
                joints * height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VtpError::NonFinite(format!(
                "heatmap value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            joints,
            height,
            width,
            values,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn plane(&self, joint: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[joint * n..(joint + 1) * n]
    }

    pub fn plane_mut(&mut self, joint: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.values[joint * n..(joint + 1) * n]
    }

    pub fn get(&self, joint: usize, row: usize, col: usize) -> f64 {
        self.values[(joint * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, joint: usize, row: usize, col: usize, v: f64) {
        let i = (joint * self.height + row) * self.width + col;
        self.values[i] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample at `(u, v)`; zero outside `[0, W−1] × [0, H−1]`.
    pub fn sample(&self, joint: usize, [u, v]: [f64; 2]) -> f64 {
        assert!(joint < self.joints, "joint {joint} out of range");
        let (w, h) = (self.width, self.height);
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return 0.0;
        }
        let x0 = (u.floor() as usize).min(w - 1);
        let y0 = (v.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let plane = self.plane(joint);
        let at = |r: usize, c: usize| plane[r * w + c];
        let top = at(y0, x0) * (1.0 - ax) + at(y0, x1) * ax;
        let bottom = at(y1, x0) * (1.0 - ax) + at(y1, x1) * ax;
        top * (1.0 - ay) + bottom * ay
    }
}

pub fn sample_heatmap(hm: &Heatmap, joint: usize, pixel: [f64; 2]) -> f64 {
    hm.sample(joint, pixel)
}

/// Averages every view's heatmap score at each voxel center over the views
/// observing that voxel (in front of the camera and projecting inside the
/// image). Voxels no camera observes get 0.
pub fn aggregate_feature_volume(
    cams: &[CameraCalib],
    heatmaps: &[Heatmap],
    grid: &GridSpec,
) -> Result<FeatureVolume> {
    if cams.is_empty() {
        return Err(VtpError::Config("no cameras given".into()));
    }
    if cams.len() != heatmaps.len() {
        return Err(VtpError::Shape(format!(
            "{} cameras but {} heatmaps",
            cams.len(),
            heatmaps.len()
        )));
    }
    let joints = heatmaps[0].joints();
    if heatmaps.iter().any(|h| h.joints() != joints) {
        return Err(VtpError::Shape("heatmaps disagree on joint count".into()));
    }

    let centers = grid.centers();
    let l = grid.voxel_count();
    let mut counts = vec![0u32; l];
    let mut vol = FeatureVolume::zeros(joints, grid.resolution);
    let mut pixels: Vec<Option<[f64; 2]>> = Vec::with_capacity(l);

    for (cam, hm) in cams.iter().zip(heatmaps) {
        pixels.clear();
        pixels.extend((0..l).map(|i| {
            let c = centers.row(i);
            project_point(cam, [c[0], c[1], c[2]]).filter(|&px| cam.in_image(px))
        }));
        for (count, px) in counts.iter_mut().zip(&pixels) {
            *count += px.is_some() as u32;
        }
        for j in 0..joints {
            let channel = vol.channel_mut(j);
            for (acc, px) in channel.iter_mut().zip(&pixels) {
                if let Some(px) = px {
                    *acc += hm.sample(j, *px);
                }
            }
        }
    }

    for j in 0..joints {
        for (acc, &n) in vol.channel_mut(j).iter_mut().zip(&counts) {
            if n > 0 {
                *acc /= n as f64;
            }
        }
    }
    Ok(vol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSet {
    pub cameras: Vec<CameraCalib>,
}

impl CameraSet {
    pub fn load(path: &Path) -> Result<Self> {
        let set: CameraSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for cam in &set.cameras {
            cam.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: Vec3) -> Result<Vec3> {
    let n = norm(a);
    if !(n > 1e-12) {
        return Err(VtpError::Config("degenerate camera orientation".into()));
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn mat_vec(m: &[f64; 9], p: Vec3) -> Vec3 {
    [
        m[0] * p[0] + m[1] * p[1] + m[2] * p[2],
        m[3] * p[0] + m[4] * p[1] + m[5] * p[2],
        m[6] * p[0] + m[7] * p[1] + m[8] * p[2],
    ]
}
