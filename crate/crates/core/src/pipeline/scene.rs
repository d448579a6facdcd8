//! Synthetic multi-camera scenes: random skeletons, camera rings and
//! rendered per-view Gaussian joint heatmaps.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::io::{read_tensor_set, write_tensor_set, DType};
use crate::error::{Result, VtpError};
use crate::geometry::{project_point, CameraCalib, CameraSet, Heatmap};
use crate::posehead::{Pose3D, PoseFile};
use crate::tensor::Tensor;
use crate::voxelgrid::{GridSpec, Vec3};

pub const JOINTS: usize = 15;

/// Limbs of the 15-joint layout: 0 neck, 1 nose, 2 mid-hip, 3–5 left
/// shoulder/elbow/wrist, 6–8 left hip/knee/ankle, 9–11 right
/// shoulder/elbow/wrist, 12–14 right hip/knee/ankle.
pub const LIMBS: [[usize; 2]; 14] = [
    [0, 1],
    [0, 2],
    [0, 3],
    [3, 4],
    [4, 5],
    [2, 6],
    [6, 7],
    [7, 8],
    [0, 9],
    [9, 10],
    [10, 11],
    [2, 12],
    [12, 13],
    [13, 14],
];

/// Nominal bone lengths in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SkeletonTemplate {
    pub head: f64,
    pub spine: f64,
    pub hip_half_width: f64,
    pub shoulder_half_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    /// Relative bone-length jitter, at most 0.1.
    pub jitter: f64,
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        Self {
            head: 150.0,
            spine: 450.0,
            hip_half_width: 100.0,
            shoulder_half_width: 180.0,
            upper_arm: 260.0,
            forearm: 240.0,
            thigh: 380.0,
            shin: 370.0,
            jitter: 0.1,
        }
    }
}

/// Cube-shaped person grid without a position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PersonGrid {
    pub extent: f64,
    pub resolution: usize,
}

impl Default for PersonGrid {
    fn default() -> Self {
        Self {
            extent: 2000.0,
            resolution: 32,
        }
    }
}

impl PersonGrid {
    pub fn at(&self, center: Vec3) -> Result<GridSpec> {
        GridSpec::cube(center, self.extent, self.resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_people: usize,
    pub space_center: Vec3,
    pub space_extent: Vec3,
    pub person_grid: PersonGrid,
    pub skeleton: SkeletonTemplate,
    pub cameras: Vec<CameraCalib>,
    /// Gaussian standard deviation in pixels.
    pub heatmap_sigma: f64,
    /// Additive Gaussian noise on every heatmap pixel (clipped afterwards).
    pub noise_std: f64,
    /// Probability of blanking one joint's heatmap in one view.
    pub dropout: f64,
}

/// `n` cameras evenly spaced on a horizontal circle, all aimed at `target`.
#[allow(clippy::too_many_arguments)]
pub fn camera_ring(
    n: usize,
    radius: f64,
    height: f64,
    target: Vec3,
    focal: f64,
    width: usize,
    image_height: usize,
) -> Result<Vec<CameraCalib>> {
    (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64 + PI / 6.0;
            let eye = [target[0] + radius * a.cos(), target[1] + radius * a.sin(), height];
            CameraCalib::look_at(
                eye,
                target,
                focal,
                focal,
                (width as f64 - 1.0) / 2.0,
                (image_height as f64 - 1.0) / 2.0,
                width,
                image_height,
            )
        })
        .collect()
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_people: 1,
            space_center: [0.0, 0.0, 1000.0],
            space_extent: [4000.0, 4000.0, 2000.0],
            person_grid: PersonGrid::default(),
            skeleton: SkeletonTemplate::default(),
            cameras: camera_ring(3, 4000.0, 1500.0, [0.0, 0.0, 800.0], 160.0, 320, 240)
                .expect("default camera ring"),
            heatmap_sigma: 3.0,
            noise_std: 0.0,
            dropout: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_people == 0 {
            return Err(VtpError::Config("n_people must be ≥ 1".into()));
        }
        if self.cameras.is_empty() {
            return Err(VtpError::Config("scene needs at least one camera".into()));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(VtpError::Config("heatmap_sigma must be positive".into()));
        }
        if !(0.0..=0.1).contains(&self.skeleton.jitter) {
            return Err(VtpError::Config("skeleton jitter must lie in [0, 0.1]".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(self.noise_std >= 0.0) {
            return Err(VtpError::Config("dropout must be in [0, 1] and noise_std ≥ 0".into()));
        }
        if self.space_extent.iter().any(|&e| !(e > 0.0)) {
            return Err(VtpError::Config("space extent must be positive".into()));
        }
        self.person_grid.at(self.space_center)?;
        Ok(())
    }
}

/// A generated or loaded scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cameras: Vec<CameraCalib>,
    pub heatmaps: Vec<Heatmap>,
    pub poses: Vec<Pose3D>,
    /// Bounding-box center of every person.
    pub centers: Vec<Vec3>,
    pub person_grid: PersonGrid,
    pub space_center: Vec3,
    pub space_extent: Vec3,
}

impl Scene {
    pub fn joints(&self) -> usize {
        self.heatmaps.first().map_or(JOINTS, |h| h.joints())
    }

    pub fn skeleton(&self) -> Vec<[usize; 2]> {
        self.poses.first().map_or_else(|| LIMBS.to_vec(), |p| p.skeleton.clone())
    }
}

/// Bounding-box center.
pub fn bbox_center(joints: &[Vec3]) -> Vec3 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in joints {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    [0, 1, 2].map(|a| (lo[a] + hi[a]) / 2.0)
}

fn deg(d: f64) -> f64 {
    d * PI / 180.0
}

/// Unit vector hanging down, swung forward (`+y`) by `pitch` and out to
/// `side` (±1 along `x`) by `roll`.
fn hanging(pitch: f64, roll: f64, side: f64) -> Vec3 {
    [side * roll.sin(), pitch.sin() * roll.cos(), -pitch.cos() * roll.cos()]
}

/// Unit vector pointing up, leaning forward by `pitch` and sideways by `roll`.
fn upright(pitch: f64, roll: f64) -> Vec3 {
    [roll.sin(), pitch.sin() * roll.cos(), pitch.cos() * roll.cos()]
}

fn step(from: Vec3, dir: Vec3, len: f64) -> Vec3 {
    [from[0] + dir[0] * len, from[1] + dir[1] * len, from[2] + dir[2] * len]
}

/// A random body-frame skeleton rooted at the mid-hip, then yawed.
fn sample_skeleton<R: Rng>(t: &SkeletonTemplate, rng: &mut R) -> Vec<Vec3> {
    let mut len = |base: f64| base * (1.0 + rng.random_range(-t.jitter..=t.jitter));
    let (head, spine, hip_w, sho_w) = (len(t.head), len(t.spine), len(t.hip_half_width), len(t.shoulder_half_width));
    let arms = [(len(t.upper_arm), len(t.forearm)), (len(t.upper_arm), len(t.forearm))];
    let legs = [(len(t.thigh), len(t.shin)), (len(t.thigh), len(t.shin))];

    let mut j = [[0.0; 3]; JOINTS];
    j[2] = [0.0; 3];
    j[0] = step(j[2], upright(deg(rng.random_range(-15.0..15.0)), deg(rng.random_range(-10.0..10.0))), spine);
    j[1] = step(j[0], upright(deg(rng.random_range(-20.0..20.0)), deg(rng.random_range(-15.0..15.0))), head);
    for (side, base, (upper, fore)) in [(1.0, 3, arms[0]), (-1.0, 9, arms[1])] {
        let shoulder = [j[0][0] + side * sho_w, j[0][1], j[0][2]];
        let pitch = deg(rng.random_range(-30.0..90.0));
        let roll = deg(rng.random_range(0.0..80.0));
        let elbow = step(shoulder, hanging(pitch, roll, side), upper);
        let flex = deg(rng.random_range(0.0..120.0));
        let wrist = step(elbow, hanging(pitch + flex, roll, side), fore);
        j[base] = shoulder;
        j[base + 1] = elbow;
        j[base + 2] = wrist;
    }
    for (side, base, (thigh, shin)) in [(1.0, 6, legs[0]), (-1.0, 12, legs[1])] {
        let hip = [side * hip_w, 0.0, 0.0];
        let pitch = deg(rng.random_range(-20.0..50.0));
        let roll = deg(rng.random_range(0.0..15.0));
        let knee = step(hip, hanging(pitch, roll, side), thigh);
        let bend = deg(rng.random_range(0.0..80.0));
        let ankle = step(knee, hanging(pitch - bend, roll, side), shin);
        j[base] = hip;
        j[base + 1] = knee;
        j[base + 2] = ankle;
    }
    let yaw: f64 = rng.random_range(0.0..2.0 * PI);
    let (s, c) = yaw.sin_cos();
    j.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect()
}

/// Renders one view: per joint, the maximum over people of an isotropic
/// Gaussian around the projected joint.
fn render_view(cam: &CameraCalib, poses: &[Pose3D], sigma: f64) -> Heatmap {
    let (w, h) = (cam.width, cam.height);
    let mut hm = Heatmap::zeros(JOINTS, h, w);
    let reach = 4.0 * sigma;
    for pose in poses {
        for (j, p) in pose.joints.iter().enumerate() {
            let Some([u, v]) = project_point(cam, *p) else { continue };
            let x0 = (u - reach).floor().max(0.0) as usize;
            let y0 = (v - reach).floor().max(0.0) as usize;
            let x1 = ((u + reach).ceil().min(w as f64 - 1.0)).max(-1.0);
            let y1 = ((v + reach).ceil().min(h as f64 - 1.0)).max(-1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let plane = hm.plane_mut(j);
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    let cell = &mut plane[y * w + x];
                    *cell = cell.max(g.min(1.0));
                }
            }
        }
    }
    hm
}

/// Deterministic scene synthesis from `cfg.seed`.
pub fn synth_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid0 = cfg.person_grid.at([0.0; 3])?;
    let (lo, hi) = grid0.center_bounds();
    let floor = cfg.space_center[2] - cfg.space_extent[2] / 2.0;
    let min_sep = cfg.person_grid.extent / 2.0;

    let mut poses = Vec::new();
    let mut centers: Vec<Vec3> = Vec::new();
    let mut attempts = 0;
    while poses.len() < cfg.n_people {
        attempts += 1;
        if attempts > 10_000 {
            return Err(VtpError::Config(format!(
                "could not place {} people in the configured space",
                cfg.n_people
            )));
        }
        let body = sample_skeleton(&cfg.skeleton, &mut rng);
        let c0 = bbox_center(&body);
        let min_z = body.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let fits = body
            .iter()
            .all(|p| (0..3).all(|a| p[a] - c0[a] >= lo[a] && p[a] - c0[a] <= hi[a]));
        if !fits {
            continue;
        }
        let half = [0, 1].map(|a| (cfg.space_extent[a] - cfg.person_grid.extent).max(0.0) / 2.0);
        let cx = cfg.space_center[0] + rng.random_range(-half[0]..=half[0]);
        let cy = cfg.space_center[1] + rng.random_range(-half[1]..=half[1]);
        let shift = [cx - c0[0], cy - c0[1], floor - min_z];
        let joints: Vec<Vec3> = body.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect();
        let center = bbox_center(&joints);
        if centers.iter().any(|c| crate::geometry::norm(crate::geometry::sub(*c, center)) < min_sep) {
            continue;
        }
        centers.push(center);
        poses.push(Pose3D::new(joints, LIMBS.to_vec())?);
    }

    let mut heatmaps: Vec<Heatmap> = cfg
        .cameras
        .iter()
        .map(|cam| render_view(cam, &poses, cfg.heatmap_sigma))
        .collect();
    if cfg.noise_std > 0.0 || cfg.dropout > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        for hm in &mut heatmaps {
            for j in 0..JOINTS {
                let drop = rng.random_bool(cfg.dropout);
                for v in hm.plane_mut(j) {
                    *v = if drop {
                        0.0
                    } else if cfg.noise_std > 0.0 {
                        (*v + noise.sample(&mut rng)).clamp(0.0, 1.0)
                    } else {
                        *v
                    };
                }
            }
        }
    }
    Ok(Scene {
        cameras: cfg.cameras.clone(),
        heatmaps,
        poses,
        centers,
        person_grid: cfg.person_grid.clone(),
        space_center: cfg.space_center,
        space_extent: cfg.space_extent,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    person_grid: PersonGrid,
    space_center: Vec3,
    space_extent: Vec3,
    centers: Vec<Vec3>,
}

pub const CAMERAS_FILE: &str = "cameras.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENE_FILE: &str = "scene.json";
pub const HEATMAP_DIR: &str = "heatmaps";

impl Scene {
    /// Writes cameras, ground-truth poses, scene metadata and one heatmap
    /// tensor (`J × H × W`) per view.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        CameraSet {
            cameras: self.cameras.clone(),
        }
        .save(&dir.join(CAMERAS_FILE))?;
        PoseFile::from_poses(&self.poses, &self.skeleton()).save(&dir.join(GROUND_TRUTH_FILE))?;
        let meta = SceneMeta {
            person_grid: self.person_grid.clone(),
            space_center: self.space_center,
            space_extent: self.space_extent,
            centers: self.centers.clone(),
        };
        fs::write(dir.join(SCENE_FILE), serde_json::to_string_pretty(&meta)?)?;
        let tensors: Vec<(String, Tensor)> = self
            .heatmaps
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let t = Tensor::new(&[h.joints(), h.height(), h.width()], h.values().to_vec())?;
                Ok((format!("view{i}"), t))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_tensor_set(&dir.join(HEATMAP_DIR), &refs, DType::F64)
    }

    pub fn load(dir: &Path) -> Result<Scene> {
        let cameras = CameraSet::load(&dir.join(CAMERAS_FILE))?.cameras;
        let poses = PoseFile::load(&dir.join(GROUND_TRUTH_FILE))?.to_poses()?;
        let meta: SceneMeta = serde_json::from_str(&fs::read_to_string(dir.join(SCENE_FILE))?)?;
        let heatmaps = read_tensor_set(&dir.join(HEATMAP_DIR))?
            .into_iter()
            .map(|(name, t)| {
                let s = t.shape().to_vec();
                if s.len() != 3 {
                    return Err(VtpError::Shape(format!("heatmap {name} has shape {s:?}")));
                }
                Heatmap::new(s[0], s[1], s[2], t.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        if heatmaps.len() != cameras.len() {
            return Err(VtpError::Shape(format!(
                "{} heatmaps for {} cameras",
                heatmaps.len(),
                cameras.len()
            )));
        }
        Ok(Scene {
            cameras,
            heatmaps,
            poses,
            centers: meta.centers,
            person_grid: meta.person_grid,
            space_center: meta.space_center,
            space_extent: meta.space_extent,
        })
    }
}
