//! Scene synthesis, two-stage inference, toy training, benchmarking and
//! the on-disk formats used by the command line tool.

pub mod bench;
pub mod io;
pub mod model;
pub mod proposal;
pub mod scene;
pub mod train;

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Result, VtpError};
use crate::geometry::aggregate_feature_volume;
use crate::metrics::{evaluate, EvalConfig, FrameEval, MetricsReport};
use crate::posehead::Pose3D;
use crate::voxelgrid::Vec3;

pub use bench::{bench_attention, BenchRow};
pub use io::DType;
pub use model::{forward_pose, model_graph, VtpWeights};
pub use proposal::{coarse_center_proposal, propose_centers, CenterCandidate, ProposalConfig};
pub use scene::{synth_scene, Scene, SceneConfig};
pub use train::{train_toy, TrainConfig, TrainOutcome};

/// Parses a JSON config; malformed or unknown fields are configuration
/// errors rather than I/O errors.
pub fn parse_config<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| VtpError::Config(e.to_string()))
}

/// Pretty-printed JSON Schema of a config type, newline-terminated.
pub fn config_schema<T: JsonSchema>() -> Result<String> {
    Ok(serde_json::to_string_pretty(&schemars::schema_for!(T))? + "\n")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    #[default]
    GroundTruth,
    CoarseProposal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub attention: AttentionConfig,
    /// Output channels of the residual convolution branch; `None` means
    /// the embedding size.
    pub conv_channels: Option<usize>,
    pub center_source: CenterSource,
    pub proposal: ProposalConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Numeric precision of the attention benchmark and of written weights.
    pub precision: Precision,
    /// Default output directory of the command line tool.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            conv_channels: None,
            center_source: CenterSource::GroundTruth,
            proposal: ProposalConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            precision: Precision::F64,
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = parse_config(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn conv_channels(&self) -> usize {
        self.conv_channels.unwrap_or(self.attention.embed)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.eval.validate()?;
        self.train.validate()?;
        if self.conv_channels == Some(0) {
            return Err(VtpError::Config("conv_channels must be positive".into()));
        }
        let p = &self.proposal;
        if !(p.voxel_size > 0.0 && p.smoothing > 0.0 && p.refine_radius > 0.0 && p.min_separation >= 0.0) {
            return Err(VtpError::Config("proposal sizes must be positive".into()));
        }
        Ok(())
    }

    /// Checks the config against a scene's person grid.
    pub fn validate_for(&self, scene: &Scene) -> Result<()> {
        self.validate()?;
        self.attention.check_length(scene.person_grid.resolution.pow(3))
    }

    pub fn dtype(&self) -> DType {
        match self.precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub centers: Vec<Vec3>,
    pub poses: Vec<Pose3D>,
    pub report: MetricsReport,
}

/// Centers from ground truth or from coarse proposals, per `cfg`.
pub fn person_centers(scene: &Scene, cfg: &RunConfig) -> Result<Vec<Vec3>> {
    Ok(match cfg.center_source {
        CenterSource::GroundTruth => scene.centers.clone(),
        CenterSource::CoarseProposal => propose_centers(
            &scene.cameras,
            &scene.heatmaps,
            scene.space_center,
            scene.space_extent,
            &cfg.proposal,
        )?
        .into_iter()
        .map(|c| c.center)
        .collect(),
    })
}

/// Per center: aggregate, run both branches and the head, regress, then
/// score all poses against the scene's ground truth.
pub fn run_inference(scene: &Scene, weights: &VtpWeights, cfg: &RunConfig) -> Result<InferenceOutput> {
    cfg.validate_for(scene)?;
    let centers = person_centers(scene, cfg)?;
    let skeleton = scene.skeleton();
    let mut poses = Vec::with_capacity(centers.len());
    for c in &centers {
        let grid = scene.person_grid.at(*c)?;
        let vol = aggregate_feature_volume(&scene.cameras, &scene.heatmaps, &grid)?;
        let mut pose = forward_pose(&vol, &grid, weights, &cfg.attention)?;
        pose.skeleton = skeleton.clone();
        poses.push(pose);
    }
    let frame = FrameEval::new(poses.clone(), scene.poses.clone())?;
    let report = evaluate(&[frame], &cfg.eval)?;
    Ok(InferenceOutput {
        centers,
        poses,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ReorderMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_schemas_are_current() {
        let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
        let read = |f: &str| std::fs::read_to_string(docs.join(f)).unwrap();
        assert_eq!(read("run_config.schema.json"), config_schema::<RunConfig>().unwrap());
        assert_eq!(read("scene_config.schema.json"), config_schema::<SceneConfig>().unwrap());
    }

    #[test]
    fn shipped_toy_configs_parse() {
        let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
        let run = RunConfig::load(&docs.join("toy_run.json")).unwrap();
        assert_eq!((run.attention.embed, run.attention.bin_size, run.train.steps), (32, 64, 500));
        let scene: SceneConfig = parse_config(&std::fs::read_to_string(docs.join("toy_scene.json")).unwrap()).unwrap();
        assert_eq!((scene.person_grid.extent, scene.person_grid.resolution), (1600.0, 16));
    }

    fn small() -> (Scene, RunConfig) {
        let scene = synth_scene(&SceneConfig {
            n_people: 2,
            space_extent: [6000.0, 6000.0, 2000.0],
            person_grid: scene::PersonGrid {
                extent: 2000.0,
                resolution: 8,
            },
            ..Default::default()
        })
        .unwrap();
        let cfg = RunConfig {
            attention: AttentionConfig {
                embed: 8,
                heads: 2,
                bin_size: 32,
                reorder: ReorderMode::Hard,
                ..Default::default()
            },
            ..Default::default()
        };
        (scene, cfg)
    }

    #[test]
    fn random_weights_stay_inside_person_grids() {
        let (scene, cfg) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = VtpWeights::init(15, 512, cfg.conv_channels(), &cfg.attention, &mut rng).unwrap();
        let out = run_inference(&scene, &w, &cfg).unwrap();
        assert_eq!(out.poses.len(), 2);
        for (pose, c) in out.poses.iter().zip(&out.centers) {
            let (lo, hi) = scene.person_grid.at(*c).unwrap().center_bounds();
            for p in &pose.joints {
                assert!((0..3).all(|a| p[a] >= lo[a] - 1e-9 && p[a] <= hi[a] + 1e-9));
            }
        }
        assert!(out.report.mpjpe.is_some());
    }

    #[test]
    fn matches_manual_composition() {
        let (scene, cfg) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = VtpWeights::init(15, 512, cfg.conv_channels(), &cfg.attention, &mut rng).unwrap();
        let out = run_inference(&scene, &w, &cfg).unwrap();
        for (i, c) in scene.centers.iter().enumerate() {
            let grid = scene.person_grid.at(*c).unwrap();
            let vol = aggregate_feature_volume(&scene.cameras, &scene.heatmaps, &grid).unwrap();
            let x_t = crate::attention::encoder_forward(&vol, &w.attention, &cfg.attention).unwrap();
            let x_c = crate::conv3d::residual_forward(&vol, &w.residual).unwrap();
            let p = crate::posehead::fuse_and_head(&x_t, &x_c, &w.head).unwrap();
            let pose = crate::posehead::integral_regression(&p, &grid).unwrap();
            assert_eq!(pose.joints, out.poses[i].joints);
        }
    }

    #[test]
    fn no_centers_gives_empty_report() {
        let (mut scene, mut cfg) = small();
        for h in &mut scene.heatmaps {
            *h = crate::geometry::Heatmap::zeros(h.joints(), h.height(), h.width());
        }
        cfg.center_source = CenterSource::CoarseProposal;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = VtpWeights::init(15, 512, cfg.conv_channels(), &cfg.attention, &mut rng).unwrap();
        let out = run_inference(&scene, &w, &cfg).unwrap();
        assert!(out.poses.is_empty());
        assert_eq!(out.report.mpjpe, None);
        assert!(out.report.ap.iter().all(|e| e.ap == 0.0));
    }

    #[test]
    fn run_config_json() {
        let cfg: RunConfig = serde_json::from_str(r#"{"attention": {"embed": 32, "bin_size": 64}, "center_source": "coarse_proposal"}"#).unwrap();
        assert_eq!(cfg.attention.heads, 2);
        assert_eq!(cfg.conv_channels(), 32);
        assert_eq!(cfg.center_source, CenterSource::CoarseProposal);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        let (scene, mut cfg) = small();
        cfg.attention.bin_size = 7;
        assert!(matches!(cfg.validate_for(&scene), Err(VtpError::Config(_))));
    }
}
