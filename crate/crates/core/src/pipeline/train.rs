//! Toy overfitting on a fixed scene with ground-truth centers.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::model::{forward_pose, model_graph, VtpWeights};
use super::{RunConfig, Scene};
use crate::attention::ReorderMode;
use crate::autodiff::{sgd_step, Adam, Graph, NodeId};
use crate::error::{Result, VtpError};
use crate::geometry::aggregate_feature_volume;
use crate::metrics::pose_mpjpe;
use crate::posehead::{integral_regression_graph, l1_loss_graph};
use crate::tensor::Tensor;
use crate::voxelgrid::{FeatureVolume, GridSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(VtpError::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: VtpWeights,
    /// Loss before every update plus the loss after the last one.
    pub losses: Vec<f64>,
    /// Mean per-person MPJPE of the trained weights, in mm.
    pub final_mpjpe: f64,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }
}

struct Sample {
    grid: GridSpec,
    volume: FeatureVolume,
    target: Vec<[f64; 3]>,
}

fn loss_graph(
    g: &mut Graph,
    params: &[NodeId],
    samples: &[Sample],
    cfg: &RunConfig,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for s in samples {
        let x = g.constant(s.volume.tensor().clone());
        let p = model_graph(g, x, s.grid.resolution, params, &cfg.attention)?;
        let j = integral_regression_graph(g, p, &s.grid)?;
        let l = l1_loss_graph(g, j, &s.target, s.grid.extent[0])?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| VtpError::Config("scene has no people to train on".into()))?;
    Ok(g.scale(total, 1.0 / samples.len() as f64))
}

fn evaluate_loss(weights: &VtpWeights, samples: &[Sample], cfg: &RunConfig) -> Result<(f64, Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let params: Vec<NodeId> = weights.params().into_iter().map(|t| g.leaf(t.clone())).collect();
    let loss = loss_graph(&mut g, &params, samples, cfg)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(VtpError::NonFinite(format!("training loss is {v}")));
    }
    Ok((v, g, params, loss))
}

/// Minimizes the per-joint L1 loss on `scene` with ground-truth centers and
/// soft reordering. Deterministic given `cfg.train.seed`.
pub fn train_toy(scene: &Scene, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate_for(scene)?;
    if cfg.attention.reorder != ReorderMode::Soft {
        return Err(VtpError::Config("training needs soft reordering".into()));
    }
    let samples: Vec<Sample> = scene
        .centers
        .iter()
        .zip(&scene.poses)
        .map(|(c, pose)| {
            let grid = scene.person_grid.at(*c)?;
            let volume = aggregate_feature_volume(&scene.cameras, &scene.heatmaps, &grid)?;
            Ok(Sample {
                grid,
                volume,
                target: pose.joints.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let seq_len = scene.person_grid.resolution.pow(3);
    let mut weights = VtpWeights::init(scene.joints(), seq_len, cfg.conv_channels(), &cfg.attention, &mut rng)?;
    let mut adam = Adam::new(cfg.train.lr);
    let mut losses = Vec::with_capacity(cfg.train.steps + 1);

    for _ in 0..cfg.train.steps {
        let (v, g, _, loss) = evaluate_loss(&weights, &samples, cfg)?;
        losses.push(v);
        let grads: Vec<Tensor> = g.backward(loss)?.into_vec();
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(VtpError::NonFinite("gradient".into()));
        }
        let mut params = weights.params_mut();
        match cfg.train.optimizer {
            Optimizer::Adam => adam.step(&mut params, &grads)?,
            Optimizer::Sgd => sgd_step(&mut params, &grads, cfg.train.lr)?,
        }
    }
    losses.push(evaluate_loss(&weights, &samples, cfg)?.0);

    let mut mpjpe = 0.0;
    for s in &samples {
        let pose = forward_pose(&s.volume, &s.grid, &weights, &cfg.attention)?;
        let gt = crate::posehead::Pose3D {
            joints: s.target.clone(),
            skeleton: Vec::new(),
            confidence: None,
        };
        mpjpe += pose_mpjpe(&pose, &gt)?;
    }
    Ok(TrainOutcome {
        weights,
        losses,
        final_mpjpe: mpjpe / samples.len() as f64,
    })
}
