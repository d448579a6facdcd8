//! Fast self-test suite behind the `check` subcommand.
//!
//! Every check is seeded, single-threaded and free of timings, so the report
//! text is identical across runs on the same build.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_attention, encoder_forward_counted, sinkhorn_normalize, sparse_score_elements, AttentionConfig,
    ReorderMode, ScoreCounter,
};
use crate::autodiff::{finite_diff_check, ProbeMode};
use crate::error::Result;
use crate::geometry::{aggregate_feature_volume, CameraCalib, Heatmap};
use crate::metrics::{evaluate, EvalConfig, FrameEval};
use crate::pipeline::bench::sparse_attention;
use crate::pipeline::model::{model_graph, VtpWeights};
use crate::posehead::{integral_regression, integral_regression_graph, l1_loss_graph, JointProbabilityVolume, Pose3D};
use crate::tensor::Tensor;
use crate::voxelgrid::{FeatureVolume, GridSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            let _ = writeln!(s, "{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        }
        let n = self.outcomes.iter().filter(|o| o.passed).count();
        let _ = writeln!(s, "{n}/{} checks passed", self.outcomes.len());
        s
    }
}

fn outcome(name: &'static str, value: f64, bound: f64) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: value <= bound,
        detail: format!("{value:.3e} <= {bound:.0e}"),
    }
}

fn sinkhorn_marginals() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let r = Tensor::from_fn(&[8, 8], |_| rng.random_range(-2.0..2.0));
        worst = worst.max(sinkhorn_normalize(&r, 20)?.marginal_deviation());
    }
    Ok(outcome("sinkhorn_marginals", worst, 1e-6))
}

fn sinkhorn_permutation() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut wrong = 0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..4).collect();
        for i in (1..4).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let r = Tensor::from_fn(&[4, 4], |k| {
            let hit = perm[k / 4] == k % 4;
            50.0 * hit as u8 as f64 + rng.random_range(-0.1..0.1)
        });
        if sinkhorn_normalize(&r, 8)?.row_argmax() != perm {
            wrong += 1;
        }
    }
    Ok(outcome("sinkhorn_permutation", wrong as f64, 0.0))
}

fn single_bin_dense() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for (len, e, heads) in [(4, 4, 1), (16, 8, 2), (64, 8, 2)] {
        let mut gen = || (0..len * e).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (q, k, v) = (gen(), gen(), gen());
        let s = sparse_attention(&q, &k, &v, len, e, heads, 4);
        let d = dense_attention(&q, &k, &v, e, heads);
        worst = s.iter().zip(&d).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(outcome("single_bin_equals_dense", worst, 1e-10))
}

fn score_counter() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = AttentionConfig {
        embed: 4,
        heads: 2,
        bin_size: 8,
        layers: 2,
        ..Default::default()
    };
    let dims = [4, 4, 4];
    let w = crate::attention::AttentionWeights::init(3, 64, &cfg, &mut rng)?;
    let vol = FeatureVolume::from_tensor(Tensor::from_fn(&[3, 64], |_| rng.random::<f64>()), dims)?;
    let mut counter = ScoreCounter::default();
    encoder_forward_counted(&vol, &w, &cfg, Some(&mut counter))?;
    let expected = sparse_score_elements(64, 8);
    let off = counter
        .layers
        .iter()
        .filter(|c| c.per_head_total() != expected)
        .count()
        + counter.layers.len().abs_diff(cfg.layers);
    Ok(CheckOutcome {
        name: "score_counter",
        passed: off == 0,
        detail: format!("{} layers, {} scores per layer and head, expected {expected}", counter.layers.len(),
            counter.layers.first().map_or(0, |c| c.per_head_total())),
    })
}

fn delta_regression() -> Result<CheckOutcome> {
    let grid = GridSpec::cube([100.0, -50.0, 900.0], 2000.0, 8)?;
    let mut worst: f64 = 0.0;
    for v in [0, 77, 511] {
        let p = JointProbabilityVolume::new(Tensor::from_fn(&[1, 512], |i| (i == v) as u8 as f64), grid.resolution)?;
        let pose = integral_regression(&p, &grid)?;
        let c = grid.centers();
        for a in 0..3 {
            worst = worst.max((pose.joints[0][a] - c.at2(v, a)).abs());
        }
    }
    Ok(outcome("delta_regression", worst, 1e-9))
}

fn aggregation_constant() -> Result<CheckOutcome> {
    // Constant heatmaps must aggregate to that constant wherever a camera
    // sees the voxel.
    let cam = CameraCalib::look_at([0.0, -3000.0, 1000.0], [0.0, 0.0, 1000.0], 200.0, 200.0, 31.5, 23.5, 64, 48)?;
    let hm = Heatmap::new(2, 48, 64, vec![0.25; 2 * 48 * 64])?;
    let grid = GridSpec::cube([0.0, 0.0, 1000.0], 800.0, 4)?;
    let vol = aggregate_feature_volume(&[cam.clone(), cam], &[hm.clone(), hm], &grid)?;
    let worst = vol.tensor().data().iter().fold(0.0f64, |m, v| m.max((v - 0.25).abs()));
    Ok(outcome("aggregation_constant", worst, 1e-12))
}

fn metrics_identity() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let skeleton = vec![[0, 1], [1, 2], [2, 3]];
    let poses: Vec<Pose3D> = (0..2)
        .map(|_| {
            let joints = (0..4).map(|_| [0, 1, 2].map(|_| rng.random_range(-1000.0..1000.0))).collect();
            Pose3D::new(joints, skeleton.clone())
        })
        .collect::<Result<_>>()?;
    let report = evaluate(&[FrameEval::new(poses.clone(), poses)?], &EvalConfig::default())?;
    let ok = report.mpjpe == Some(0.0) && report.pcp_average == 100.0 && report.ap.iter().all(|a| a.ap == 1.0);
    Ok(CheckOutcome {
        name: "metrics_identity",
        passed: ok,
        detail: format!("mpjpe {:?}, pcp {}", report.mpjpe, report.pcp_average),
    })
}

fn model_gradient() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = AttentionConfig {
        embed: 4,
        heads: 2,
        bin_size: 16,
        sinkhorn_iters: 4,
        layers: 1,
        reorder: ReorderMode::Soft,
        ..Default::default()
    };
    let grid = GridSpec::cube([0.0; 3], 400.0, 4)?;
    let w = VtpWeights::init(2, 64, 2, &cfg, &mut rng)?;
    let vol = Tensor::from_fn(&[2, 64], |_| rng.random::<f64>());
    let target = vec![[30.0, -20.0, 10.0], [-40.0, 50.0, 0.0]];
    let leaves: Vec<Tensor> = w.params().into_iter().cloned().collect();
    let check = finite_diff_check(
        |g, ids| {
            let x = g.constant(vol.clone());
            let p = model_graph(g, x, grid.resolution, ids, &cfg)?;
            let j = integral_regression_graph(g, p, &grid)?;
            l1_loss_graph(g, j, &target, grid.extent[0])
        },
        &leaves,
        1e-5,
        ProbeMode::Random { per_leaf: 2, seed: 17 },
    )?;
    Ok(outcome("model_gradient", check.max_rel_error, 1e-4))
}

/// Runs every check; a failing check is reported, not returned as an error.
pub fn run_checks() -> Result<CheckReport> {
    let checks: [fn() -> Result<CheckOutcome>; 8] = [
        sinkhorn_marginals,
        sinkhorn_permutation,
        single_bin_dense,
        score_counter,
        delta_regression,
        aggregation_constant,
        metrics_identity,
        model_gradient,
    ];
    let outcomes = checks.iter().map(|c| c()).collect::<Result<_>>()?;
    Ok(CheckReport { outcomes })
}
