//! PCP3D, MPJPE and AP_K with greedy one-to-one pose matching.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtpError};
use crate::geometry::{norm, sub};
use crate::posehead::Pose3D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub alpha: f64,
    /// Millimetre thresholds, positive and ascending.
    pub ap_thresholds: Vec<f64>,
    /// Ground-truth actor ids left out of PCP.
    pub exclude_actors: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            ap_thresholds: vec![25.0, 50.0, 100.0, 150.0],
            exclude_actors: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(VtpError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.ap_thresholds.iter().any(|&k| !(k > 0.0))
            || self.ap_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(VtpError::Config(format!(
                "AP thresholds must be positive and ascending, got {:?}",
                self.ap_thresholds
            )));
        }
        Ok(())
    }
}

/// Mean per-joint Euclidean distance between two poses.
pub fn pose_mpjpe(a: &Pose3D, b: &Pose3D) -> Result<f64> {
    if a.joints.len() != b.joints.len() || a.joints.is_empty() {
        return Err(VtpError::Shape(format!(
            "poses with {} and {} joints",
            a.joints.len(),
            b.joints.len()
        )));
    }
    let total: f64 = a.joints.iter().zip(&b.joints).map(|(p, q)| norm(sub(*p, *q))).sum();
    Ok(total / a.joints.len() as f64)
}

/// Ground truth → prediction matching for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// For every ground truth, the matched prediction and its MPJPE.
    pub gt_to_pred: Vec<Option<(usize, f64)>>,
    pub predictions: usize,
}

impl Assignment {
    pub fn matched(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.gt_to_pred
            .iter()
            .enumerate()
            .filter_map(|(g, m)| m.map(|(p, c)| (g, p, c)))
    }
}

/// Greedy one-to-one matching by ascending MPJPE; ties go to the lower
/// ground-truth index, then the lower prediction index.
pub fn match_poses(preds: &[Pose3D], gts: &[Pose3D]) -> Result<Assignment> {
    let mut pairs = Vec::with_capacity(preds.len() * gts.len());
    for (g, gt) in gts.iter().enumerate() {
        for (p, pred) in preds.iter().enumerate() {
            pairs.push((pose_mpjpe(pred, gt)?, g, p));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_to_pred = vec![None; gts.len()];
    let mut used = vec![false; preds.len()];
    for (cost, g, p) in pairs {
        if gt_to_pred[g].is_none() && !used[p] {
            gt_to_pred[g] = Some((p, cost));
            used[p] = true;
        }
    }
    Ok(Assignment {
        gt_to_pred,
        predictions: preds.len(),
    })
}

/// Predictions and ground truths of one frame together with their matching.
#[derive(Clone, Debug)]
pub struct FrameEval {
    pub preds: Vec<Pose3D>,
    pub gts: Vec<Pose3D>,
    pub assignment: Assignment,
}

impl FrameEval {
    pub fn new(preds: Vec<Pose3D>, gts: Vec<Pose3D>) -> Result<Self> {
        let assignment = match_poses(&preds, &gts)?;
        Ok(Self {
            preds,
            gts,
            assignment,
        })
    }
}

/// A ground-truth limb of zero length, skipped by PCP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbDefect {
    pub frame: usize,
    pub actor: usize,
    pub limb: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcpResult {
    /// Percentage of correct limbs per actor id.
    pub per_actor: BTreeMap<usize, f64>,
    /// Mean of the per-actor percentages.
    pub average: f64,
    pub defects: Vec<LimbDefect>,
}

pub fn limb_correct(gt: (&[f64; 3], &[f64; 3]), pred: (&[f64; 3], &[f64; 3]), alpha: f64) -> bool {
    let err = (norm(sub(*gt.0, *pred.0)) + norm(sub(*gt.1, *pred.1))) / 2.0;
    err <= alpha * norm(sub(*gt.0, *gt.1))
}

/// Percentage of correctly estimated parts, with the actor id being the
/// ground-truth index within its frame.
pub fn pcp3d(frames: &[FrameEval], alpha: f64, exclude: &[usize]) -> PcpResult {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut defects = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        for (actor, gt) in frame.gts.iter().enumerate() {
            if exclude.contains(&actor) {
                continue;
            }
            let entry = counts.entry(actor).or_default();
            let pred = frame.assignment.gt_to_pred[actor].map(|(p, _)| &frame.preds[p]);
            for &[a, b] in &gt.skeleton {
                if norm(sub(gt.joints[a], gt.joints[b])) == 0.0 {
                    defects.push(LimbDefect {
                        frame: f,
                        actor,
                        limb: [a, b],
                    });
                    continue;
                }
                entry.1 += 1;
                if let Some(pred) = pred {
                    if limb_correct((&gt.joints[a], &gt.joints[b]), (&pred.joints[a], &pred.joints[b]), alpha) {
                        entry.0 += 1;
                    }
                }
            }
        }
    }
    let per_actor: BTreeMap<usize, f64> = counts
        .into_iter()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(a, (ok, total))| (a, 100.0 * ok as f64 / total as f64))
        .collect();
    let average = if per_actor.is_empty() {
        0.0
    } else {
        per_actor.values().sum::<f64>() / per_actor.len() as f64
    };
    PcpResult {
        per_actor,
        average,
        defects,
    }
}

/// Mean over matched poses within each frame, then over frames with at
/// least one match.
pub fn mpjpe(frames: &[FrameEval]) -> Result<f64> {
    let per_frame: Vec<f64> = frames
        .iter()
        .filter_map(|f| {
            let costs: Vec<f64> = f.assignment.matched().map(|(_, _, c)| c).collect();
            (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / costs.len() as f64)
        })
        .collect();
    if per_frame.is_empty() {
        return Err(VtpError::Undefined("MPJPE needs at least one matched pose".into()));
    }
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// Matched predictions with MPJPE below `k`, over all predictions.
pub fn ap_k(frames: &[FrameEval], k: f64) -> f64 {
    let total: usize = frames.iter().map(|f| f.assignment.predictions).sum();
    if total == 0 {
        return 0.0;
    }
    let correct = frames
        .iter()
        .flat_map(|f| f.assignment.matched())
        .filter(|&(_, _, c)| c < k)
        .count();
    correct as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub predictions: usize,
    pub ground_truths: usize,
    pub pcp_per_actor: BTreeMap<usize, f64>,
    pub pcp_average: f64,
    /// `None` when nothing was matched.
    pub mpjpe: Option<f64>,
    pub ap: Vec<ApEntry>,
    pub limb_defects: Vec<LimbDefect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub k: f64,
    pub ap: f64,
}

pub fn evaluate(frames: &[FrameEval], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let pcp = pcp3d(frames, cfg.alpha, &cfg.exclude_actors);
    let mpjpe = match mpjpe(frames) {
        Ok(v) => Some(v),
        Err(VtpError::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        frames: frames.len(),
        predictions: frames.iter().map(|f| f.preds.len()).sum(),
        ground_truths: frames.iter().map(|f| f.gts.len()).sum(),
        pcp_per_actor: pcp.per_actor,
        pcp_average: pcp.average,
        mpjpe,
        ap: cfg
            .ap_thresholds
            .iter()
            .map(|&k| ApEntry { k, ap: ap_k(frames, k) })
            .collect(),
        limb_defects: pcp.defects,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,value` rows; an undefined MPJPE is written as an empty value.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (a, v) in &self.pcp_per_actor {
            let _ = writeln!(s, "pcp_actor_{a},{v}");
        }
        let _ = writeln!(s, "pcp_average,{}", self.pcp_average);
        match self.mpjpe {
            Some(m) => {
                let _ = writeln!(s, "mpjpe,{m}");
            }
            None => s.push_str("mpjpe,\n"),
        }
        for e in &self.ap {
            let _ = writeln!(s, "ap_{},{}", e.k, e.ap);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(joints: Vec<[f64; 3]>) -> Pose3D {
        let n = joints.len();
        Pose3D::new(joints, (1..n).map(|i| [i - 1, i]).collect()).unwrap()
    }

    fn line(offset: [f64; 3]) -> Pose3D {
        pose(vec![offset, [offset[0], offset[1], offset[2] + 1000.0], [offset[0] + 500.0, offset[1], offset[2] + 1000.0]])
    }

    #[test]
    fn single_match() {
        let a = match_poses(&[line([0.0; 3])], &[line([1.0, 0.0, 0.0])]).unwrap();
        assert_eq!(a.gt_to_pred, vec![Some((0, 1.0))]);
    }

    #[test]
    fn crossed_assignment() {
        let gts = [line([0.0; 3]), line([3000.0, 0.0, 0.0])];
        let preds = [line([3010.0, 0.0, 0.0]), line([20.0, 0.0, 0.0])];
        let a = match_poses(&preds, &gts).unwrap();
        assert_eq!(a.gt_to_pred[0].unwrap().0, 1);
        assert_eq!(a.gt_to_pred[1].unwrap().0, 0);
    }

    #[test]
    fn extra_ground_truth_unmatched() {
        let gts = [line([0.0; 3]), line([3000.0, 0.0, 0.0])];
        let a = match_poses(&[line([2990.0, 0.0, 0.0])], &gts).unwrap();
        assert_eq!(a.gt_to_pred[0], None);
        assert_eq!(a.gt_to_pred[1].unwrap().0, 0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let a = match_poses(&[line([10.0, 0.0, 0.0]), line([-10.0, 0.0, 0.0])], &[line([0.0; 3])]).unwrap();
        assert_eq!(a.gt_to_pred[0].unwrap().0, 0);
    }

    #[test]
    fn perfect_prediction() {
        let f = FrameEval::new(vec![line([5.0; 3])], vec![line([5.0; 3])]).unwrap();
        let pcp = pcp3d(&[f.clone()], 0.5, &[]);
        assert_eq!(pcp.average, 100.0);
        assert_eq!(mpjpe(&[f.clone()]).unwrap(), 0.0);
        assert_eq!(ap_k(&[f], 25.0), 1.0);
    }

    #[test]
    fn boundary_displacement_counts_correct() {
        // Limb length 1000, alpha 0.5: a 500 mm shift of both ends is on the boundary.
        let gt = pose(vec![[0.0; 3], [0.0, 0.0, 1000.0]]);
        let pred = gt.translated([300.0, 400.0, 0.0]);
        let f = FrameEval::new(vec![pred], vec![gt]).unwrap();
        assert_eq!(pcp3d(&[f.clone()], 0.5, &[]).average, 100.0);
        assert_eq!(pcp3d(&[f], 0.4999, &[]).average, 0.0);
    }

    #[test]
    fn constant_offset_mpjpe() {
        let gt = line([0.0; 3]);
        let f = FrameEval::new(vec![gt.translated([3.0, 4.0, 0.0])], vec![gt]).unwrap();
        assert_eq!(mpjpe(&[f]).unwrap(), 5.0);
    }

    #[test]
    fn spurious_prediction_halves_ap() {
        let gt = line([0.0; 3]);
        let f = FrameEval::new(vec![gt.clone(), line([5000.0, 0.0, 0.0])], vec![gt]).unwrap();
        assert_eq!(ap_k(&[f], 50.0), 0.5);
    }

    #[test]
    fn no_matches_is_undefined() {
        let f = FrameEval::new(vec![], vec![line([0.0; 3])]).unwrap();
        assert!(matches!(mpjpe(&[f.clone()]), Err(VtpError::Undefined(_))));
        assert_eq!(ap_k(&[f.clone()], 50.0), 0.0);
        let pcp = pcp3d(&[f.clone()], 0.5, &[]);
        assert_eq!(pcp.per_actor[&0], 0.0);
        let report = evaluate(&[f], &EvalConfig::default()).unwrap();
        assert_eq!(report.mpjpe, None);
        assert!(report.to_csv().contains("mpjpe,\n"));
    }

    #[test]
    fn zero_length_limb_is_a_defect() {
        let gt = pose(vec![[0.0; 3], [0.0; 3], [0.0, 0.0, 100.0]]);
        let f = FrameEval::new(vec![gt.clone()], vec![gt]).unwrap();
        let pcp = pcp3d(&[f], 0.5, &[]);
        assert_eq!(pcp.defects.len(), 1);
        assert_eq!(pcp.defects[0].limb, [0, 1]);
        assert_eq!(pcp.average, 100.0);
    }

    #[test]
    fn excluded_actor_is_dropped() {
        let gts = vec![line([0.0; 3]), line([3000.0, 0.0, 0.0])];
        let f = FrameEval::new(vec![gts[0].clone()], gts).unwrap();
        assert_eq!(pcp3d(&[f.clone()], 0.5, &[]).average, 50.0);
        let pcp = pcp3d(&[f], 0.5, &[1]);
        assert_eq!(pcp.average, 100.0);
        assert!(!pcp.per_actor.contains_key(&1));
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        let bad = EvalConfig {
            ap_thresholds: vec![50.0, 25.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_serializes() {
        let gt = line([0.0; 3]);
        let f = FrameEval::new(vec![gt.translated([3.0, 4.0, 0.0])], vec![gt]).unwrap();
        let r = evaluate(&[f], &EvalConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["mpjpe"], 5.0);
        assert_eq!(v["ap"][0]["ap"], 1.0);
        assert!(r.to_csv().contains("ap_25,1\n"));
    }
}
