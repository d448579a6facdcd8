//! Coarse person-center proposals from a whole-space feature volume.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{aggregate_feature_volume, norm, project_point, sub, CameraCalib, Heatmap};
use crate::voxelgrid::{flat_index, unflat_index, FeatureVolume, GridSpec, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Coarse voxel edge in mm.
    pub voxel_size: f64,
    /// Side of the smoothing box in mm (rounded to an odd voxel count).
    pub smoothing: f64,
    /// Joint responses below this value are left out of the summed score,
    /// which drops voxels backed by a minority of views.
    pub floor: f64,
    /// Candidates must reach this fraction of the strongest smoothed score.
    pub rel_threshold: f64,
    /// Minimum horizontal distance between accepted candidates in mm.
    pub min_separation: f64,
    /// Horizontal radius around a candidate searched when refining it.
    pub refine_radius: f64,
    /// Fraction of a joint's local peak a voxel needs to join its centroid.
    pub confident: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            voxel_size: 80.0,
            smoothing: 400.0,
            floor: 0.5,
            rel_threshold: 0.3,
            min_separation: 800.0,
            refine_radius: 900.0,
            confident: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterCandidate {
    pub center: Vec3,
    pub score: f64,
}

/// A grid of `voxel_size` cells covering the space (rounded up per axis).
pub fn coarse_grid(space_center: Vec3, space_extent: Vec3, voxel_size: f64) -> Result<GridSpec> {
    let res = space_extent.map(|e| ((e / voxel_size).ceil() as usize).max(1));
    let extent = [0, 1, 2].map(|a| res[a] as f64 * voxel_size);
    GridSpec::new(space_center, extent, res)
}

/// Mean over an axis-aligned `w × w × w` box with zero padding.
fn box_filter(values: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let r = (w / 2) as isize;
    let mut cur = values.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let idx = unflat_index(dims, i);
            let mut s = 0.0;
            for d in -r..=r {
                let p = idx[axis] as isize + d;
                if p < 0 || p >= dims[axis] as isize {
                    continue;
                }
                let mut n = idx;
                n[axis] = p as usize;
                s += cur[flat_index(dims, n)];
            }
            *out = s / w as f64;
        }
        cur = next;
    }
    cur
}

fn is_local_max(values: &[f64], dims: [usize; 3], i: usize) -> bool {
    let idx = unflat_index(dims, i);
    let v = values[i];
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let n = [idx[0] as isize + dx, idx[1] as isize + dy, idx[2] as isize + dz];
                if (0..3).any(|a| n[a] < 0 || n[a] >= dims[a] as isize) {
                    continue;
                }
                let j = flat_index(dims, n.map(|c| c as usize));
                // Plateaus keep only their first voxel in sequence order.
                if values[j] > v || (values[j] == v && j < i) {
                    return false;
                }
            }
        }
    }
    true
}

/// Moves a candidate to the bounding-box center of per-joint estimates.
/// Each joint estimate is the weighted centroid of the voxels near that
/// joint's strongest response in the vertical cylinder of `refine_radius`.
fn refine(vol: &FeatureVolume, grid: &GridSpec, seed: Vec3, cfg: &ProposalConfig) -> Option<Vec3> {
    let l = vol.voxel_count();
    let centers: Vec<Vec3> = (0..l).map(|i| grid.center_unchecked(unflat_index(grid.resolution, i))).collect();
    let horiz = |a: Vec3, b: Vec3| (a[0] - b[0]).hypot(a[1] - b[1]);
    let near: Vec<usize> = (0..l).filter(|&i| horiz(centers[i], seed) <= cfg.refine_radius).collect();
    let mut estimates = Vec::new();
    for j in 0..vol.channels() {
        let ch = vol.channel(j);
        // Mild preference for responses closer to the seed.
        let score = |i: usize| ch[i] * (1.0 - 0.5 * horiz(centers[i], seed) / cfg.refine_radius);
        let Some(&peak) = near.iter().max_by(|&&a, &&b| score(a).total_cmp(&score(b)).then(b.cmp(&a))) else {
            continue;
        };
        if ch[peak] <= 0.0 {
            continue;
        }
        let cut = cfg.confident * ch[peak];
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for &i in &near {
            if ch[i] >= cut && norm(sub(centers[i], centers[peak])) <= 2.5 * cfg.voxel_size {
                for a in 0..3 {
                    acc[a] += ch[i] * centers[i][a];
                }
                total += ch[i];
            }
        }
        estimates.push(acc.map(|v| v / total));
    }
    (!estimates.is_empty()).then(|| super::scene::bbox_center(&estimates))
}

/// Local maxima of the smoothed summed volume, thresholded, suppressed and
/// refined, strongest first.
pub fn coarse_center_proposal(vol: &FeatureVolume, grid: &GridSpec, cfg: &ProposalConfig) -> Vec<CenterCandidate> {
    let dims = grid.resolution;
    let l = vol.voxel_count();
    let mut summed = vec![0.0; l];
    for j in 0..vol.channels() {
        for (s, &v) in summed.iter_mut().zip(vol.channel(j)) {
            if v >= cfg.floor {
                *s += v;
            }
        }
    }
    let w = ((cfg.smoothing / cfg.voxel_size).round() as usize).max(1) | 1;
    let smooth = box_filter(&summed, dims, w);
    let max = smooth.iter().copied().fold(0.0, f64::max);
    if !(max > 1e-12) {
        return Vec::new();
    }
    let mut peaks: Vec<usize> = (0..l)
        .filter(|&i| smooth[i] >= cfg.rel_threshold * max && is_local_max(&smooth, dims, i))
        .collect();
    peaks.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));

    // People stand on the floor, so suppression uses horizontal distance
    // and happens after refinement, when a head peak and a foot peak of one
    // person have been pulled to the same center.
    let apart = |a: Vec3, b: Vec3| (a[0] - b[0]).hypot(a[1] - b[1]) >= cfg.min_separation;
    let mut out: Vec<CenterCandidate> = Vec::new();
    for i in peaks {
        let raw = grid.center_unchecked(unflat_index(dims, i));
        if !out.iter().all(|o| apart(o.center, raw)) {
            continue;
        }
        let center = refine(vol, grid, raw, cfg).unwrap_or(raw);
        if out.iter().all(|o| apart(o.center, center)) {
            out.push(CenterCandidate {
                center,
                score: smooth[i],
            });
        }
    }
    out
}

/// Number of cameras observing each voxel center.
fn coverage(cams: &[CameraCalib], grid: &GridSpec) -> Vec<usize> {
    (0..grid.voxel_count())
        .map(|i| {
            let c = grid.center_unchecked(unflat_index(grid.resolution, i));
            cams.iter()
                .filter(|cam| project_point(cam, c).is_some_and(|px| cam.in_image(px)))
                .count()
        })
        .collect()
}

/// Aggregates the whole space at coarse resolution and proposes centers.
///
/// The per-voxel view average is rescaled by the fraction of cameras that
/// observe the voxel, so regions seen by a single camera cannot look like a
/// multi-view agreement.
pub fn propose_centers(
    cams: &[CameraCalib],
    heatmaps: &[Heatmap],
    space_center: Vec3,
    space_extent: Vec3,
    cfg: &ProposalConfig,
) -> Result<Vec<CenterCandidate>> {
    let grid = coarse_grid(space_center, space_extent, cfg.voxel_size)?;
    let mut vol = aggregate_feature_volume(cams, heatmaps, &grid)?;
    let seen = coverage(cams, &grid);
    let n = cams.len() as f64;
    for j in 0..vol.channels() {
        for (v, &k) in vol.channel_mut(j).iter_mut().zip(&seen) {
            *v *= k as f64 / n;
        }
    }
    Ok(coarse_center_proposal(&vol, &grid, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::scene::{synth_scene, SceneConfig};

    fn propose(scene: &crate::pipeline::scene::Scene) -> Vec<CenterCandidate> {
        propose_centers(
            &scene.cameras,
            &scene.heatmaps,
            scene.space_center,
            scene.space_extent,
            &ProposalConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn single_person_center_within_a_coarse_voxel() {
        for seed in 0..4 {
            let scene = synth_scene(&SceneConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let c = propose(&scene);
            assert_eq!(c.len(), 1, "seed {seed}: {c:?}");
            let err = norm(sub(c[0].center, scene.centers[0]));
            assert!(err <= 80.0, "seed {seed}: off by {err} mm {:?} vs {:?}", c[0].center, scene.centers[0]);
        }
    }

    #[test]
    fn two_people_give_two_candidates() {
        for seed in 0..4 {
            let scene = synth_scene(&SceneConfig {
                seed,
                n_people: 2,
                space_extent: [6000.0, 6000.0, 2000.0],
                ..Default::default()
            })
            .unwrap();
            let c = propose(&scene);
            assert_eq!(c.len(), 2, "seed {seed}: {c:?} vs {:?}", scene.centers);
        }
    }

    #[test]
    fn empty_heatmaps_give_nothing() {
        let mut scene = synth_scene(&SceneConfig::default()).unwrap();
        for h in &mut scene.heatmaps {
            *h = Heatmap::zeros(h.joints(), h.height(), h.width());
        }
        assert!(propose(&scene).is_empty());
    }

    #[test]
    fn box_filter_preserves_constant_interior() {
        let dims = [5, 5, 5];
        let out = box_filter(&vec![2.0; 125], dims, 3);
        assert!((out[flat_index(dims, [2, 2, 2])] - 2.0).abs() < 1e-12);
        assert!((out[0] - 2.0 * 8.0 / 27.0).abs() < 1e-12);
    }
}
