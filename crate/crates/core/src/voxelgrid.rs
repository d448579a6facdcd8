//! Voxel grid bookkeeping: world/index mapping, the volume ↔ sequence
//! flattening and the partition of a sequence into fixed-size bins.
//!
//! A volume with dims `(X, Y, Z)` is stored channel-major with `x` varying
//! fastest, so the flat offset of voxel `(x, y, z)` inside one channel is
//! `x + X·y + X·Y·z`. That is exactly the sequence position used by
//! [`flatten`], which makes flattening a plain channel/position transpose.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtpError};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

/// An axis-aligned uniform voxel grid in world millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: Vec3,
    /// Full side lengths.
    pub extent: Vec3,
    pub resolution: [usize; 3],
}

impl GridSpec {
    pub fn new(center: Vec3, extent: Vec3, resolution: [usize; 3]) -> Result<Self> {
        let grid = Self {
            center,
            extent,
            resolution,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Cube of side `extent` with `res` voxels per axis.
    pub fn cube(center: Vec3, extent: f64, res: usize) -> Result<Self> {
        Self::new(center, [extent; 3], [res; 3])
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.extent[a] > 0.0 && self.extent[a].is_finite()) {
                return Err(VtpError::Config(format!(
                    "grid extent must be positive and finite, got {:?}",
                    self.extent
                )));
            }
            if self.resolution[a] == 0 {
                return Err(VtpError::Config(format!(
                    "grid resolution must be ≥ 1 per axis, got {:?}",
                    self.resolution
                )));
            }
            if !self.center[a].is_finite() {
                return Err(VtpError::Config("grid center must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn edge(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.extent[a] / self.resolution[a] as f64)
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Same grid moved so that its center is `center`.
    pub fn recentered(&self, center: Vec3) -> GridSpec {
        GridSpec {
            center,
            ..self.clone()
        }
    }

    /// World position of the center of voxel `index`.
    pub fn voxel_center(&self, index: [usize; 3]) -> Result<Vec3> {
        if (0..3).any(|a| index[a] >= self.resolution[a]) {
            return Err(VtpError::IndexOutOfRange {
                index,
                resolution: self.resolution,
            });
        }
        Ok(self.center_unchecked(index))
    }

    pub(crate) fn center_unchecked(&self, index: [usize; 3]) -> Vec3 {
        let edge = self.edge();
        [0, 1, 2].map(|a| {
            self.center[a] - self.extent[a] / 2.0 + (index[a] as f64 + 0.5) * edge[a]
        })
    }

    /// Sequence position of voxel `(x, y, z)`.
    pub fn linear_index(&self, index: [usize; 3]) -> usize {
        flat_index(self.resolution, index)
    }

    /// All voxel centers in sequence order, as an `L × 3` tensor.
    pub fn centers(&self) -> Tensor {
        let n = self.voxel_count();
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            data.extend_from_slice(&self.center_unchecked(unflat_index(self.resolution, i)));
        }
        Tensor::new(&[n, 3], data).expect("centers shape")
    }

    /// Smallest box containing every voxel center, as `(min, max)` corners.
    pub fn center_bounds(&self) -> (Vec3, Vec3) {
        let lo = self.center_unchecked([0, 0, 0]);
        let hi = self.center_unchecked(self.resolution.map(|r| r - 1));
        (lo, hi)
    }
}

/// `x + X·y + X·Y·z`.
pub fn flat_index(dims: [usize; 3], [x, y, z]: [usize; 3]) -> usize {
    x + dims[0] * y + dims[0] * dims[1] * z
}

pub fn unflat_index(dims: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

/// `C` channels over an `X × Y × Z` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    dims: [usize; 3],
    /// `C × L`, sequence-ordered within each channel.
    values: Tensor,
}

impl FeatureVolume {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        let l = dims.iter().product();
        Self {
            dims,
            values: Tensor::zeros(&[channels, l]),
        }
    }

    /// Wraps a `C × L` tensor.
    pub fn from_tensor(values: Tensor, dims: [usize; 3]) -> Result<Self> {
        let l: usize = dims.iter().product();
        if values.shape().len() != 2 || values.shape()[1] != l {
            return Err(VtpError::Shape(format!(
                "volume tensor {:?} does not match dims {dims:?}",
                values.shape()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, c: usize, index: [usize; 3]) -> f64 {
        self.values.at2(c, flat_index(self.dims, index))
    }

    pub fn set(&mut self, c: usize, index: [usize; 3], v: f64) {
        let i = flat_index(self.dims, index);
        self.values.set2(c, i, v);
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.values.row(c)
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let l = self.voxel_count();
        &mut self.values.data_mut()[c * l..(c + 1) * l]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn matches(&self, grid: &GridSpec) -> bool {
        self.dims == grid.resolution
    }
}

/// Flattens a volume into its `L × C` sequence, element `x + X·y + X·Y·z`
/// holding the channel vector of voxel `(x, y, z)`.
pub fn flatten(vol: &FeatureVolume) -> Tensor {
    vol.values.transpose()
}

/// Inverse of [`flatten`].
pub fn unflatten(seq: &Tensor, dims: [usize; 3]) -> Result<FeatureVolume> {
    let l: usize = dims.iter().product();
    if seq.shape().len() != 2 || seq.shape()[0] != l {
        return Err(VtpError::Shape(format!(
            "sequence {:?} cannot be unflattened into {dims:?} ({l} voxels)",
            seq.shape()
        )));
    }
    FeatureVolume::from_tensor(seq.transpose(), dims)
}

/// A sequence split into `N_b` consecutive bins of `B` embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BinSequence {
    bin_size: usize,
    /// `N_b × B × e`.
    data: Tensor,
}

impl BinSequence {
    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn bin_size(&self) -> usize {
        self.bin_size
    }

    pub fn embed(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.bins() * self.bin_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `B × e` block of bin `i`.
    pub fn bin(&self, i: usize) -> &[f64] {
        let w = self.bin_size * self.embed();
        &self.data.data()[i * w..(i + 1) * w]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Concatenates the bins back into the `L × e` sequence.
    pub fn to_sequence(&self) -> Tensor {
        Tensor::new(&[self.len(), self.embed()], self.data.data().to_vec()).expect("sequence shape")
    }

    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(VtpError::Shape(format!(
                "bin tensor must be N_b × B × e, got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            bin_size: data.shape()[1],
            data,
        })
    }
}

/// Splits an `L × e` sequence into bins of `bin_size` consecutive elements.
pub fn partition_bins(seq: &Tensor, bin_size: usize) -> Result<BinSequence> {
    if seq.shape().len() != 2 {
        return Err(VtpError::Shape(format!(
            "sequence must be L × e, got {:?}",
            seq.shape()
        )));
    }
    let (l, e) = (seq.shape()[0], seq.shape()[1]);
    check_divisible(l, bin_size)?;
    let data = Tensor::new(&[l / bin_size, bin_size, e], seq.data().to_vec())?;
    Ok(BinSequence { bin_size, data })
}

pub(crate) fn check_divisible(l: usize, bin_size: usize) -> Result<()> {
    if bin_size == 0 || l % bin_size != 0 {
        return Err(VtpError::Config(format!(
            "sequence length {l} is not divisible by bin size {bin_size}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_centers_of_default_person_grid() {
        let g = GridSpec::cube([0.0; 3], 2000.0, 32).unwrap();
        assert_eq!(g.edge(), [62.5; 3]);
        assert_eq!(g.voxel_center([0, 0, 0]).unwrap(), [-968.75; 3]);
        assert_eq!(g.voxel_center([31, 31, 31]).unwrap(), [968.75; 3]);
        assert!(matches!(
            g.voxel_center([32, 0, 0]),
            Err(VtpError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn single_voxel_is_grid_center() {
        let g = GridSpec::new([12.0, -3.0, 700.0], [5.0, 80.0, 1.0], [1, 1, 1]).unwrap();
        assert_eq!(g.voxel_center([0, 0, 0]).unwrap(), [12.0, -3.0, 700.0]);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(GridSpec::new([0.0; 3], [0.0, 1.0, 1.0], [1, 1, 1]).is_err());
        assert!(GridSpec::new([0.0; 3], [1.0; 3], [1, 0, 1]).is_err());
        assert!(GridSpec::new([f64::NAN, 0.0, 0.0], [1.0; 3], [1, 1, 1]).is_err());
    }

    #[test]
    fn flatten_index_formula() {
        assert_eq!(flat_index([4, 5, 6], [0, 0, 0]), 0);
        assert_eq!(flat_index([4, 5, 6], [1, 2, 3]), 69);
        assert_eq!(unflat_index([4, 5, 6], 69), [1, 2, 3]);
    }

    #[test]
    fn flatten_puts_channel_vectors_at_sequence_positions() {
        let dims = [4, 5, 3];
        let mut vol = FeatureVolume::zeros(2, dims);
        vol.set(0, [1, 2, 1], 7.0);
        vol.set(1, [1, 2, 1], -2.0);
        let seq = flatten(&vol);
        let i = 1 + 4 * 2 + 20;
        assert_eq!(seq.row(i), &[7.0, -2.0]);
        assert_eq!(unflatten(&seq, dims).unwrap(), vol);
    }

    #[test]
    fn flatten_map_is_a_bijection() {
        for dx in 1..=6 {
            for dy in 1..=6 {
                for dz in 1..=6 {
                    let dims = [dx, dy, dz];
                    let l = dx * dy * dz;
                    let mut hit = vec![false; l];
                    for z in 0..dz {
                        for y in 0..dy {
                            for x in 0..dx {
                                let i = flat_index(dims, [x, y, z]);
                                assert!(!hit[i]);
                                hit[i] = true;
                                assert_eq!(unflat_index(dims, i), [x, y, z]);
                            }
                        }
                    }
                    assert!(hit.into_iter().all(|h| h));
                }
            }
        }
    }

    #[test]
    fn unflatten_checks_length() {
        let seq = Tensor::zeros(&[8, 3]);
        assert_eq!(unflatten(&seq, [2, 2, 2]).unwrap().channels(), 3);
        let short = Tensor::zeros(&[7, 3]);
        assert!(matches!(unflatten(&short, [2, 2, 2]), Err(VtpError::Shape(_))));
    }

    #[test]
    fn partition_counts() {
        let seq = Tensor::zeros(&[32 * 32 * 32, 1]);
        assert_eq!(partition_bins(&seq, 128).unwrap().bins(), 256);

        let seq = Tensor::from_fn(&[8, 2], |i| i as f64);
        let bins = partition_bins(&seq, 8).unwrap();
        assert_eq!(bins.bins(), 1);
        assert_eq!(bins.bin(0), seq.data());

        assert!(matches!(
            partition_bins(&Tensor::zeros(&[10, 1]), 4),
            Err(VtpError::Config(_))
        ));
    }

    #[test]
    fn bins_hold_consecutive_elements() {
        let seq = Tensor::from_fn(&[12, 2], |i| i as f64);
        let bins = partition_bins(&seq, 3).unwrap();
        assert_eq!(bins.bins(), 4);
        assert_eq!(bins.bin(2), &seq.data()[12..18]);
        assert_eq!(bins.to_sequence(), seq);
    }

    #[test]
    fn centers_follow_sequence_order() {
        let g = GridSpec::new([10.0, 20.0, 30.0], [4.0, 6.0, 8.0], [2, 3, 4]).unwrap();
        let c = g.centers();
        for i in 0..g.voxel_count() {
            let idx = unflat_index(g.resolution, i);
            assert_eq!(c.row(i), &g.voxel_center(idx).unwrap());
        }
    }
}
