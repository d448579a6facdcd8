//! Same-padded 3D convolution and the residual block built from it.
//!
//! Kernels are cross-correlations with zero padding `(k−1)/2`, so spatial
//! dims never change. The forward pass lowers the input to a column matrix
//! (`c_in·k³ × L`) and runs a single GEMM.

use rand::Rng;

use crate::error::{Result, VtpError};
use crate::tensor::{gemm, Tensor};
use crate::voxelgrid::FeatureVolume;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dLayer {
    c_in: usize,
    c_out: usize,
    kernel: usize,
    /// `c_out × (c_in·k³)`, inner order `[i][a][b][c]` where `a, b, c` are
    /// the x, y, z kernel offsets.
    pub weights: Tensor,
    /// `c_out`.
    pub bias: Tensor,
}

impl Conv3dLayer {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(VtpError::Config(format!(
                "kernel size must be odd and positive, got {kernel}"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(VtpError::Config("conv channel counts must be positive".into()));
        }
        let fan = c_in * kernel.pow(3);
        Ok(Self {
            c_in,
            c_out,
            kernel,
            weights: Tensor::zeros(&[c_out, fan]),
            bias: Tensor::zeros(&[c_out]),
        })
    }

    /// Weights and bias uniform in `±sqrt(1 / (c_in·k³))`.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut layer = Self::zeros(c_in, c_out, kernel)?;
        let bound = (1.0 / layer.fan_in() as f64).sqrt();
        for w in layer.weights.data_mut().iter_mut().chain(layer.bias.data_mut()) {
            *w = rng.random_range(-bound..bound);
        }
        Ok(layer)
    }

    /// 1×1×1 layer copying input channel `i` to output channel `i`.
    pub fn identity(channels: usize) -> Self {
        let mut layer = Self::zeros(channels, channels, 1).expect("valid identity layer");
        for c in 0..channels {
            layer.weights.set2(c, c, 1.0);
        }
        layer
    }

    pub fn from_parts(c_in: usize, kernel: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        let c_out = bias.len();
        let mut layer = Self::zeros(c_in, c_out, kernel)?;
        if weights.shape() != layer.weights.shape() {
            return Err(VtpError::Shape(format!(
                "conv weights {:?}, expected {:?}",
                weights.shape(),
                layer.weights.shape()
            )));
        }
        layer.weights = weights;
        layer.bias = bias.reshape(&[c_out])?;
        Ok(layer)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    pub fn weight(&self, o: usize, i: usize, [a, b, c]: [usize; 3]) -> f64 {
        let k = self.kernel;
        self.weights.at2(o, ((i * k + a) * k + b) * k + c)
    }
}

/// Lowers a `c_in × L` volume to its `c_in·k³ × L` column matrix.
pub(crate) fn im2col(input: &[f64], c_in: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let l = nx * ny * nz;
    let p = ((k - 1) / 2) as isize;
    let mut col = vec![0.0; c_in * k * k * k * l];
    let mut row = 0;
    for i in 0..c_in {
        let src = &input[i * l..(i + 1) * l];
        for a in 0..k as isize {
            for b in 0..k as isize {
                for c in 0..k as isize {
                    let dst = &mut col[row * l..(row + 1) * l];
                    for z in 0..nz as isize {
                        let sz = z + c - p;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny as isize {
                            let sy = y + b - p;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let drow = (z as usize * ny + y as usize) * nx;
                            let srow = (sz as usize * ny + sy as usize) * nx;
                            let x_lo = (p - a).max(0) as usize;
                            let x_hi = (nx as isize + p - a).min(nx as isize).max(0) as usize;
                            if x_lo >= x_hi {
                                continue;
                            }
                            let s0 = (x_lo as isize + a - p) as usize;
                            dst[drow + x_lo..drow + x_hi]
                                .copy_from_slice(&src[srow + s0..srow + s0 + (x_hi - x_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column-matrix gradient back onto the
/// `c_in × L` input.
pub(crate) fn col2im(col: &[f64], c_in: usize, dims: [usize; 3], k: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let l = nx * ny * nz;
    let p = ((k - 1) / 2) as isize;
    let mut out = vec![0.0; c_in * l];
    let mut row = 0;
    for i in 0..c_in {
        let dst = &mut out[i * l..(i + 1) * l];
        for a in 0..k as isize {
            for b in 0..k as isize {
                for c in 0..k as isize {
                    let src = &col[row * l..(row + 1) * l];
                    for z in 0..nz as isize {
                        let sz = z + c - p;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny as isize {
                            let sy = y + b - p;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let crow = (z as usize * ny + y as usize) * nx;
                            let irow = (sz as usize * ny + sy as usize) * nx;
                            let x_lo = (p - a).max(0) as usize;
                            let x_hi = (nx as isize + p - a).min(nx as isize).max(0) as usize;
                            for x in x_lo..x_hi {
                                dst[irow + (x as isize + a - p) as usize] += src[crow + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    out
}

/// Raw convolution on a `c_in × L` buffer. Returns the `c_out × L` output and
/// the column matrix (`None` for 1×1×1 kernels, where it is the input).
pub(crate) fn conv_raw(
    input: &[f64],
    dims: [usize; 3],
    layer: &Conv3dLayer,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let l: usize = dims.iter().product();
    let (c_out, fan) = (layer.c_out, layer.fan_in());
    let mut out = vec![0.0; c_out * l];
    for (o, chunk) in out.chunks_mut(l).enumerate() {
        chunk.fill(layer.bias.data()[o]);
    }
    let col = (layer.kernel > 1).then(|| im2col(input, layer.c_in, dims, layer.kernel));
    let lowered = col.as_deref().unwrap_or(input);
    gemm(c_out, fan, l, layer.weights.data(), false, lowered, false, &mut out, 1.0);
    (out, col)
}

/// Gradients of a convolution given its output gradient.
/// Returns `(d_input, d_weights, d_bias)`.
pub(crate) fn conv_backward(
    input: &[f64],
    col: Option<&[f64]>,
    dims: [usize; 3],
    layer_shape: (usize, usize, usize),
    weights: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c_in, c_out, k) = layer_shape;
    let l: usize = dims.iter().product();
    let fan = c_in * k * k * k;
    let lowered = col.unwrap_or(input);

    let mut d_w = vec![0.0; c_out * fan];
    gemm(c_out, l, fan, grad_out, false, lowered, true, &mut d_w, 0.0);
    let d_b: Vec<f64> = grad_out.chunks(l).map(|r| r.iter().sum()).collect();

    let mut d_col = vec![0.0; fan * l];
    gemm(fan, c_out, l, weights, true, grad_out, false, &mut d_col, 0.0);
    let d_in = if k > 1 {
        col2im(&d_col, c_in, dims, k)
    } else {
        d_col
    };
    (d_in, d_w, d_b)
}

/// Same-padded cross-correlation plus bias.
pub fn conv3d_forward(vol: &FeatureVolume, layer: &Conv3dLayer) -> Result<FeatureVolume> {
    if vol.channels() != layer.c_in {
        return Err(VtpError::Shape(format!(
            "conv expects {} input channels, volume has {}",
            layer.c_in,
            vol.channels()
        )));
    }
    let dims = vol.dims();
    let (out, _) = conv_raw(vol.tensor().data(), dims, layer);
    let l = vol.voxel_count();
    FeatureVolume::from_tensor(Tensor::new(&[layer.c_out, l], out)?, dims)
}

/// Two 3×3×3 convolutions on the main path, one 1×1×1 convolution on the
/// skip path, summed and rectified.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv3dLayer,
    pub conv2: Conv3dLayer,
    pub skip: Conv3dLayer,
}

impl ResidualBlock {
    pub fn new(conv1: Conv3dLayer, conv2: Conv3dLayer, skip: Conv3dLayer) -> Result<Self> {
        let ok = conv1.c_out == conv2.c_in
            && conv2.c_out == skip.c_out
            && conv1.c_in == skip.c_in
            && skip.kernel == 1;
        if !ok {
            return Err(VtpError::Shape(format!(
                "residual paths disagree: main {}→{}→{}, skip {}→{} (k={})",
                conv1.c_in, conv1.c_out, conv2.c_out, skip.c_in, skip.c_out, skip.kernel
            )));
        }
        Ok(Self { conv1, conv2, skip })
    }

    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            Conv3dLayer::init(c_in, c_out, 3, rng)?,
            Conv3dLayer::init(c_out, c_out, 3, rng)?,
            Conv3dLayer::init(c_in, c_out, 1, rng)?,
        )
    }

    pub fn c_in(&self) -> usize {
        self.conv1.c_in
    }

    pub fn c_out(&self) -> usize {
        self.skip.c_out
    }
}

pub fn residual_forward(vol: &FeatureVolume, block: &ResidualBlock) -> Result<FeatureVolume> {
    let main = conv3d_forward(&conv3d_forward(vol, &block.conv1)?, &block.conv2)?;
    let skip = conv3d_forward(vol, &block.skip)?;
    let sum = main
        .tensor()
        .zip_map(skip.tensor(), |a, b| (a + b).max(0.0));
    FeatureVolume::from_tensor(sum, vol.dims())
}
