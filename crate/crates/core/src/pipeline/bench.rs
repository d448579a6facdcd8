//! Sparse versus dense attention: score-matrix sizes and wall time.

use std::fmt::Write as _;
use std::time::Instant;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::window::window_core;
use crate::attention::{dense_attention, dense_score_elements, sparse_score_elements};
use crate::error::{Result, VtpError};
use crate::voxelgrid::check_divisible;

/// Largest sequence for which dense attention is actually run.
pub const DENSE_LIMIT: usize = 8192;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub bins: usize,
    pub sparse_elements: usize,
    pub dense_elements: usize,
    pub sparse_ms: f64,
    /// `None` above [`DENSE_LIMIT`].
    pub dense_ms: Option<f64>,
}

fn log_sum_exp<T: Float>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    m + xs.map(|x| (x - m).exp()).fold(T::zero(), |a, b| a + b).ln()
}

/// Bin means, correlation, Sinkhorn, hard reordering and window attention
/// in precision `T`.
pub fn sparse_attention<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    bin_size: usize,
    embed: usize,
    heads: usize,
    iters: usize,
) -> Vec<T> {
    let (b, e) = (bin_size, embed);
    let n_b = q.len() / e / b;
    let width = b * e;
    let mean = |x: &[T]| -> Vec<T> {
        let mut m = vec![T::zero(); n_b * e];
        let inv = T::one() / T::from(b).unwrap();
        for i in 0..n_b {
            for row in x[i * width..(i + 1) * width].chunks(e) {
                for (d, &s) in m[i * e..(i + 1) * e].iter_mut().zip(row) {
                    *d = *d + s * inv;
                }
            }
        }
        m
    };
    let (qm, km) = (mean(q), mean(k));
    let tau = T::from(e).unwrap().sqrt();
    let mut log_s = vec![T::zero(); n_b * n_b];
    for i in 0..n_b {
        for j in 0..n_b {
            let dot = (0..e).fold(T::zero(), |a, c| a + qm[i * e + c] * km[j * e + c]);
            log_s[i * n_b + j] = dot / tau;
        }
    }
    for _ in 0..iters {
        for i in 0..n_b {
            let lse = log_sum_exp(log_s[i * n_b..(i + 1) * n_b].iter().copied());
            log_s[i * n_b..(i + 1) * n_b].iter_mut().for_each(|x| *x = *x - lse);
        }
        for j in 0..n_b {
            let lse = log_sum_exp((0..n_b).map(|i| log_s[i * n_b + j]));
            (0..n_b).for_each(|i| log_s[i * n_b + j] = log_s[i * n_b + j] - lse);
        }
    }
    let mut ks = vec![T::zero(); q.len()];
    let mut vs = vec![T::zero(); q.len()];
    for i in 0..n_b {
        let row = &log_s[i * n_b..(i + 1) * n_b];
        let best = (0..n_b).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        ks[i * width..(i + 1) * width].copy_from_slice(&k[best * width..(best + 1) * width]);
        vs[i * width..(i + 1) * width].copy_from_slice(&v[best * width..(best + 1) * width]);
    }
    window_core(q, k, v, &ks, &vs, b, e, heads, None)
}

/// One row per sequence length; dense attention runs only up to
/// [`DENSE_LIMIT`].
pub fn bench_attention<T: Float>(
    lengths: &[usize],
    bin_size: usize,
    embed: usize,
    heads: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if heads == 0 || embed % heads != 0 {
        return Err(VtpError::Config(format!("embed {embed} not divisible by {heads} heads")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        check_divisible(len, bin_size)?;
        let mut gen = || -> Vec<T> {
            (0..len * embed)
                .map(|_| T::from(rng.random_range(-1.0..1.0)).unwrap())
                .collect()
        };
        let (q, k, v) = (gen(), gen(), gen());
        let start = Instant::now();
        let out = sparse_attention(&q, &k, &v, bin_size, embed, heads, 8);
        let sparse_ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        let dense_ms = (len <= DENSE_LIMIT).then(|| {
            let start = Instant::now();
            std::hint::black_box(dense_attention(&q, &k, &v, embed, heads));
            start.elapsed().as_secs_f64() * 1e3
        });
        rows.push(BenchRow {
            len,
            bins: len / bin_size,
            sparse_elements: sparse_score_elements(len, bin_size),
            dense_elements: dense_score_elements(len),
            sparse_ms,
            dense_ms,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,N_b,sparse_elements,dense_elements,ratio,sparse_ms,dense_ms\n");
    for r in rows {
        let dense = r.dense_ms.map_or(String::new(), |d| format!("{d:.3}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3},{:.3},{}",
            r.len,
            r.bins,
            r.sparse_elements,
            r.dense_elements,
            r.dense_elements as f64 / r.sparse_elements as f64,
            r.sparse_ms,
            dense
        );
    }
    s
}
