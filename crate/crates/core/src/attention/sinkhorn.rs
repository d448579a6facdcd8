//! Log-space Sinkhorn normalization of a bin correlation matrix.

use crate::error::{Result, VtpError};
use crate::tensor::Tensor;

/// A raw correlation matrix together with its relaxed doubly-stochastic
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornMatrix {
    pub raw: Tensor,
    pub log_s: Tensor,
    pub s: Tensor,
}

impl SinkhornMatrix {
    pub fn size(&self) -> usize {
        self.s.rows()
    }

    /// Column index of the largest entry in each row, lowest index on ties.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.size())
            .map(|i| {
                let row = self.s.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Largest `|sum − 1|` over all rows and columns of `S`.
    pub fn marginal_deviation(&self) -> f64 {
        marginal_deviation(&self.s)
    }
}

pub fn marginal_deviation(s: &Tensor) -> f64 {
    let n = s.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let row: f64 = s.row(i).iter().sum();
        let col: f64 = (0..n).map(|r| s.at2(r, i)).sum();
        worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
    }
    worst
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Alternating row/column normalization started from `exp(R)`, carried out
/// in log space: each of the `iterations` rounds subtracts the row
/// log-sum-exp and then the column log-sum-exp.
///
/// Any temperature scaling must already be folded into `r`.
pub fn sinkhorn_normalize(r: &Tensor, iterations: usize) -> Result<SinkhornMatrix> {
    if r.shape().len() != 2 || r.rows() != r.cols() {
        return Err(VtpError::Shape(format!(
            "correlation matrix must be square, got {:?}",
            r.shape()
        )));
    }
    if iterations == 0 {
        return Err(VtpError::Config("sinkhorn needs at least one iteration".into()));
    }
    if !r.all_finite() {
        return Err(VtpError::NonFinite("correlation matrix".into()));
    }
    let n = r.rows();
    let mut log_s = r.clone();
    for _ in 0..iterations {
        for i in 0..n {
            let lse = log_sum_exp(log_s.row(i).iter().copied());
            for j in 0..n {
                log_s.set2(i, j, log_s.at2(i, j) - lse);
            }
        }
        for j in 0..n {
            let lse = log_sum_exp((0..n).map(|i| log_s.at2(i, j)));
            for i in 0..n {
                log_s.set2(i, j, log_s.at2(i, j) - lse);
            }
        }
    }
    let s = log_s.map(f64::exp);
    Ok(SinkhornMatrix {
        raw: r.clone(),
        log_s,
        s,
    })
}
