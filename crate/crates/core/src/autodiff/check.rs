//! Central finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, NodeId};
use crate::error::{Result, VtpError};
use crate::tensor::Tensor;

/// How perturbation directions are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// One central difference per scalar component of every leaf.
    Exhaustive,
    /// `per_leaf` random Gaussian directions per leaf, compared against the
    /// directional derivative `⟨∇f, d⟩`.
    Random { per_leaf: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Leaf position and component (or probe number) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

/// `|a − b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(VtpError::Shape("checked function must return a scalar".into()));
    }
    Ok(v.data()[0])
}

/// Compares the gradient from [`Graph::backward`] for the scalar function
/// built by `f` against central differences with step `eps`.
pub fn finite_diff_check<F>(f: F, leaves: &[Tensor], eps: f64, mode: ProbeMode) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(VtpError::Config("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let analytic = g.backward(out)?.into_vec();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
    };
    let record = |report: &mut GradCheck, err: f64, at: (usize, usize)| {
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some(at);
        }
    };

    let mut work = leaves.to_vec();
    match mode {
        ProbeMode::Exhaustive => {
            for li in 0..leaves.len() {
                for c in 0..leaves[li].len() {
                    let base = leaves[li].data()[c];
                    work[li].data_mut()[c] = base + eps;
                    let plus = evaluate(&f, &work)?;
                    work[li].data_mut()[c] = base - eps;
                    let minus = evaluate(&f, &work)?;
                    work[li].data_mut()[c] = base;
                    let numeric = (plus - minus) / (2.0 * eps);
                    record(&mut report, relative_error(analytic[li].data()[c], numeric), (li, c));
                }
            }
        }
        ProbeMode::Random { per_leaf, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for li in 0..leaves.len() {
                for p in 0..per_leaf {
                    let dir: Vec<f64> = (0..leaves[li].len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let along: f64 = dir.iter().zip(analytic[li].data()).map(|(d, g)| d * g).sum();
                    for (w, (b, d)) in work[li].data_mut().iter_mut().zip(leaves[li].data().iter().zip(&dir)) {
                        *w = b + eps * d;
                    }
                    let plus = evaluate(&f, &work)?;
                    for (w, (b, d)) in work[li].data_mut().iter_mut().zip(leaves[li].data().iter().zip(&dir)) {
                        *w = b - eps * d;
                    }
                    let minus = evaluate(&f, &work)?;
                    work[li] = leaves[li].clone();
                    let numeric = (plus - minus) / (2.0 * eps);
                    record(&mut report, relative_error(along, numeric), (li, p));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&[3, 4], &mut rng);
        let x = rand_tensor(&[3, 4], &mut rng);
        let r = finite_diff_check(
            |g, l| {
                let c = g.constant(w.clone());
                let y = g.mul(l[0], c)?;
                let y = g.scale(y, 0.3);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
            ProbeMode::Exhaustive,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.probes, 12);
    }

    #[test]
    fn relu_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[20], |_| {
            let v: f64 = rng.random_range(1e-2..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let w = rand_tensor(&[20], &mut rng);
        let r = finite_diff_check(
            |g, l| {
                let h = g.relu(l[0]);
                let y = g.mul(h, l[1])?;
                Ok(g.sum(y))
            },
            &[x, w],
            1e-5,
            ProbeMode::Exhaustive,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn hard_reorder_is_rejected() {
        let s = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let bins = Tensor::from_fn(&[2, 3], |i| i as f64);
        let res = finite_diff_check(
            |g, l| {
                let r = g.hard_reorder(l[0], l[1])?;
                Ok(g.sum(r))
            },
            &[s, bins],
            1e-5,
            ProbeMode::Exhaustive,
        );
        assert!(matches!(res, Err(VtpError::NotDifferentiable(_))));
    }

    #[test]
    fn random_probes_cover_every_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[5, 5], &mut rng);
        let r = finite_diff_check(
            |g, l| {
                let e = g.exp(l[0]);
                let s = g.softmax(e);
                let s = g.log(s);
                Ok(g.mean(s))
            },
            &[a],
            1e-5,
            ProbeMode::Random { per_leaf: 4, seed: 9 },
        )
        .unwrap();
        assert_eq!(r.probes, 4);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let res = finite_diff_check(|g, l| Ok(g.sum(l[0])), &[Tensor::zeros(&[1])], 0.0, ProbeMode::Exhaustive);
        assert!(res.is_err());
    }
}
