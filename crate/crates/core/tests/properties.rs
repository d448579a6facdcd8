//! Randomized invariants of the building blocks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtp_core::attention::graph::{encoder_graph, sinkhorn_graph};
use vtp_core::attention::{
    sinkhorn_normalize, windowed_attention, AttentionConfig, AttentionWeights, ReorderMode,
};
use vtp_core::autodiff::{finite_diff_check, Graph, NodeId, ProbeMode};
use vtp_core::geometry::{aggregate_feature_volume, CameraCalib, Heatmap};
use vtp_core::metrics::{ap_k, evaluate, pcp3d, EvalConfig, FrameEval};
use vtp_core::pipeline::io::{read_tensor_set, write_tensor_set};
use vtp_core::pipeline::DType;
use vtp_core::posehead::{integral_regression, integral_regression_graph, JointProbabilityVolume, Pose3D};
use vtp_core::voxelgrid::{flat_index, partition_bins, unflat_index, GridSpec};
use vtp_core::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn random_poses(rng: &mut ChaCha8Rng, n: usize, joints: usize) -> Vec<Pose3D> {
    let skeleton: Vec<[usize; 2]> = (1..joints).map(|j| [j - 1, j]).collect();
    (0..n)
        .map(|_| {
            let base = [0, 1, 2].map(|_| rng.random_range(-2000.0..2000.0));
            let joints = (0..joints)
                .map(|_| [0, 1, 2].map(|a| base[a] + rng.random_range(-400.0..400.0)))
                .collect();
            Pose3D::new(joints, skeleton.clone()).unwrap()
        })
        .collect()
}

fn jitter(poses: &[Pose3D], rng: &mut ChaCha8Rng, scale: f64) -> Vec<Pose3D> {
    poses
        .iter()
        .map(|p| {
            let joints = p
                .joints
                .iter()
                .map(|j| [0, 1, 2].map(|a| j[a] + rng.random_range(-scale..scale)))
                .collect();
            Pose3D::new(joints, p.skeleton.clone()).unwrap()
        })
        .collect()
}

proptest! {
    #[test]
    fn flat_index_round_trips(x in 1usize..9, y in 1usize..9, z in 1usize..9, seed in any::<u64>()) {
        let dims = [x, y, z];
        let i = (seed % (x * y * z) as u64) as usize;
        let idx = unflat_index(dims, i);
        prop_assert!(idx.iter().zip(&dims).all(|(a, d)| a < d));
        prop_assert_eq!(flat_index(dims, idx), i);
        prop_assert_eq!(i, idx[0] + x * idx[1] + x * y * idx[2]);
    }

    #[test]
    fn sinkhorn_entries_bounded_and_deviation_monotone(n in 2usize..9, seed in any::<u64>(), spread in 0.1f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::from_fn(&[n, n], |_| rng.random_range(-spread..spread));
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let s = sinkhorn_normalize(&r, k).unwrap();
            prop_assert!(s.s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let d = s.marginal_deviation();
            prop_assert!(d <= prev + 1e-12, "k={} {} > {}", k, d, prev);
            prev = d;
        }
    }

    #[test]
    fn aggregation_is_translation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = [0, 1, 2].map(|_| rng.random_range(-5000.0..5000.0));
        let cams: Vec<CameraCalib> = (0..3)
            .map(|k| {
                let a = k as f64 * 2.1 + rng.random_range(-0.3..0.3);
                let eye = [3500.0 * a.cos(), 3500.0 * a.sin(), 1500.0];
                CameraCalib::look_at(eye, [0.0, 0.0, 900.0], 120.0, 120.0, 31.5, 23.5, 64, 48).unwrap()
            })
            .collect();
        let heatmaps: Vec<Heatmap> = (0..3)
            .map(|_| Heatmap::new(2, 48, 64, (0..2 * 48 * 64).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let grid = GridSpec::cube([0.0, 0.0, 900.0], 2000.0, 6).unwrap();
        // Shifting the world by delta keeps R and moves t to t - R·delta.
        let moved: Vec<CameraCalib> = cams
            .iter()
            .map(|c| {
                let mut m = c.clone();
                for r in 0..3 {
                    m.translation[r] -= (0..3).map(|a| c.rotation[3 * r + a] * delta[a]).sum::<f64>();
                }
                m
            })
            .collect();
        let shifted = grid.recentered([0, 1, 2].map(|a| grid.center[a] + delta[a]));
        let a = aggregate_feature_volume(&cams, &heatmaps, &grid).unwrap();
        let b = aggregate_feature_volume(&moved, &heatmaps, &shifted).unwrap();
        prop_assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-6);
    }

    #[test]
    fn regression_is_translation_equivariant_and_bounded(seed in any::<u64>(), res in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = res * res * res;
        let logits = Tensor::from_fn(&[3, l], |_| rng.random_range(-4.0..4.0));
        let p = JointProbabilityVolume::new(softmax_rows(&logits), [res; 3]).unwrap();
        let grid = GridSpec::cube([0, 1, 2].map(|_| rng.random_range(-3000.0..3000.0)), 2000.0, res).unwrap();
        let delta = [0, 1, 2].map(|_| rng.random_range(-3000.0..3000.0));
        let shifted = grid.recentered([0, 1, 2].map(|a| grid.center[a] + delta[a]));
        let a = integral_regression(&p, &grid).unwrap();
        let b = integral_regression(&p, &shifted).unwrap();
        let (lo, hi) = grid.center_bounds();
        for (ja, jb) in a.joints.iter().zip(&b.joints) {
            for ax in 0..3 {
                prop_assert!((jb[ax] - ja[ax] - delta[ax]).abs() < 1e-8);
                prop_assert!(ja[ax] >= lo[ax] - 1e-9 && ja[ax] <= hi[ax] + 1e-9);
            }
        }
    }

    #[test]
    fn metrics_are_translation_invariant(seed in any::<u64>(), n_gt in 1usize..4, n_pred in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = random_poses(&mut rng, n_gt, 5);
        let mut preds = jitter(&gts[..n_pred.min(n_gt)], &mut rng, 150.0);
        preds.extend(random_poses(&mut rng, n_pred.saturating_sub(n_gt), 5));
        let delta = [0, 1, 2].map(|_| rng.random_range(-10000.0..10000.0));
        let cfg = EvalConfig::default();
        let a = evaluate(&[FrameEval::new(preds.clone(), gts.clone()).unwrap()], &cfg).unwrap();
        let moved = |ps: &[Pose3D]| ps.iter().map(|p| p.translated(delta)).collect::<Vec<_>>();
        let b = evaluate(&[FrameEval::new(moved(&preds), moved(&gts)).unwrap()], &cfg).unwrap();
        prop_assert_eq!(a.pcp_average, b.pcp_average);
        match (a.mpjpe, b.mpjpe) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-8),
            (x, y) => prop_assert_eq!(x, y),
        }
        for (x, y) in a.ap.iter().zip(&b.ap) {
            prop_assert_eq!(x.ap, y.ap);
        }
    }

    #[test]
    fn pcp_and_ap_are_monotone(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = random_poses(&mut rng, n, 6);
        let preds = jitter(&gts, &mut rng, 300.0);
        let frames = [FrameEval::new(preds, gts).unwrap()];
        let mut prev = 0.0;
        for alpha in [0.1, 0.25, 0.5, 0.75, 1.0, 2.0] {
            let pcp = pcp3d(&frames, alpha, &[]).average;
            prop_assert!(pcp >= prev);
            prev = pcp;
        }
        let mut prev = 0.0;
        for k in [10.0, 25.0, 50.0, 100.0, 150.0, 300.0, 1000.0] {
            let ap = ap_k(&frames, k);
            prop_assert!(ap >= prev && ap <= 1.0);
            prev = ap;
        }
    }

    #[test]
    fn window_attention_outputs_are_convex_combinations(seed in any::<u64>(), bins in 1usize..5, heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, e) = (4, 4);
        let len = bins * b;
        let mk = |rng: &mut ChaCha8Rng| partition_bins(&rand_tensor(&[len, e], rng), b).unwrap();
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let eye = Tensor::from_fn(&[e, e], |i| (i / e == i % e) as u8 as f64);
        // With the bins as their own counterparts each window is a single bin.
        let out = windowed_attention(&q, &k, &v, &k, &v, heads, &eye, None).unwrap();
        for i in 0..bins {
            let vb = v.bin(i);
            for (r, row) in out.bin(i).chunks(e).enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    let col = (0..b).map(|t| vb[t * e + c]);
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "bin {} row {} col {}", i, r, c);
                }
            }
        }
    }

    #[test]
    fn tensor_sets_round_trip(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1e6..1e6));
        let b = Tensor::from_fn(&[cols], |_| rng.random::<f64>());
        let dir = tempfile::tempdir().unwrap();
        write_tensor_set(dir.path(), &[("a".into(), &a), ("b".into(), &b)], DType::F64).unwrap();
        prop_assert_eq!(read_tensor_set(dir.path()).unwrap(), vec![("a".to_string(), a.clone()), ("b".to_string(), b)]);
        write_tensor_set(dir.path(), &[("a".into(), &a)], DType::F32).unwrap();
        let back = read_tensor_set(dir.path()).unwrap();
        let want = a.map(|v| v as f32 as f64);
        prop_assert_eq!(&back[0].1, &want);
    }
}

/// Smallest gradient magnitude over all leaf components. Relative error
/// against central differences is ill-conditioned where a component cancels
/// to nearly zero, the same way it is at a kink.
fn smallest_gradient<F>(f: &F, leaves: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> vtp_core::Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids).unwrap();
    g.backward(out)
        .unwrap()
        .as_slice()
        .iter()
        .flat_map(|t| t.data())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn conv3d_gradient_matches_differences(seed in any::<u64>(), kernel in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [3, 2, 3];
        let (c_in, c_out) = (2, 3);
        let leaves = vec![
            rand_tensor(&[c_in, 18], &mut rng),
            rand_tensor(&[c_out, c_in * kernel.pow(3)], &mut rng),
            rand_tensor(&[c_out], &mut rng),
        ];
        let weight = rand_tensor(&[c_out, 18], &mut rng);
        let f = |g: &mut Graph, ids: &[NodeId]| {
            let y = g.conv3d(ids[0], ids[1], ids[2], dims, kernel)?;
            let w = g.constant(weight.clone());
            let yw = g.mul(y, w)?;
            let sq = g.mul(yw, y)?;
            Ok(g.sum(sq))
        };
        prop_assume!(smallest_gradient(&f, &leaves) >= 1e-3);
        let check = finite_diff_check(
            f,
            &leaves,
            1e-5,
            ProbeMode::Exhaustive,
        )
        .unwrap();
        prop_assert!(check.max_rel_error <= 1e-5, "{:?}", check);
    }

    #[test]
    fn integral_regression_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec::cube([100.0, -200.0, 900.0], 2000.0, 3).unwrap();
        let logits = Tensor::from_fn(&[2, 27], |_| rng.random_range(-2.0..2.0));
        let weight = rand_tensor(&[2, 3], &mut rng);
        let f = |g: &mut Graph, ids: &[NodeId]| {
            let p = g.softmax(ids[0]);
            let j = integral_regression_graph(g, p, &grid)?;
            let w = g.constant(weight.clone());
            let jw = g.mul(j, w)?;
            Ok(g.sum(jw))
        };
        let leaves = [logits];
        prop_assume!(smallest_gradient(&f, &leaves) >= 1e-3);
        let check = finite_diff_check(
            f,
            &leaves,
            1e-5,
            ProbeMode::Exhaustive,
        )
        .unwrap();
        prop_assert!(check.max_rel_error <= 1e-5, "{:?}", check);
    }

    #[test]
    fn encoder_mean_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AttentionConfig {
            embed: 4,
            heads: 2,
            bin_size: 2,
            sinkhorn_iters: 3,
            layers: 1,
            reorder: ReorderMode::Soft,
            ..Default::default()
        };
        let dims = [2, 2, 2];
        let mut w = AttentionWeights::init(2, 8, &cfg, &mut rng).unwrap();
        // With unit gains the mean of a layer-normalized output is constant.
        for layer in &mut w.layers {
            layer.ln2_gain = Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5));
            layer.ln1_gain = Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5));
        }
        let vol = Tensor::from_fn(&[2, 8], |_| rng.random::<f64>());
        let leaves: Vec<Tensor> = w.params().into_iter().cloned().collect();
        let check = finite_diff_check(
            |g, ids| {
                let x = g.constant(vol.clone());
                let out = encoder_graph(g, x, dims, ids, &cfg)?;
                Ok(g.mean(out))
            },
            &leaves,
            1e-5,
            ProbeMode::Random { per_leaf: 3, seed },
        )
        .unwrap();
        prop_assert!(check.max_rel_error <= 1e-4, "{:?}", check);
    }
}

const PRIMITIVES: [&str; 22] = [
    "add", "sub", "mul", "add_row", "scale", "matmul_t", "transpose", "reshape", "relu", "exp", "log", "abs",
    "softmax", "log_softmax", "mean", "bin_mean", "concat", "conv3d", "layer_norm", "window_attention",
    "sinkhorn", "integral_regression",
];

/// Leaves and a builder for one primitive; the builder's output is
/// contracted with a fixed random tensor so every component matters.
type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> vtp_core::Result<NodeId>>;

fn primitive_case(op: &str, r: usize, c: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    // Keeps samples at least 0.1 away from 0 for the kinked primitives.
    let away = |rng: &mut ChaCha8Rng| {
        let v = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    };
    let x = rand_tensor(&[r, c], rng);
    let (leaves, build): (Vec<Tensor>, Build) = match op {
        "add" => (vec![x, rand_tensor(&[r, c], rng)], Box::new(|g, l| g.add(l[0], l[1]))),
        "sub" => (vec![x, rand_tensor(&[r, c], rng)], Box::new(|g, l| g.sub(l[0], l[1]))),
        "mul" => (vec![x, rand_tensor(&[r, c], rng)], Box::new(|g, l| g.mul(l[0], l[1]))),
        "add_row" => (vec![x, rand_tensor(&[c], rng)], Box::new(|g, l| g.add_row(l[0], l[1]))),
        "scale" => (vec![x], Box::new(|g, l| Ok(g.scale(l[0], -1.7)))),
        "matmul_t" => {
            let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let a = if ta { rand_tensor(&[c, r], rng) } else { x };
            let b = if tb { rand_tensor(&[3, c], rng) } else { rand_tensor(&[c, 3], rng) };
            (vec![a, b], Box::new(move |g, l| g.matmul_t(l[0], ta, l[1], tb)))
        }
        "transpose" => (vec![x], Box::new(|g, l| g.transpose(l[0]))),
        "reshape" => (vec![x], Box::new(move |g, l| g.reshape(l[0], &[c, r]))),
        "relu" => (vec![Tensor::from_fn(&[r, c], |_| away(rng))], Box::new(|g, l| Ok(g.relu(l[0])))),
        "exp" => (vec![x], Box::new(|g, l| Ok(g.exp(l[0])))),
        "log" => (vec![x.map(|v| v.abs() + 0.2)], Box::new(|g, l| Ok(g.log(l[0])))),
        "abs" => (vec![Tensor::from_fn(&[r, c], |_| away(rng))], Box::new(|g, l| Ok(g.abs(l[0])))),
        "softmax" => (vec![x], Box::new(|g, l| Ok(g.softmax(l[0])))),
        "log_softmax" => (vec![x], Box::new(|g, l| Ok(g.log_softmax(l[0])))),
        "mean" => (vec![x], Box::new(|g, l| Ok(g.mean(l[0])))),
        "bin_mean" => (vec![rand_tensor(&[2 * r, c], rng)], Box::new(|g, l| g.bin_mean(l[0], 2))),
        "concat" => (vec![x, rand_tensor(&[1, c], rng)], Box::new(|g, l| g.concat(&[l[0], l[1]]))),
        "conv3d" => {
            let dims = [r, c, 2];
            let leaves = vec![rand_tensor(&[2, r * c * 2], rng), rand_tensor(&[3, 2 * 27], rng), rand_tensor(&[3], rng)];
            (leaves, Box::new(move |g, l| g.conv3d(l[0], l[1], l[2], dims, 3)))
        }
        "layer_norm" => {
            // Two features always normalize to ±1, leaving gradients too
            // small for central differences to resolve.
            let e = c + 2;
            let x = rand_tensor(&[r, e], rng);
            (vec![x, rand_tensor(&[e], rng), rand_tensor(&[e], rng)], Box::new(|g, l| g.layer_norm(l[0], l[1], l[2])))
        }
        "window_attention" => {
            let leaves = (0..5).map(|_| rand_tensor(&[2 * r, 4], rng)).collect();
            (leaves, Box::new(|g, l| g.window_attention([l[0], l[1], l[2], l[3], l[4]], 2, 2)))
        }
        "sinkhorn" => (vec![rand_tensor(&[r + 1, r + 1], rng)], Box::new(|g, l| sinkhorn_graph(g, l[0], 5))),
        "integral_regression" => {
            let grid = GridSpec::new([10.0, -20.0, 800.0], [1600.0, 1200.0, 2000.0], [r, c, 2]).unwrap();
            let p = rand_tensor(&[2, r * c * 2], rng);
            (vec![p], Box::new(move |g, l| {
                let s = g.softmax(l[0]);
                integral_regression_graph(g, s, &grid)
            }))
        }
        other => panic!("unknown primitive {other}"),
    };
    let mut g = Graph::new();
    let ids: Vec<_> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids).unwrap();
    let out_shape = g.value(out).shape().to_vec();
    let weight = rand_tensor(&out_shape, rng);
    let f = move |g: &mut Graph, l: &[NodeId]| {
        let y = build(g, l)?;
        let w = g.constant(weight.clone());
        let yw = g.mul(y, w)?;
        Ok(g.sum(yw))
    };
    (leaves, Box::new(f))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_primitive_gradient_matches_differences(
        op in prop::sample::select(PRIMITIVES.to_vec()),
        r in 1usize..4,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (leaves, f) = primitive_case(op, r, c, &mut rng);
        prop_assume!(smallest_gradient(&f, &leaves) >= 1e-3);
        let check = finite_diff_check(&f, &leaves, 1e-5, ProbeMode::Exhaustive).unwrap();
        prop_assert!(check.max_rel_error <= 1e-7, "{}: {:?}", op, check);
    }
}
