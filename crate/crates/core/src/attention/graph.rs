//! The encoder expressed on the autodiff tape.
//!
//! Parameters enter the graph as a flat slice of node ids in the order given
//! by [`AttentionWeights::params`].

use super::{AttentionConfig, AttentionWeights, ReorderMode};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, VtpError};
use crate::tensor::Tensor;

/// Number of tensors per encoder layer in the flat parameter list.
pub const LAYER_PARAMS: usize = 12;

impl AttentionWeights {
    /// Embedding weights, embedding bias, positional table, then the twelve
    /// tensors of every layer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed_conv.weights, &self.embed_conv.bias, &self.positional];
        for l in &self.layers {
            out.extend(l.tensors().into_iter().map(|(_, t)| t));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embed_conv.weights,
            &mut self.embed_conv.bias,
            &mut self.positional,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn param_count(layers: usize) -> usize {
        3 + LAYER_PARAMS * layers
    }
}

/// Log-space Sinkhorn on the tape: row then column log-softmax per round.
pub fn sinkhorn_graph(g: &mut Graph, r: NodeId, iterations: usize) -> Result<NodeId> {
    if iterations == 0 {
        return Err(VtpError::Config("sinkhorn needs at least one iteration".into()));
    }
    let mut log_s = r;
    for _ in 0..iterations {
        log_s = g.log_softmax(log_s);
        let t = g.transpose(log_s)?;
        let t = g.log_softmax(t);
        log_s = g.transpose(t)?;
    }
    Ok(g.exp(log_s))
}

/// One encoder layer on an `L × e` sequence node.
pub fn encoder_layer_graph(g: &mut Graph, x: NodeId, p: &[NodeId], cfg: &AttentionConfig) -> Result<NodeId> {
    let [w_q, w_k, w_v, w_o, ff1_w, ff1_b, ff2_w, ff2_b, ln1_g, ln1_b, ln2_g, ln2_b] = p else {
        return Err(VtpError::Shape(format!("encoder layer needs {LAYER_PARAMS} parameters")));
    };
    let (l, e) = (g.value(x).rows(), g.value(x).cols());
    let b = cfg.bin_size;
    let n_b = l / b;
    let q = g.matmul(x, *w_q)?;
    let k = g.matmul(x, *w_k)?;
    let v = g.matmul(x, *w_v)?;
    let qm = g.bin_mean(q, b)?;
    let km = g.bin_mean(k, b)?;
    let r = g.matmul_t(qm, false, km, true)?;
    let r = g.scale(r, 1.0 / cfg.tau());
    let s = sinkhorn_graph(g, r, cfg.sinkhorn_iters)?;
    let k_bins = g.reshape(k, &[n_b, b * e])?;
    let v_bins = g.reshape(v, &[n_b, b * e])?;
    let (ks, vs) = match cfg.reorder {
        ReorderMode::Soft => (g.matmul(s, k_bins)?, g.matmul(s, v_bins)?),
        ReorderMode::Hard => (g.hard_reorder(s, k_bins)?, g.hard_reorder(s, v_bins)?),
    };
    let ks = g.reshape(ks, &[l, e])?;
    let vs = g.reshape(vs, &[l, e])?;
    let mixed = g.window_attention([q, k, v, ks, vs], b, cfg.heads)?;
    let attn = g.matmul(mixed, *w_o)?;
    let x1 = g.add(x, attn)?;
    let x1 = g.layer_norm(x1, *ln1_g, *ln1_b)?;
    let h = g.matmul(x1, *ff1_w)?;
    let h = g.add_row(h, *ff1_b)?;
    let h = g.relu(h);
    let f = g.matmul(h, *ff2_w)?;
    let f = g.add_row(f, *ff2_b)?;
    let x2 = g.add(x1, f)?;
    g.layer_norm(x2, *ln2_g, *ln2_b)
}

/// Transformer branch on a `j × L` volume node; returns an `e × L` node.
pub fn encoder_graph(
    g: &mut Graph,
    vol: NodeId,
    dims: [usize; 3],
    params: &[NodeId],
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if params.len() != AttentionWeights::param_count(cfg.layers) {
        return Err(VtpError::Shape(format!(
            "{} attention parameters for {} layers",
            params.len(),
            cfg.layers
        )));
    }
    cfg.check_length(dims.iter().product())?;
    let conv = g.conv3d(vol, params[0], params[1], dims, 3)?;
    let seq = g.transpose(conv)?;
    let mut x = g.add(seq, params[2])?;
    for lp in params[3..].chunks(LAYER_PARAMS) {
        x = encoder_layer_graph(g, x, lp, cfg)?;
    }
    g.transpose(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{encoder_forward, sinkhorn_normalize};
    use crate::voxelgrid::FeatureVolume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(reorder: ReorderMode, layers: usize) -> AttentionConfig {
        AttentionConfig {
            embed: 4,
            heads: 2,
            bin_size: 2,
            sinkhorn_iters: 4,
            temperature: None,
            layers,
            reorder,
        }
    }

    #[test]
    fn sinkhorn_graph_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::from_fn(&[5, 5], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let rn = g.constant(r.clone());
        let s = sinkhorn_graph(&mut g, rn, 6).unwrap();
        let direct = sinkhorn_normalize(&r, 6).unwrap();
        assert!(g.value(s).max_abs_diff(&direct.s) < 1e-14);
    }

    #[test]
    fn graph_forward_matches_plain_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [ReorderMode::Soft, ReorderMode::Hard] {
            let c = cfg(mode, 2);
            let w = AttentionWeights::init(3, 8, &c, &mut rng).unwrap();
            let vol = FeatureVolume::from_tensor(
                Tensor::from_fn(&[3, 8], |_| rng.random_range(0.0..1.0)),
                [2, 2, 2],
            )
            .unwrap();
            let plain = encoder_forward(&vol, &w, &c).unwrap();
            let mut g = Graph::new();
            let ids: Vec<NodeId> = w.params().into_iter().map(|t| g.leaf(t.clone())).collect();
            let x = g.constant(vol.tensor().clone());
            let out = encoder_graph(&mut g, x, [2, 2, 2], &ids, &c).unwrap();
            assert!(g.value(out).max_abs_diff(plain.tensor()) < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(ReorderMode::Soft, 2);
        let mut w = AttentionWeights::init(3, 8, &c, &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = w.params().iter().map(|t| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = w.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(shapes.len(), AttentionWeights::param_count(2));
    }

    #[test]
    fn wrong_parameter_count_is_rejected() {
        let c = cfg(ReorderMode::Soft, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 8]));
        assert!(encoder_graph(&mut g, x, [2, 2, 2], &[], &c).is_err());
    }
}
