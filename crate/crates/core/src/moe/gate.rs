use super::{GateParams, MoeConfig, MoeError, Result};
use crate::tensor::{columns, cosine_row, matvec_into, norm, softmax_into};

/// Routing outcome at one grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, highest probability first (ties: lowest index first).
    pub selected: Vec<usize>,
    /// Gate weight of each selected expert, equal to its softmax probability.
    pub gate_weights: Vec<f64>,
    /// Softmax over all experts before masking.
    pub full_softmax: Vec<f64>,
}

impl RoutingDecision {
    pub fn n_experts(&self) -> usize {
        self.full_softmax.len()
    }

    /// Argmax of the full softmax, ties to the lowest index.
    pub fn top1(&self) -> usize {
        self.selected[0]
    }

    /// Post-top-k gate vector over all experts; non-selected entries are 0.
    pub fn dense_gates(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_experts()];
        for (&e, &w) in self.selected.iter().zip(&self.gate_weights) {
            g[e] = w;
        }
        g
    }
}

/// Keeps the `k` largest probabilities without renormalizing them.
pub fn select_top_k(probs: &[f64], k: usize) -> RoutingDecision {
    let k = k.min(probs.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    RoutingDecision {
        gate_weights: order.iter().map(|&e| probs[e]).collect(),
        selected: order,
        full_softmax: probs.to_vec(),
    }
}

/// Routes a single feature vector.
///
/// When the projected feature `W·x` has (near) zero norm the cosine scores
/// are undefined; they are taken as all zero, which yields uniform routing.
pub fn gate(x: &[f64], params: &GateParams, cfg: &MoeConfig) -> Result<RoutingDecision> {
    cfg.validate()?;
    if x.len() != cfg.in_channels {
        return Err(MoeError::ChannelMismatch {
            expected: cfg.in_channels,
            got: x.len(),
        });
    }
    params.validate(cfg)?;
    let mut z = vec![0.0; cfg.gate_dim];
    matvec_into(params.transform.data(), x, None, &mut z);
    let cols = columns(params.embeddings.data(), cfg.gate_dim, cfg.n_experts);
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut scores = vec![0.0; cfg.n_experts];
    cosine_row(&z, &cols, &norms, &mut scores);
    let mut probs = vec![0.0; cfg.n_experts];
    softmax_into(&scores, cfg.gate_temperature, &mut probs);
    Ok(select_top_k(&probs, cfg.top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(n: usize, k: usize, d: usize) -> MoeConfig {
        MoeConfig::new(d, d)
            .with_experts(n, k)
            .with_temperature(1.0)
    }

    #[test]
    fn identical_embeddings_route_uniformly() {
        let c = cfg(4, 2, 3);
        let e = Tensor::filled(vec![3, 4], 0.3).unwrap();
        let p = GateParams::new(Tensor::identity(3), e, &c).unwrap();
        let d = gate(&[0.2, -1.0, 4.0], &p, &c).unwrap();
        assert_eq!(d.full_softmax, vec![0.25; 4]);
        assert_eq!(d.selected, vec![0, 1]);
        assert_eq!(d.gate_weights, vec![0.25, 0.25]);
    }

    #[test]
    fn two_expert_hand_case() {
        let c = cfg(2, 1, 2);
        let p = GateParams::new(Tensor::identity(2), Tensor::identity(2), &c).unwrap();
        let d = gate(&[1.0, 0.0], &p, &c).unwrap();
        // cosines [1, 0] → logistic(1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(d.selected, vec![0]);
        assert!((d.gate_weights[0] - oracle).abs() < 1e-15);
        assert!((d.full_softmax[0] - 0.731059).abs() < 1e-6);
        assert!((d.full_softmax[1] - 0.268941).abs() < 1e-6);
        assert_eq!(d.dense_gates()[1], 0.0);
    }

    #[test]
    fn positive_scaling_keeps_routing() {
        let c = cfg(3, 2, 2);
        let e = Tensor::matrix(&[&[1.0, -0.5, 0.2], &[0.3, 0.9, -1.0]]);
        let w = Tensor::matrix(&[&[0.7, 0.1], &[-0.2, 1.1]]);
        let p = GateParams::new(w, e, &c).unwrap();
        let x = [0.4, -0.8];
        let base = gate(&x, &p, &c).unwrap();
        for s in [0.5, 3.0, 100.0] {
            let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
            let d = gate(&xs, &p, &c).unwrap();
            assert_eq!(d.selected, base.selected);
            for (a, b) in d.gate_weights.iter().zip(&base.gate_weights) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_feature_falls_back_to_uniform() {
        let c = cfg(5, 3, 2);
        let e = Tensor::matrix(&[&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, -4.0, 3.0, 2.0, 1.0]]);
        let p = GateParams::new(Tensor::identity(2), e, &c).unwrap();
        let d = gate(&[0.0, 0.0], &p, &c).unwrap();
        assert_eq!(d.full_softmax, vec![0.2; 5]);
        assert_eq!(d.selected, vec![0, 1, 2]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let c = cfg(2, 1, 2);
        let p = GateParams::new(Tensor::identity(2), Tensor::identity(2), &c).unwrap();
        assert!(matches!(
            gate(&[1.0, 2.0, 3.0], &p, &c),
            Err(MoeError::ChannelMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn top_k_tie_break_lowest_index() {
        let d = select_top_k(&[0.2, 0.3, 0.3, 0.2], 3);
        assert_eq!(d.selected, vec![1, 2, 0]);
    }
}
