//! Grid-level sparse mixture of experts.
//!
//! Every spatial position of a feature map is routed independently. The gate
//! projects the position's feature with `W`, scores the projection against
//! each expert embedding (a column of `E`) by cosine similarity, turns the
//! scores into probabilities with a temperature softmax, and keeps the top-k
//! probabilities unchanged while zeroing the rest. Kept weights are **not**
//! renormalized, so with uniform gates the output is scaled by `k / N`.
//!
//! Experts are per-position affine maps (1×1 convolutions) and only the
//! selected ones are evaluated.

mod gate;
mod layer;
mod stats;

pub use gate::{gate, select_top_k, RoutingDecision};
pub use layer::{init_from_pretrained, moe_forward, BoundMoe, MoeForward, MoeLayer, GATE_INIT_STD};
pub use stats::{export_top1_map, write_top1_csv, ExpertStats, LayerParticipation};

use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error("invalid MoE configuration: {0}")]
    Config(String),
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("expert embedding {0} has zero norm")]
    DegenerateEmbedding(usize),
    #[error("layer {0} is not registered in these statistics")]
    UnknownLayer(usize),
    #[error("routing covers {got} positions but the grid has {expected}")]
    Coverage { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MoeError>;

/// Shape and routing hyper-parameters of one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    /// Softmax temperature applied to the cosine scores.
    pub gate_temperature: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Rows of `W` and `E`.
    pub gate_dim: usize,
}

impl MoeConfig {
    pub const DEFAULT_EXPERTS: usize = 8;
    pub const DEFAULT_TOP_K: usize = 2;
    pub const DEFAULT_GATE_TEMPERATURE: f64 = 0.07;

    /// Defaults: 8 experts, top-2, temperature 0.07, gate_dim = in_channels.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            n_experts: Self::DEFAULT_EXPERTS,
            top_k: Self::DEFAULT_TOP_K,
            gate_temperature: Self::DEFAULT_GATE_TEMPERATURE,
            in_channels,
            out_channels,
            gate_dim: in_channels,
        }
    }

    pub fn with_experts(mut self, n_experts: usize, top_k: usize) -> Self {
        self.n_experts = n_experts;
        self.top_k = top_k;
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.gate_temperature = t;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(MoeError::Config("n_experts must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(MoeError::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.n_experts, self.top_k
            )));
        }
        if !(self.gate_temperature > 0.0) || !self.gate_temperature.is_finite() {
            return Err(MoeError::Config(format!(
                "gate_temperature must be positive, got {}",
                self.gate_temperature
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.gate_dim == 0 {
            return Err(MoeError::Config("all dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Gate transform `W` (`gate_dim × in_channels`) and expert embeddings `E`
/// (`gate_dim × n_experts`, one column per expert).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub transform: Tensor,
    pub embeddings: Tensor,
}

impl GateParams {
    pub fn new(transform: Tensor, embeddings: Tensor, cfg: &MoeConfig) -> Result<Self> {
        let params = Self {
            transform,
            embeddings,
        };
        params.validate(cfg)?;
        Ok(params)
    }

    pub fn validate(&self, cfg: &MoeConfig) -> Result<()> {
        if self.transform.shape() != [cfg.gate_dim, cfg.in_channels] {
            return Err(MoeError::Tensor(TensorError::ShapeMismatch {
                op: "gate transform",
                expected: vec![cfg.gate_dim, cfg.in_channels],
                got: self.transform.shape().to_vec(),
            }));
        }
        if self.embeddings.shape() != [cfg.gate_dim, cfg.n_experts] {
            return Err(MoeError::Tensor(TensorError::ShapeMismatch {
                op: "expert embeddings",
                expected: vec![cfg.gate_dim, cfg.n_experts],
                got: self.embeddings.shape().to_vec(),
            }));
        }
        for (n, col) in self.embedding_columns().iter().enumerate() {
            if crate::tensor::norm(col) <= crate::tensor::DEGENERATE_NORM {
                return Err(MoeError::DegenerateEmbedding(n));
            }
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embedding_columns(&self) -> Vec<Vec<f64>> {
        let s = self.embeddings.shape();
        crate::tensor::columns(self.embeddings.data(), s[0], s[1])
    }

    /// Overwrites every embedding column with the first one, making all
    /// experts indistinguishable to the gate.
    pub fn tie_embeddings(&mut self) {
        let s = self.embeddings.shape().to_vec();
        let (d, n) = (s[0], s[1]);
        let data = self.embeddings.data_mut();
        for k in 0..d {
            let first = data[k * n];
            for j in 1..n {
                data[k * n + j] = first;
            }
        }
    }
}

/// The `N` expert projections, all of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ExpertBank {
    pub fn new(weights: Vec<Tensor>, biases: Vec<Tensor>, cfg: &MoeConfig) -> Result<Self> {
        let bank = Self { weights, biases };
        bank.validate(cfg)?;
        Ok(bank)
    }

    pub fn validate(&self, cfg: &MoeConfig) -> Result<()> {
        if self.weights.len() != cfg.n_experts || self.biases.len() != cfg.n_experts {
            return Err(MoeError::Config(format!(
                "expected {} experts, got {} weights and {} biases",
                cfg.n_experts,
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if w.shape() != [cfg.out_channels, cfg.in_channels] || b.shape() != [cfg.out_channels] {
                return Err(MoeError::Tensor(TensorError::ShapeMismatch {
                    op: "expert bank",
                    expected: vec![cfg.out_channels, cfg.in_channels],
                    got: w.shape().to_vec(),
                }));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Applies expert `n` to a single feature vector.
    pub fn apply(&self, n: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.biases[n].len()];
        crate::tensor::matvec_into(
            self.weights[n].data(),
            x,
            Some(self.biases[n].data()),
            &mut out,
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let cfg = MoeConfig::new(4, 4);
        assert!(cfg.validate().is_ok());
        assert!(cfg.clone().with_experts(2, 3).validate().is_err());
        assert!(cfg.clone().with_experts(0, 0).validate().is_err());
        assert!(cfg.clone().with_experts(3, 0).validate().is_err());
        assert!(cfg.clone().with_temperature(0.0).validate().is_err());
        assert_eq!(cfg.n_experts, 8);
        assert_eq!(cfg.top_k, 2);
        assert_eq!(cfg.gate_dim, 4);
    }

    #[test]
    fn zero_embedding_rejected() {
        let cfg = MoeConfig::new(2, 2).with_experts(2, 1);
        let e = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            GateParams::new(Tensor::identity(2), e, &cfg),
            Err(MoeError::DegenerateEmbedding(1))
        ));
    }

    #[test]
    fn tie_embeddings_copies_first_column() {
        let cfg = MoeConfig::new(2, 2).with_experts(3, 1);
        let e = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let mut g = GateParams::new(Tensor::identity(2), e, &cfg).unwrap();
        g.tie_embeddings();
        assert_eq!(g.embedding_columns(), vec![vec![1.0, 4.0]; 3]);
    }
}
