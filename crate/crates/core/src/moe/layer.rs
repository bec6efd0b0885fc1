use super::gate::{select_top_k, RoutingDecision};
use super::{ExpertBank, GateParams, MoeConfig, MoeError, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation of the zero-mean normal used for `W` and `E`.
pub const GATE_INIT_STD: f64 = 0.02;

/// Builds a layer whose experts are bit-exact copies of a pretrained 1×1
/// projection, with freshly drawn gate parameters.
pub fn init_from_pretrained<R: Rng + ?Sized>(
    weight: &Tensor,
    bias: &Tensor,
    cfg: &MoeConfig,
    rng: &mut R,
) -> Result<(ExpertBank, GateParams)> {
    cfg.validate()?;
    let bank = ExpertBank::new(
        vec![weight.clone(); cfg.n_experts],
        vec![bias.clone(); cfg.n_experts],
        cfg,
    )?;
    let normal = Normal::new(0.0, GATE_INIT_STD).expect("valid std");
    let mut draw = |shape: Vec<usize>| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut *rng)).collect();
        Tensor::new(shape, data)
    };
    let transform = draw(vec![cfg.gate_dim, cfg.in_channels])?;
    let embeddings = draw(vec![cfg.gate_dim, cfg.n_experts])?;
    let gate = GateParams::new(transform, embeddings, cfg)?;
    Ok((bank, gate))
}

/// A layer's parameters recorded as leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundMoe {
    pub transform: Var,
    pub embeddings: Var,
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundMoe {
    /// Parameter handles in the order gate transform, embeddings, then each
    /// expert's weight and bias.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.transform, self.embeddings];
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.push(*w);
            v.push(*b);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct MoeForward {
    pub output: Var,
    /// One decision per grid position, row-major.
    pub decisions: Vec<RoutingDecision>,
    /// Number of expert evaluations performed.
    pub expert_applications: usize,
}

/// Runs the layer on `x` (`[.., in_channels]`) and records it on `tape`.
pub fn moe_forward(
    tape: &mut Tape,
    x: Var,
    layer: &BoundMoe,
    cfg: &MoeConfig,
) -> Result<MoeForward> {
    cfg.validate()?;
    let got = tape.value(x).last_dim();
    if tape.value(x).rank() == 0 || got != cfg.in_channels {
        return Err(MoeError::ChannelMismatch {
            expected: cfg.in_channels,
            got,
        });
    }
    if layer.weights.len() != cfg.n_experts {
        return Err(MoeError::Config(format!(
            "bound layer has {} experts, config says {}",
            layer.weights.len(),
            cfg.n_experts
        )));
    }
    let projected = tape.grid_linear(x, layer.transform, None)?;
    let scores = tape.cosine_similarity(projected, layer.embeddings)?;
    let probs = tape.softmax(scores, cfg.gate_temperature)?;
    let pv = tape.value(probs);
    let decisions: Vec<RoutingDecision> = (0..pv.rows())
        .map(|r| select_top_k(pv.row(r), cfg.top_k))
        .collect();
    let selected = decisions.iter().map(|d| d.selected.clone()).collect();
    let (output, expert_applications) =
        tape.sparse_mixture(x, probs, &layer.weights, &layer.biases, selected)?;
    Ok(MoeForward {
        output,
        decisions,
        expert_applications,
    })
}

/// Owned parameters of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub cfg: MoeConfig,
    pub bank: ExpertBank,
    pub gate: GateParams,
}

impl MoeLayer {
    pub fn new(cfg: MoeConfig, bank: ExpertBank, gate: GateParams) -> Result<Self> {
        cfg.validate()?;
        bank.validate(&cfg)?;
        gate.validate(&cfg)?;
        Ok(Self { cfg, bank, gate })
    }

    pub fn from_pretrained<R: Rng + ?Sized>(
        weight: &Tensor,
        bias: &Tensor,
        cfg: MoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (bank, gate) = init_from_pretrained(weight, bias, &cfg, rng)?;
        Ok(Self { cfg, bank, gate })
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundMoe {
        BoundMoe {
            transform: tape.param(self.gate.transform.clone()),
            embeddings: tape.param(self.gate.embeddings.clone()),
            weights: self
                .bank
                .weights
                .iter()
                .map(|w| tape.param(w.clone()))
                .collect(),
            biases: self
                .bank
                .biases
                .iter()
                .map(|b| tape.param(b.clone()))
                .collect(),
        }
    }

    /// Parameters in [`BoundMoe::vars`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.gate.transform, &self.gate.embeddings];
        for (w, b) in self.bank.weights.iter().zip(&self.bank.biases) {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.gate.transform, &mut self.gate.embeddings];
        for (w, b) in self
            .bank
            .weights
            .iter_mut()
            .zip(self.bank.biases.iter_mut())
        {
            v.push(w);
            v.push(b);
        }
        v
    }

    /// Untracked forward pass returning output, routing and application count.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<RoutingDecision>, usize)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = self.bind(&mut tape);
        let out = moe_forward(&mut tape, xv, &bound, &self.cfg)?;
        Ok((
            tape.value(out.output).clone(),
            out.decisions,
            out.expert_applications,
        ))
    }
}
