//! Shared trunk of per-grid projections with optional MoE blocks, plus one
//! head per task.

use super::data::{derive_seed, Modality, Sample, Target, TaskKind, TaskSpec};
use super::{HarnessError, Result};
use crate::dso::ParamGroup;
use crate::moe::{moe_forward, BoundMoe, MoeConfig, MoeLayer, RoutingDecision};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub depth: usize,
    pub channels: usize,
    /// `moe_mask[i]` puts an MoE layer at trunk block `i`.
    pub moe_mask: Vec<bool>,
    pub moe: MoeConfig,
    pub tasks: Vec<TaskSpec>,
    /// Std of the perturbation added to identity when drawing the
    /// stand-in pretrained trunk.
    pub pretrained_noise: f64,
    pub head_init_std: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(HarnessError::field("model.depth", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(HarnessError::field("model.channels", "must be at least 1"));
        }
        if self.moe_mask.len() != self.depth {
            return Err(HarnessError::field(
                "model.moe_placement",
                format!(
                    "placement mask has {} entries but model.depth is {}",
                    self.moe_mask.len(),
                    self.depth
                ),
            ));
        }
        if self.moe.in_channels != self.channels || self.moe.out_channels != self.channels {
            return Err(HarnessError::Config(format!(
                "MoE blocks map {}→{} channels, trunk has {}",
                self.moe.in_channels, self.moe.out_channels, self.channels
            )));
        }
        self.moe.validate()?;
        for m in Modality::ALL {
            let n = self.tasks.iter().filter(|t| t.modality == m).count();
            if n != 1 {
                return Err(HarnessError::Config(format!(
                    "modality {m} has {n} task heads, expected exactly one"
                )));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(HarnessError::Config(format!(
                    "task at position {i} has id {}",
                    t.id
                )));
            }
        }
        Ok(())
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.depth).filter(|&i| self.moe_mask[i]).collect()
    }

    pub fn task_for(&self, m: Modality) -> usize {
        self.tasks
            .iter()
            .position(|t| t.modality == m)
            .expect("validated: one task per modality")
    }

    /// The same spec with every MoE block replaced by its linear block.
    pub fn without_moe(&self) -> Self {
        Self {
            moe_mask: vec![false; self.depth],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Linear { weight: Tensor, bias: Tensor },
    Moe(MoeLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<Block>,
    pub heads: Vec<Head>,
}

/// Name and optimizer group of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape, data).expect("shape matches data")
}

impl ModelParams {
    /// Draws a stand-in pretrained trunk (identity plus noise) and expands
    /// masked blocks into duplicated-expert MoE layers. The trunk, gate and
    /// head draws use separate streams, so toggling MoE leaves the trunk and
    /// heads unchanged.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let mut trunk_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10]));
        let mut gate_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[11]));
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[12]));

        let mut blocks = Vec::with_capacity(spec.depth);
        for i in 0..spec.depth {
            let mut weight = normal_tensor(vec![c, c], spec.pretrained_noise, &mut trunk_rng);
            for d in 0..c {
                weight.data_mut()[d * c + d] += 1.0;
            }
            let bias = normal_tensor(vec![c], spec.pretrained_noise, &mut trunk_rng);
            blocks.push(if spec.moe_mask[i] {
                Block::Moe(MoeLayer::from_pretrained(
                    &weight,
                    &bias,
                    spec.moe.clone(),
                    &mut gate_rng,
                )?)
            } else {
                Block::Linear { weight, bias }
            });
        }
        let heads = spec
            .tasks
            .iter()
            .map(|t| Head {
                weight: normal_tensor(vec![t.head_width(), c], spec.head_init_std, &mut head_rng),
                bias: Tensor::vector(vec![0.0; t.head_width()]),
            })
            .collect();
        Ok(Self { blocks, heads })
    }

    /// Parameter names and groups in canonical order.
    pub fn infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, group| out.push(ParamInfo { name, group });
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Linear { .. } => {
                    push(format!("trunk.{i}.weight"), ParamGroup::Backbone);
                    push(format!("trunk.{i}.bias"), ParamGroup::Backbone);
                }
                Block::Moe(layer) => {
                    push(format!("trunk.{i}.gate.transform"), ParamGroup::Backbone);
                    push(format!("trunk.{i}.gate.embeddings"), ParamGroup::Backbone);
                    for n in 0..layer.bank.len() {
                        push(format!("trunk.{i}.expert.{n}.weight"), ParamGroup::Backbone);
                        push(format!("trunk.{i}.expert.{n}.bias"), ParamGroup::Backbone);
                    }
                }
            }
        }
        for t in 0..self.heads.len() {
            push(format!("head.{t}.weight"), ParamGroup::Head(t));
            push(format!("head.{t}.bias"), ParamGroup::Head(t));
        }
        out
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Block::Moe(layer) => out.extend(layer.tensors()),
            }
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            match b {
                Block::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Block::Moe(layer) => out.extend(layer.tensors_mut()),
            }
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Linear { weight, bias } => BoundBlock::Linear {
                    weight: tape.param(weight.clone()),
                    bias: tape.param(bias.clone()),
                },
                Block::Moe(layer) => BoundBlock::Moe(layer.bind(tape)),
            })
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|h| (tape.param(h.weight.clone()), tape.param(h.bias.clone())))
            .collect();
        BoundModel { blocks, heads }
    }
}

#[derive(Debug, Clone)]
pub enum BoundBlock {
    Linear { weight: Var, bias: Var },
    Moe(BoundMoe),
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub blocks: Vec<BoundBlock>,
    pub heads: Vec<(Var, Var)>,
}

impl BoundModel {
    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                BoundBlock::Linear { weight, bias } => {
                    out.push(*weight);
                    out.push(*bias);
                }
                BoundBlock::Moe(m) => out.extend(m.vars()),
            }
        }
        for &(w, b) in &self.heads {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Routing of one sample through one MoE block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRouting {
    pub sample: usize,
    pub modality: Modality,
    pub block: usize,
    pub decisions: Vec<RoutingDecision>,
    pub expert_applications: usize,
}

#[derive(Debug, Clone)]
pub struct ModelForward {
    /// Mean loss over the batch samples of each task, in task order.
    pub task_losses: Vec<Var>,
    pub loss_values: Vec<f64>,
    /// Sum of the task losses.
    pub total: Var,
    pub routing: Vec<BlockRouting>,
}

/// Trunk output (after the final nonlinearity) for one sample.
pub fn trunk_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    bound: &BoundModel,
    image: Var,
    mut on_route: impl FnMut(usize, Vec<RoutingDecision>, usize),
) -> Result<Var> {
    let mut h = image;
    for (i, block) in bound.blocks.iter().enumerate() {
        let pre = match block {
            BoundBlock::Linear { weight, bias } => tape.grid_linear(h, *weight, Some(*bias))?,
            BoundBlock::Moe(layer) => {
                let out = moe_forward(tape, h, layer, &spec.moe)?;
                on_route(i, out.decisions, out.expert_applications);
                out.output
            }
        };
        h = tape.relu(pre)?;
    }
    Ok(h)
}

fn sample_loss(tape: &mut Tape, kind: TaskKind, pred: Var, target: &Target) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    match (kind, target) {
        (TaskKind::Classification { classes }, Target::Classes(labels)) => {
            let cells = labels.len();
            if shape.last() != Some(&classes) || tape.value(pred).rows() != cells {
                return Err(HarnessError::Config(format!(
                    "classification head output {shape:?} does not fit {cells} labels over {classes} classes"
                )));
            }
            let mut onehot = vec![0.0; cells * classes];
            for (cell, &l) in labels.iter().enumerate() {
                onehot[cell * classes + l] = 1.0;
            }
            let onehot = tape.constant(Tensor::new(shape, onehot)?);
            let logp = tape.log_softmax(pred)?;
            let picked = tape.mul(logp, onehot)?;
            let s = tape.sum(picked)?;
            Ok(tape.scale(s, -1.0 / cells as f64)?)
        }
        (TaskKind::OrientedRegression, Target::Oriented(t)) => {
            let t = tape.constant(t.clone());
            let diff = tape.sub(pred, t)?;
            let l = tape.smooth_l1(diff)?;
            Ok(tape.mean(l)?)
        }
        _ => Err(HarnessError::Config(
            "sample target does not match its task".into(),
        )),
    }
}

/// Forwards every sample through the trunk and its modality's head.
pub fn forward_model(
    tape: &mut Tape,
    spec: &ModelSpec,
    bound: &BoundModel,
    batch: &[Sample],
) -> Result<ModelForward> {
    let n_tasks = spec.tasks.len();
    let mut per_task: Vec<Vec<Var>> = vec![Vec::new(); n_tasks];
    let mut routing = Vec::new();
    for (s, sample) in batch.iter().enumerate() {
        let image = tape.constant(sample.image.clone());
        let h = trunk_forward(tape, spec, bound, image, |block, decisions, apps| {
            routing.push(BlockRouting {
                sample: s,
                modality: sample.modality,
                block,
                decisions,
                expert_applications: apps,
            })
        })?;
        let t = spec.task_for(sample.modality);
        let (hw, hb) = bound.heads[t];
        let pred = tape.grid_linear(h, hw, Some(hb))?;
        per_task[t].push(sample_loss(tape, spec.tasks[t].kind, pred, &sample.target)?);
    }

    let mut task_losses = Vec::with_capacity(n_tasks);
    for (t, losses) in per_task.iter().enumerate() {
        let (&first, rest) = losses.split_first().ok_or(HarnessError::EmptyTask(t))?;
        let mut acc = first;
        for &l in rest {
            acc = tape.add(acc, l)?;
        }
        task_losses.push(tape.scale(acc, 1.0 / losses.len() as f64)?);
    }
    let mut total = task_losses[0];
    for &l in &task_losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss_values = task_losses.iter().map(|&v| tape.value(v).item()).collect();
    Ok(ModelForward {
        task_losses,
        loss_values,
        total,
        routing,
    })
}

/// Per-task losses and routing of `batch` under `params`.
pub fn evaluate(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &[Sample],
) -> Result<(Vec<f64>, Vec<BlockRouting>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_model(&mut tape, spec, &bound, batch)?;
    Ok((out.loss_values, out.routing))
}
