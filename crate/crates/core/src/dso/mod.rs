//! Dynamic submodule optimization: a learning-rate governor driven by
//! per-task losses.
//!
//! Each task's loss is smoothed by an exponential moving average. Task heads
//! get a multiplier `λ^t = T · softmax(w / θ)_t` where `w^t = his_L^t /
//! cur_L^t`, so `Σ λ = T`. The shared backbone gets `γ = 2 · sigmoid((C − b)
//! · τ)` where the consistency score `C = 1 − KL(softmax(cur_L) ‖
//! softmax(his_L))` measures whether the current relative losses agree with
//! their history. `γ` lies in `(0, 2)` and equals 1 exactly when `C = b`.

mod log;

pub use log::{DsoLog, DsoLogRow, DSO_LOG_SCHEMA};

use crate::tensor::{sigmoid, softmax};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DsoError {
    #[error("invalid governor configuration: {0}")]
    Config(String),
    #[error("task {task} reported loss {value}; losses must be finite and positive")]
    InvalidLoss { task: usize, value: f64 },
    #[error("expected {expected} task losses, got {got}")]
    TaskCount { expected: usize, got: usize },
    #[error("consistency score needs at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(ParamGroup),
    #[error("base learning rate must be positive, got {0}")]
    BaseLr(f64),
}

pub type Result<T> = std::result::Result<T, DsoError>;

/// Losses below this are clamped when forming convergence ratios.
pub const MIN_LOSS: f64 = 1e-12;
/// Probability floor inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsoConfig {
    /// EMA coefficient applied to the newest loss.
    pub alpha: f64,
    /// Head softmax temperature.
    pub theta: f64,
    /// Backbone sigmoid temperature.
    pub tau: f64,
    /// Consistency score at which the backbone multiplier is 1.
    pub bias_b: f64,
    pub n_tasks: usize,
}

impl DsoConfig {
    pub const DEFAULT_ALPHA: f64 = 0.05;
    pub const DEFAULT_THETA: f64 = 1.0;
    pub const DEFAULT_TAU: f64 = 3.0;
    pub const DEFAULT_BIAS: f64 = 0.4;

    pub fn new(n_tasks: usize) -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            theta: Self::DEFAULT_THETA,
            tau: Self::DEFAULT_TAU,
            bias_b: Self::DEFAULT_BIAS,
            n_tasks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DsoError::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(DsoError::Config(format!(
                "theta must be positive, got {}",
                self.theta
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(DsoError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !self.bias_b.is_finite() {
            return Err(DsoError::Config("bias_b must be finite".into()));
        }
        if self.n_tasks == 0 {
            return Err(DsoError::Config("n_tasks must be at least 1".into()));
        }
        Ok(())
    }
}

/// Current and smoothed historical loss per task.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTracker {
    pub cur: Vec<f64>,
    pub his: Vec<f64>,
    /// Number of accepted updates.
    pub iteration: u64,
}

impl LossTracker {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            cur: vec![0.0; n_tasks],
            his: vec![0.0; n_tasks],
            iteration: 0,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.cur.len()
    }

    /// `his ← α·cur + (1−α)·his` with the new losses as `cur`; the first
    /// accepted update initializes `his` to the losses themselves.
    ///
    /// Rejected input leaves the tracker untouched.
    pub fn update_ema(&mut self, losses: &[f64], alpha: f64) -> Result<()> {
        if losses.len() != self.n_tasks() {
            return Err(DsoError::TaskCount {
                expected: self.n_tasks(),
                got: losses.len(),
            });
        }
        if let Some((task, &value)) = losses
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v <= 0.0)
        {
            return Err(DsoError::InvalidLoss { task, value });
        }
        self.cur.copy_from_slice(losses);
        if self.iteration == 0 {
            self.his.copy_from_slice(losses);
        } else {
            for (h, &c) in self.his.iter_mut().zip(losses) {
                *h = alpha * c + (1.0 - alpha) * *h;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsoWarning {
    /// A task's current loss was at or below [`MIN_LOSS`] and was clamped.
    ClampedLoss { task: usize },
}

/// Head multipliers together with the convergence ratios behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMultipliers {
    pub ratios: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub warnings: Vec<DsoWarning>,
}

pub fn head_multipliers(tracker: &LossTracker, cfg: &DsoConfig) -> Result<HeadMultipliers> {
    cfg.validate()?;
    let t = tracker.n_tasks();
    let mut warnings = Vec::new();
    let ratios: Vec<f64> = tracker
        .his
        .iter()
        .zip(&tracker.cur)
        .enumerate()
        .map(|(task, (&his, &cur))| {
            let cur = if cur <= MIN_LOSS {
                warnings.push(DsoWarning::ClampedLoss { task });
                MIN_LOSS
            } else {
                cur
            };
            his / cur
        })
        .collect();
    let probs = softmax(&ratios, cfg.theta).map_err(|e| DsoError::Config(e.to_string()))?;
    let lambdas = probs.iter().map(|p| t as f64 * p).collect();
    Ok(HeadMultipliers {
        ratios,
        lambdas,
        warnings,
    })
}

/// `1 − KL(softmax(cur) ‖ softmax(his))`, at most 1.
pub fn consistency_score(tracker: &LossTracker) -> Result<f64> {
    let t = tracker.n_tasks();
    if t < 2 {
        return Err(DsoError::TooFewTasks(t));
    }
    let p = softmax(&tracker.cur, 1.0).map_err(|e| DsoError::Config(e.to_string()))?;
    let q = softmax(&tracker.his, 1.0).map_err(|e| DsoError::Config(e.to_string()))?;
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi.max(KL_FLOOR) / qi.max(KL_FLOOR)).ln())
        .sum();
    // rounding can leave a tiny negative divergence for equal distributions
    Ok(1.0 - kl.max(0.0))
}

/// `2 · sigmoid((C − b) · τ)`.
pub fn backbone_multiplier(consistency: f64, cfg: &DsoConfig) -> f64 {
    2.0 * sigmoid((consistency - cfg.bias_b) * cfg.tau)
}

/// Learning-rate multipliers for one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LrMultipliers {
    pub head_lambdas: Vec<f64>,
    pub backbone_gamma: f64,
    pub consistency: f64,
}

impl LrMultipliers {
    /// All multipliers 1: the governor has no effect.
    pub fn identity(n_tasks: usize) -> Self {
        Self {
            head_lambdas: vec![1.0; n_tasks],
            backbone_gamma: 1.0,
            consistency: 1.0,
        }
    }
}

/// Parameter groups that receive distinct learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Parameters private to task head `t`.
    Head(usize),
    /// Shared parameters, including MoE gates and experts.
    Backbone,
}

pub fn apply_multipliers(base_lr: f64, group: ParamGroup, m: &LrMultipliers) -> Result<f64> {
    if !(base_lr > 0.0) || !base_lr.is_finite() {
        return Err(DsoError::BaseLr(base_lr));
    }
    match group {
        ParamGroup::Head(t) => m
            .head_lambdas
            .get(t)
            .map(|l| base_lr * l)
            .ok_or(DsoError::UnknownGroup(group)),
        ParamGroup::Backbone => Ok(base_lr * m.backbone_gamma),
    }
}

/// Result of one governor step, including the ratios used for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub multipliers: LrMultipliers,
    pub ratios: Vec<f64>,
    pub warnings: Vec<DsoWarning>,
}

/// EMA update, head multipliers, consistency score (on the updated history)
/// and backbone multiplier, in that order.
pub fn step(tracker: &mut LossTracker, losses: &[f64], cfg: &DsoConfig) -> Result<StepOutput> {
    cfg.validate()?;
    tracker.update_ema(losses, cfg.alpha)?;
    let heads = head_multipliers(tracker, cfg)?;
    let consistency = consistency_score(tracker)?;
    let gamma = backbone_multiplier(consistency, cfg);
    Ok(StepOutput {
        multipliers: LrMultipliers {
            head_lambdas: heads.lambdas,
            backbone_gamma: gamma,
            consistency,
        },
        ratios: heads.ratios,
        warnings: heads.warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepStatus {
    Updated,
    /// Input was rejected; the previous multipliers were returned.
    Skipped(DsoError),
}

/// Stateful governor for a training loop. Invalid loss vectors are skipped
/// and the previous multipliers reused.
#[derive(Debug, Clone)]
pub struct DsoGovernor {
    cfg: DsoConfig,
    tracker: LossTracker,
    last: StepOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GovernorReport {
    pub output: StepOutput,
    pub status: StepStatus,
}

impl DsoGovernor {
    pub fn new(cfg: DsoConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.n_tasks < 2 {
            return Err(DsoError::TooFewTasks(cfg.n_tasks));
        }
        let n = cfg.n_tasks;
        Ok(Self {
            cfg,
            tracker: LossTracker::new(n),
            last: StepOutput {
                multipliers: LrMultipliers::identity(n),
                ratios: vec![1.0; n],
                warnings: Vec::new(),
            },
        })
    }

    pub fn config(&self) -> &DsoConfig {
        &self.cfg
    }

    pub fn tracker(&self) -> &LossTracker {
        &self.tracker
    }

    pub fn step(&mut self, losses: &[f64]) -> GovernorReport {
        let mut candidate = self.tracker.clone();
        match step(&mut candidate, losses, &self.cfg) {
            Ok(out) => {
                self.tracker = candidate;
                self.last = out.clone();
                GovernorReport {
                    output: out,
                    status: StepStatus::Updated,
                }
            }
            Err(e) => GovernorReport {
                output: self.last.clone(),
                status: StepStatus::Skipped(e),
            },
        }
    }
}
