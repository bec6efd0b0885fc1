use super::checkpoint;
use super::config::RunConfig;
use super::data::{generate_sample, stream, Modality, ModalitySpec, Sample};
use super::model::{evaluate, forward_model, BlockRouting, ModelParams, ModelSpec};
use super::sampler::BatchStream;
use super::{HarnessError, Result};
use crate::dso::{apply_multipliers, DsoGovernor, DsoLog, DsoLogRow, LrMultipliers, StepStatus};
use crate::moe::{export_top1_map, write_top1_csv, ExpertStats};
use crate::tensor::Tape;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LOSSES_SCHEMA: &str = "# gridmoe losses v1";
pub const METRICS_SCHEMA: &str = "# gridmoe metrics v1";

/// Iterations included in the diagnostic dump of an aborted run.
pub const DUMP_ITERATIONS: usize = 10;

/// Losses and routing statistics on the fixed evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub losses: Vec<f64>,
    pub stats: ExpertStats,
    /// Mean over MoE blocks of the participation-mass entropy, per modality;
    /// `None` without MoE blocks.
    pub entropy: Vec<Option<f64>>,
    pub routing: Vec<BlockRouting>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub params: ModelParams,
    /// Per-iteration task losses.
    pub losses: Vec<Vec<f64>>,
    pub dso_log: DsoLog,
    /// Routing over all training batches.
    pub train_stats: ExpertStats,
    pub eval_initial: EvalSummary,
    pub eval_final: EvalSummary,
    /// Range of the governor's backbone multiplier over the run, whether or
    /// not it was applied. NaN for a run without iterations.
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Expert evaluations summed over every MoE block pass.
    pub expert_applications: u64,
    pub moe_block_passes: u64,
}

impl TrainOutcome {
    /// Final over initial evaluation loss, per task.
    pub fn normalized_losses(&self) -> Vec<f64> {
        self.eval_final
            .losses
            .iter()
            .zip(&self.eval_initial.losses)
            .map(|(f, i)| f / i)
            .collect()
    }

    /// Population standard deviation of [`Self::normalized_losses`].
    pub fn normalized_spread(&self) -> f64 {
        std_dev(&self.normalized_losses())
    }
}

pub fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Evaluation samples: `n` per modality, modality-major.
pub fn eval_set(specs: &[ModalitySpec], seed: u64, n: usize) -> Vec<Sample> {
    specs
        .iter()
        .flat_map(|s| (0..n as u64).map(move |i| generate_sample(s, seed, stream::EVAL, i)))
        .collect()
}

fn routing_stats(spec: &ModelSpec, routing: &[BlockRouting]) -> Result<ExpertStats> {
    let mut stats = ExpertStats::new(spec.moe.n_experts, spec.moe_blocks());
    for r in routing {
        stats.accumulate(r.modality.tag(), r.block, &r.decisions)?;
    }
    Ok(stats)
}

pub fn summarize(
    params: &ModelParams,
    spec: &ModelSpec,
    samples: &[Sample],
) -> Result<EvalSummary> {
    let (losses, routing) = evaluate(params, spec, samples)?;
    let stats = routing_stats(spec, &routing)?;
    let entropy = Modality::ALL
        .iter()
        .map(|m| stats.mean_mass_entropy(m.tag()))
        .collect();
    Ok(EvalSummary {
        losses,
        stats,
        entropy,
        routing,
    })
}

fn loss_header(n_tasks: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string()];
    h.extend((0..n_tasks).map(|t| format!("loss_{t}")));
    h.push("total".into());
    h
}

fn write_losses<W: Write>(mut out: W, rows: &[Vec<f64>], first_iteration: usize) -> Result<()> {
    writeln!(out, "{LOSSES_SCHEMA}")?;
    let n_tasks = rows.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(loss_header(n_tasks))?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![(first_iteration + i).to_string()];
        rec.extend(row.iter().map(f64::to_string));
        rec.push(row.iter().sum::<f64>().to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn abort_dump(losses: &[Vec<f64>], log: &DsoLog) -> String {
    let start = losses.len().saturating_sub(DUMP_ITERATIONS);
    let mut buf = Vec::new();
    let _ = write_losses(&mut buf, &losses[start..], start);
    let _ = log.write_tail(&mut buf, DUMP_ITERATIONS);
    String::from_utf8_lossy(&buf).into_owned()
}

/// Runs the full loop: sample a batch, forward, per-task losses, governor
/// step, per-group learning rates, SGD update.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let spec = cfg.model_spec()?;
    let params = ModelParams::init(&spec, cfg.run.seed)?;
    train_from(cfg, params)
}

/// [`train`] starting from the given parameters.
pub fn train_from(cfg: &RunConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let specs = cfg.modality_specs()?;
    let eval = eval_set(&specs, cfg.run.seed, cfg.data.eval_samples);
    let eval_initial = summarize(&params, &spec, &eval)?;

    let dso_cfg = cfg.dso_config();
    let n_tasks = dso_cfg.n_tasks;
    let mut governor = DsoGovernor::new(dso_cfg)?;
    let mut batches = BatchStream::new(cfg.sampler_config(), specs, cfg.run.seed)?;
    let infos = params.infos();
    let base_lr = cfg.run.base_lr;

    let mut losses: Vec<Vec<f64>> = Vec::with_capacity(cfg.run.iterations as usize);
    let mut dso_log = DsoLog::new(n_tasks);
    let mut train_stats = ExpertStats::new(spec.moe.n_experts, spec.moe_blocks());
    let (mut gamma_min, mut gamma_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut expert_applications = 0u64;
    let mut moe_block_passes = 0u64;

    for iteration in 0..cfg.run.iterations {
        let batch = batches.next_batch()?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let fwd = forward_model(&mut tape, &spec, &bound, &batch)?;

        if let Some((task, &value)) = fwd
            .loss_values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            losses.push(fwd.loss_values.clone());
            return Err(HarnessError::NonFiniteLoss {
                iteration,
                task,
                value,
                dump: abort_dump(&losses, &dso_log),
            });
        }

        let report = governor.step(&fwd.loss_values);
        let multipliers = if cfg.dso.enabled {
            report.output.multipliers.clone()
        } else {
            LrMultipliers::identity(n_tasks)
        };
        let gamma = report.output.multipliers.backbone_gamma;
        gamma_min = gamma_min.min(gamma);
        gamma_max = gamma_max.max(gamma);

        let lrs = infos
            .iter()
            .map(|info| apply_multipliers(base_lr, info.group, &multipliers))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let tracker = governor.tracker();
        dso_log.push(DsoLogRow {
            iteration,
            cur: tracker.cur.clone(),
            his: tracker.his.clone(),
            ratios: report.output.ratios.clone(),
            lambdas: report.output.multipliers.head_lambdas.clone(),
            consistency: report.output.multipliers.consistency,
            gamma: report.output.multipliers.backbone_gamma,
            lr_heads: (0..n_tasks)
                .map(|t| apply_multipliers(base_lr, crate::dso::ParamGroup::Head(t), &multipliers))
                .collect::<std::result::Result<_, _>>()?,
            lr_backbone: apply_multipliers(
                base_lr,
                crate::dso::ParamGroup::Backbone,
                &multipliers,
            )?,
            skipped: matches!(report.status, StepStatus::Skipped(_)),
        });
        losses.push(fwd.loss_values.clone());

        for r in &fwd.routing {
            train_stats.accumulate(r.modality.tag(), r.block, &r.decisions)?;
            expert_applications += r.expert_applications as u64;
            moe_block_passes += 1;
        }

        tape.backward(fwd.total)?;
        for ((var, lr), tensor) in bound.vars().into_iter().zip(&lrs).zip(params.tensors_mut()) {
            if let Some(g) = tape.grad(var) {
                for (p, g) in tensor.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * g;
                }
            }
        }
    }

    let eval_final = summarize(&params, &spec, &eval)?;
    if cfg.run.iterations == 0 {
        gamma_min = f64::NAN;
        gamma_max = f64::NAN;
    }
    Ok(TrainOutcome {
        config: cfg.clone(),
        spec,
        params,
        losses,
        dso_log,
        train_stats,
        eval_initial,
        eval_final,
        gamma_min,
        gamma_max,
        expert_applications,
        moe_block_passes,
    })
}

impl TrainOutcome {
    pub fn write_losses<W: Write>(&self, out: W) -> Result<()> {
        write_losses(out, &self.losses, 0)
    }

    /// Long-format `metric,value` summary.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = Vec::new();
        for (t, v) in self.eval_initial.losses.iter().enumerate() {
            m.push((format!("initial_eval_loss_{t}"), *v));
        }
        for (t, v) in self.eval_final.losses.iter().enumerate() {
            m.push((format!("final_eval_loss_{t}"), *v));
        }
        for (t, v) in self.normalized_losses().iter().enumerate() {
            m.push((format!("normalized_loss_{t}"), *v));
        }
        m.push(("normalized_loss_std".into(), self.normalized_spread()));
        for (label, summary) in [("initial", &self.eval_initial), ("final", &self.eval_final)] {
            for (mod_, e) in Modality::ALL.iter().zip(&summary.entropy) {
                m.push((format!("{label}_entropy_{mod_}"), e.unwrap_or(f64::NAN)));
            }
        }
        m.push(("gamma_min".into(), self.gamma_min));
        m.push(("gamma_max".into(), self.gamma_max));
        m.push(("iterations".into(), self.losses.len() as f64));
        m.push((
            "expert_applications".into(),
            self.expert_applications as f64,
        ));
        m.push(("moe_block_passes".into(), self.moe_block_passes as f64));
        m
    }

    pub fn write_metrics<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{METRICS_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        for (k, v) in self.metrics() {
            w.write_record([k, v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Top-1 maps of the first evaluation sample of each modality at every
    /// MoE block, after training.
    pub fn top1_maps(&self) -> Result<Vec<(Modality, usize, Vec<Vec<usize>>)>> {
        let (h, w) = (self.config.data.height, self.config.data.width);
        let mut seen = std::collections::BTreeSet::new();
        let mut maps = Vec::new();
        for r in &self.eval_final.routing {
            if seen.insert((r.modality, r.block)) {
                maps.push((r.modality, r.block, export_top1_map(&r.decisions, h, w)?));
            }
        }
        Ok(maps)
    }

    /// Writes every artifact into `dir` (created if needed) and returns the
    /// written paths.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let file = |name: &str| -> Result<(PathBuf, std::io::BufWriter<fs::File>)> {
            let p = dir.join(name);
            let f = fs::File::create(&p)?;
            Ok((p, std::io::BufWriter::new(f)))
        };

        let (p, f) = file("losses.csv")?;
        self.write_losses(f)?;
        written.push(p);
        let (p, f) = file("dso_log.csv")?;
        self.dso_log.write_csv(f)?;
        written.push(p);
        let (p, f) = file("expert_stats.csv")?;
        self.train_stats.write_csv(f)?;
        written.push(p);
        let (p, f) = file("metrics.csv")?;
        self.write_metrics(f)?;
        written.push(p);
        let (p, mut f) = file("config.toml")?;
        f.write_all(self.config.to_toml_string().as_bytes())?;
        f.flush()?;
        written.push(p);

        let maps_dir = dir.join("top1_maps");
        fs::create_dir_all(&maps_dir)?;
        for (m, block, map) in self.top1_maps()? {
            let p = maps_dir.join(format!("{m}_block{block}.csv"));
            write_top1_csv(&map, std::io::BufWriter::new(fs::File::create(&p)?))?;
            written.push(p);
        }

        let ckpt = dir.join("checkpoint.bin");
        checkpoint::save(&self.params, &ckpt, Some(&self.config.to_toml_string()))?;
        written.push(checkpoint::sidecar_path(&ckpt));
        written.push(ckpt);
        Ok(written)
    }
}
