//! Commands behind the `gridmoe` binary.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including refused
//! output overwrites and checkpoint/config mismatches), 3 when a run aborts.

pub mod manifest;

use gridmoe::harness::checkpoint;
use gridmoe::harness::config::parse_table;
use gridmoe::harness::data::{generate_sample, stream};
use gridmoe::harness::model::trunk_forward;
use gridmoe::harness::sweep::{ablation_sweep_with, parse_grid, write_sweep_csv};
use gridmoe::harness::{train, HarnessError, Modality, ModelParams, RunConfig, TrainOutcome};
use gridmoe::moe::{export_top1_map, write_top1_csv, ExpertStats};
use gridmoe::tensor::Tape;
use manifest::{hash_text, RunManifest, CONFIG_SNAPSHOT};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const OUT_ENV: &str = "GRIDMOE_OUT";
pub const ABORT_DUMP: &str = "abort_dump.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("output directory {0} already exists; pass --force to overwrite")]
    OutputExists(PathBuf),
    #[error("run aborted: {message}{}", dump.as_ref().map(|p| format!(" (diagnostics in {})", p.display())).unwrap_or_default())]
    Runtime {
        message: String,
        dump: Option<PathBuf>,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::OutputExists(_) => 2,
            CliError::Runtime { .. } | CliError::Io { .. } => 3,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime {
                message: e.to_string(),
                dump: None,
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Output directory precedence: flag, config `run.out_dir`, `$GRIDMOE_OUT/<name>`,
/// then `runs/<name>`.
pub fn resolve_out_dir(
    flag: Option<&Path>,
    config_out: Option<&str>,
    env_root: Option<&str>,
    name: &str,
) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = config_out {
        return PathBuf::from(p);
    }
    match env_root {
        Some(root) if !root.is_empty() => Path::new(root).join(name),
        _ => Path::new("runs").join(name),
    }
}

fn env_root() -> Option<String> {
    std::env::var(OUT_ENV).ok()
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(CliError::io(format!("reading {}", dir.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_toml_str(&read_config_text(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn relative(paths: &[PathBuf], root: &Path) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string())
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_dso: bool,
    pub no_moe: bool,
    pub force: bool,
}

#[derive(Debug)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
}

/// Applies the command-line switches on top of a loaded config.
pub fn apply_train_flags(cfg: &mut RunConfig, args: &TrainArgs) {
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if args.no_dso {
        cfg.dso.enabled = false;
    }
    if args.no_moe {
        cfg.moe.enabled = false;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let mut cfg = load_config(&args.config)?;
    apply_train_flags(&mut cfg, args);
    let out = resolve_out_dir(
        args.out.as_deref(),
        cfg.run.out_dir.as_deref(),
        env_root().as_deref(),
        &cfg.run.name,
    );
    prepare_out_dir(&out, args.force)?;
    let snapshot = cfg.to_toml_string();
    fs::write(out.join(CONFIG_SNAPSHOT), &snapshot)
        .map_err(CliError::io("writing config snapshot"))?;
    let mut manifest = RunManifest {
        command: "train".into(),
        config_path: args.config.display().to_string(),
        config_hash: hash_text(&snapshot),
        seed: cfg.run.seed,
        started_at: now(),
        finished_at: String::new(),
        artifacts: Vec::new(),
        exit_status: 0,
    };

    let outcome = match train(&cfg) {
        Ok(o) => o,
        Err(e) => return Err(record_failure(e, &out, &mut manifest)),
    };
    let written = outcome
        .write_artifacts(&out)
        .map_err(|e| record_failure(e, &out, &mut manifest))?;
    manifest.artifacts = relative(&written, &out);
    manifest.finished_at = now();
    manifest
        .write(&out)
        .map_err(CliError::io("writing manifest"))?;
    Ok(TrainReport {
        out_dir: out,
        manifest,
        outcome,
    })
}

/// Writes the diagnostic dump (if any) and a failed manifest.
fn record_failure(e: HarnessError, out: &Path, manifest: &mut RunManifest) -> CliError {
    let err = match e {
        HarnessError::NonFiniteLoss {
            iteration,
            task,
            value,
            dump,
        } => {
            let path = out.join(ABORT_DUMP);
            let written = fs::write(&path, dump).is_ok();
            if written {
                manifest.artifacts.push(ABORT_DUMP.into());
            }
            CliError::Runtime {
                message: format!(
                    "non-finite loss {value} for task {task} at iteration {iteration}"
                ),
                dump: written.then_some(path),
            }
        }
        other => CliError::from(other),
    };
    manifest.exit_status = err.exit_code();
    manifest.finished_at = now();
    let _ = manifest.write(out);
    err
}

#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub config: PathBuf,
    pub grid: String,
    pub out: Option<PathBuf>,
    pub force: bool,
}

#[derive(Debug)]
pub struct SweepReport {
    pub out_dir: PathBuf,
    pub cells: usize,
    pub csv: PathBuf,
}

/// Cell artifacts go to `<out>/cell_NNN/`, the table to `<out>/sweep.csv`.
pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepReport> {
    let text = read_config_text(&args.config)?;
    let base = parse_table(&text)?;
    let base_cfg = RunConfig::from_table(&base)?;
    let axes = parse_grid(&args.grid)?;
    let name = format!("{}_sweep", base_cfg.run.name);
    let out = resolve_out_dir(
        args.out.as_deref(),
        base_cfg.run.out_dir.as_deref(),
        env_root().as_deref(),
        &name,
    );
    prepare_out_dir(&out, args.force)?;
    let snapshot = base_cfg.to_toml_string();
    fs::write(out.join(CONFIG_SNAPSHOT), &snapshot)
        .map_err(CliError::io("writing config snapshot"))?;
    let mut manifest = RunManifest {
        command: format!("sweep {}", args.grid),
        config_path: args.config.display().to_string(),
        config_hash: hash_text(&snapshot),
        seed: base_cfg.run.seed,
        started_at: now(),
        finished_at: String::new(),
        artifacts: vec![CONFIG_SNAPSHOT.into()],
        exit_status: 0,
    };

    let mut artifacts = Vec::new();
    let rows = ablation_sweep_with(&base, &axes, |i, _, outcome| {
        let dir = out.join(format!("cell_{i:03}"));
        artifacts.extend(outcome.write_artifacts(&dir)?);
        Ok(())
    })
    .map_err(|e| record_failure(e, &out, &mut manifest))?;

    let csv = out.join("sweep.csv");
    let file = fs::File::create(&csv).map_err(CliError::io("creating sweep.csv"))?;
    write_sweep_csv(&rows, BufWriter::new(file))?;
    artifacts.push(csv.clone());
    manifest.artifacts.extend(relative(&artifacts, &out));
    manifest.finished_at = now();
    manifest
        .write(&out)
        .map_err(CliError::io("writing manifest"))?;
    Ok(SweepReport {
        out_dir: out,
        cells: rows.len(),
        csv,
    })
}

#[derive(Debug, Clone, Default)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the config stored alongside the checkpoint.
    pub config: Option<PathBuf>,
    pub modality: String,
    pub n: usize,
    pub out: Option<PathBuf>,
    pub force: bool,
}

#[derive(Debug)]
pub struct InspectReport {
    pub out_dir: PathBuf,
    pub modality: Modality,
    pub stats: ExpertStats,
    pub moe_blocks: Vec<usize>,
    pub positions_per_sample: usize,
}

impl InspectReport {
    /// Per-layer participation table: layer, expert, mass, top-1 count and
    /// top-1 share.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "modality {}: {} MoE layer(s), {} experts\nlayer,expert,participation_mass,top1_count,top1_share\n",
            self.modality,
            self.moe_blocks.len(),
            self.stats.n_experts()
        );
        for &layer in &self.moe_blocks {
            let part = self.stats.get(self.modality.tag(), layer);
            for e in 0..self.stats.n_experts() {
                let (mass, top1, positions) =
                    part.map_or((0.0, 0, 0), |p| (p.mass[e], p.top1[e], p.positions));
                let share = if positions == 0 {
                    0.0
                } else {
                    top1 as f64 / positions as f64
                };
                s.push_str(&format!("{layer},{e},{mass},{top1},{share}\n"));
            }
        }
        s
    }
}

pub fn cmd_inspect_gates(args: &InspectArgs) -> Result<InspectReport> {
    let modality: Modality = args.modality.parse().map_err(CliError::Config)?;
    let cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => {
            let m = checkpoint::read_manifest(&args.checkpoint).map_err(|e| {
                CliError::Config(format!(
                    "cannot read checkpoint {}: {e}",
                    args.checkpoint.display()
                ))
            })?;
            let text = m.config.ok_or_else(|| {
                CliError::Config("checkpoint carries no config; pass --config".into())
            })?;
            RunConfig::from_toml_str(&text)?
        }
    };
    let spec = cfg.model_spec()?;
    let mut params = ModelParams::init(&spec, cfg.run.seed)?;
    checkpoint::load_into(&args.checkpoint, &mut params).map_err(|e| match e {
        HarnessError::ShapeMismatch(_) => CliError::Config(e.to_string()),
        HarnessError::Io(io) => CliError::Config(format!(
            "cannot read checkpoint {}: {io}",
            args.checkpoint.display()
        )),
        other => CliError::from(other),
    })?;

    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("inspect_{modality}"))
    });
    prepare_out_dir(&out, args.force)?;
    let maps_dir = out.join("top1_maps");
    fs::create_dir_all(&maps_dir).map_err(CliError::io("creating top1_maps"))?;

    let mspec = &cfg.modality_specs()?[modality.index()];
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut stats = ExpertStats::new(spec.moe.n_experts, spec.moe_blocks());
    for i in 0..args.n {
        let sample = generate_sample(mspec, cfg.run.seed, stream::INSPECT, i as u64);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(sample.image);
        let mut routed = Vec::new();
        trunk_forward(&mut tape, &spec, &bound, x, |block, decisions, _| {
            routed.push((block, decisions))
        })?;
        for (block, decisions) in routed {
            stats
                .accumulate(modality.tag(), block, &decisions)
                .map_err(HarnessError::from)?;
            let map = export_top1_map(&decisions, h, w).map_err(HarnessError::from)?;
            let path = maps_dir.join(format!("{modality}_sample{i}_block{block}.csv"));
            let f = fs::File::create(&path).map_err(CliError::io("writing top-1 map"))?;
            write_top1_csv(&map, BufWriter::new(f)).map_err(HarnessError::from)?;
        }
    }
    let f = fs::File::create(out.join("expert_stats.csv"))
        .map_err(CliError::io("writing expert_stats.csv"))?;
    stats
        .write_csv(BufWriter::new(f))
        .map_err(HarnessError::from)?;
    let report = InspectReport {
        out_dir: out,
        modality,
        stats,
        moe_blocks: spec.moe_blocks(),
        positions_per_sample: h * w,
    };
    let mut summary = fs::File::create(report.out_dir.join("participation.csv"))
        .map_err(CliError::io("writing participation.csv"))?;
    summary
        .write_all(report.summary().as_bytes())
        .map_err(CliError::io("writing participation.csv"))?;
    Ok(report)
}

/// Parses and validates a config, returning a one-line description.
pub fn cmd_validate(config: &Path) -> Result<String> {
    let cfg = load_config(config)?;
    let spec = cfg.model_spec()?;
    Ok(format!(
        "ok: depth {} × {} channels, MoE blocks {:?} (N={}, k={}), DSO {}, {} iterations, seed {}",
        spec.depth,
        spec.channels,
        spec.moe_blocks(),
        cfg.moe.n_experts,
        cfg.moe.top_k,
        if cfg.dso.enabled { "on" } else { "off" },
        cfg.run.iterations,
        cfg.run.seed
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_precedence() {
        let flag = Path::new("/a");
        assert_eq!(
            resolve_out_dir(Some(flag), Some("/b"), Some("/c"), "n"),
            flag
        );
        assert_eq!(
            resolve_out_dir(None, Some("/b"), Some("/c"), "n"),
            Path::new("/b")
        );
        assert_eq!(
            resolve_out_dir(None, None, Some("/c"), "n"),
            Path::new("/c/n")
        );
        assert_eq!(
            resolve_out_dir(None, None, Some(""), "n"),
            Path::new("runs/n")
        );
        assert_eq!(resolve_out_dir(None, None, None, "n"), Path::new("runs/n"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::OutputExists("x".into()).exit_code(), 2);
        let rt = CliError::Runtime {
            message: "m".into(),
            dump: None,
        };
        assert_eq!(rt.exit_code(), 3);
    }

    #[test]
    fn occupied_directory_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        prepare_out_dir(dir.path(), false).unwrap();
        fs::write(dir.path().join("f"), "x").unwrap();
        assert!(matches!(
            prepare_out_dir(dir.path(), false),
            Err(CliError::OutputExists(_))
        ));
        prepare_out_dir(dir.path(), true).unwrap();
    }
}
