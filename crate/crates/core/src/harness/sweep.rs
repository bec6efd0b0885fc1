//! Cross-product ablation sweeps over config overrides.

use super::config::{parse_value, set_key, RunConfig};
use super::train::{train, TrainOutcome};
use super::{HarnessError, Result};
use std::io::Write;

pub const SWEEP_SCHEMA: &str = "# gridmoe sweep v1";

/// One swept key with its candidate values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `"key=v1,v2 key2=v3"`; axes are whitespace separated.
pub fn parse_grid(spec: &str) -> Result<Vec<SweepAxis>> {
    let mut axes: Vec<SweepAxis> = Vec::new();
    for token in spec.split_whitespace() {
        let (key, vals) = token
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("grid entry {token:?} lacks '='")))?;
        let values: Vec<String> = vals
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(HarnessError::Config(format!(
                "grid entry {token:?} is empty"
            )));
        }
        if axes.iter().any(|a| a.key == key) {
            return Err(HarnessError::Config(format!("grid key {key} given twice")));
        }
        axes.push(SweepAxis {
            key: key.to_string(),
            values,
        });
    }
    if axes.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    Ok(axes)
}

/// Every combination of axis values; the first axis varies slowest.
pub fn cells(axes: &[SweepAxis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

/// Resolved configuration of one cell.
pub fn cell_config(base: &toml::Table, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = base.clone();
    for (k, v) in overrides {
        set_key(&mut table, k, parse_value(v))?;
    }
    RunConfig::from_table(&table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub overrides: Vec<(String, String)>,
    pub config: RunConfig,
    pub final_losses: Vec<f64>,
    pub normalized: Vec<f64>,
    pub normalized_std: f64,
    pub final_entropy: Vec<Option<f64>>,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl SweepRow {
    pub fn from_outcome(cell: usize, overrides: Vec<(String, String)>, o: &TrainOutcome) -> Self {
        Self {
            cell,
            overrides,
            config: o.config.clone(),
            final_losses: o.eval_final.losses.clone(),
            normalized: o.normalized_losses(),
            normalized_std: o.normalized_spread(),
            final_entropy: o.eval_final.entropy.clone(),
            gamma_min: o.gamma_min,
            gamma_max: o.gamma_max,
        }
    }
}

/// Trains every cell in order, handing each outcome to `on_cell` before
/// moving on.
pub fn ablation_sweep_with(
    base: &toml::Table,
    axes: &[SweepAxis],
    mut on_cell: impl FnMut(usize, &[(String, String)], &TrainOutcome) -> Result<()>,
) -> Result<Vec<SweepRow>> {
    if axes.is_empty() {
        return Err(HarnessError::Config("sweep grid is empty".into()));
    }
    let all = cells(axes);
    // resolve every cell first so a bad value fails before any training
    let configs = all
        .iter()
        .map(|o| cell_config(base, o))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(all.len());
    for (i, (overrides, cfg)) in all.into_iter().zip(configs).enumerate() {
        let outcome = train(&cfg)?;
        on_cell(i, &overrides, &outcome)?;
        rows.push(SweepRow::from_outcome(i, overrides, &outcome));
    }
    Ok(rows)
}

pub fn ablation_sweep(base: &toml::Table, axes: &[SweepAxis]) -> Result<Vec<SweepRow>> {
    ablation_sweep_with(base, axes, |_, _, _| Ok(()))
}

/// Writes config columns (swept keys first) followed by final metrics.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    let swept: Vec<String> = rows
        .first()
        .map(|r| r.overrides.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let n_tasks = rows.first().map_or(0, |r| r.final_losses.len());
    let mut header = vec!["cell".to_string()];
    header.extend(swept.iter().cloned());
    header.extend(
        [
            "seed",
            "n_experts",
            "top_k",
            "gate_temperature",
            "moe_placement",
            "moe_enabled",
            "dso_enabled",
            "tau",
            "bias_b",
        ]
        .map(String::from),
    );
    header.extend((0..n_tasks).map(|t| format!("final_loss_{t}")));
    header.extend((0..n_tasks).map(|t| format!("normalized_loss_{t}")));
    header.push("normalized_loss_std".into());
    header.extend(["A", "B", "C"].map(|m| format!("final_entropy_{m}")));
    header.push("gamma_min".into());
    header.push("gamma_max".into());
    w.write_record(&header)?;

    for r in rows {
        let c = &r.config;
        let mut rec = vec![r.cell.to_string()];
        rec.extend(r.overrides.iter().map(|(_, v)| v.clone()));
        rec.push(c.run.seed.to_string());
        rec.push(c.moe.n_experts.to_string());
        rec.push(c.moe.top_k.to_string());
        rec.push(c.moe.gate_temperature.to_string());
        rec.push(c.model.moe_placement.clone());
        rec.push(c.moe.enabled.to_string());
        rec.push(c.dso.enabled.to_string());
        rec.push(c.dso.tau.to_string());
        rec.push(c.dso.bias_b.to_string());
        rec.extend(r.final_losses.iter().map(f64::to_string));
        rec.extend(r.normalized.iter().map(f64::to_string));
        rec.push(r.normalized_std.to_string());
        rec.extend(
            r.final_entropy
                .iter()
                .map(|e| e.map_or_else(String::new, |v| v.to_string())),
        );
        rec.push(r.gamma_min.to_string());
        rec.push(r.gamma_max.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_expansion() {
        let axes = parse_grid("dso.tau=2,3,4 dso.bias_b=0.4").unwrap();
        assert_eq!(axes.len(), 2);
        let c = cells(&axes);
        assert_eq!(c.len(), 3);
        assert_eq!(
            c[1],
            vec![
                ("dso.tau".into(), "3".into()),
                ("dso.bias_b".into(), "0.4".into())
            ]
        );

        let nine = cells(&parse_grid("moe.n_experts=2,4,8 run.seed=0,1,2").unwrap());
        assert_eq!(nine.len(), 9);
        assert_eq!(nine[3][0].1, "4");
        assert_eq!(nine[3][1].1, "0");
    }

    #[test]
    fn empty_or_malformed_grids_rejected() {
        assert!(parse_grid("").is_err());
        assert!(parse_grid("   ").is_err());
        assert!(parse_grid("moe.n_experts").is_err());
        assert!(parse_grid("moe.n_experts=").is_err());
        assert!(parse_grid("a.b=1 a.b=2").is_err());
    }

    #[test]
    fn cell_config_applies_overrides() {
        let base: toml::Table = "[moe]\nn_experts = 4\ntop_k = 2\n".parse().unwrap();
        let cfg = cell_config(&base, &[("moe.n_experts".into(), "8".into())]).unwrap();
        assert_eq!(cfg.moe.n_experts, 8);
        assert!(cell_config(&base, &[("moe.top_k".into(), "9".into())]).is_err());
    }
}
