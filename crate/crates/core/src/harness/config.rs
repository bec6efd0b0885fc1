//! TOML run configuration with sections `model`, `moe`, `dso`, `sampler`,
//! `data` and `run`.
//!
//! `moe.n_experts` and `moe.top_k` are required; everything else has a
//! default. Errors name the offending key as `section.key`.

use super::data::{default_tasks, derive_seed, Modality, ModalitySpec};
use super::model::ModelSpec;
use super::sampler::SamplerConfig;
use super::{HarnessError, Result};
use crate::dso::DsoConfig;
use crate::moe::MoeConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub channels: usize,
    /// `"even"`, `"odd"`, `"all"`, `"none"` or a bit string such as `"1010"`.
    pub moe_placement: String,
    pub pretrained_noise: f64,
    pub head_init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            depth: 4,
            channels: 8,
            moe_placement: "even".into(),
            pretrained_noise: 0.1,
            head_init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_gate_temperature")]
    pub gate_temperature: f64,
    /// Defaults to `model.channels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_dim: Option<usize>,
}

fn yes() -> bool {
    true
}

fn default_gate_temperature() -> f64 {
    0.07
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsoSection {
    pub enabled: bool,
    pub alpha: f64,
    pub theta: f64,
    pub tau: f64,
    pub bias_b: f64,
}

impl Default for DsoSection {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: DsoConfig::DEFAULT_ALPHA,
            theta: DsoConfig::DEFAULT_THETA,
            tau: DsoConfig::DEFAULT_TAU,
            bias_b: DsoConfig::DEFAULT_BIAS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Samples of modalities A, B, C per batch.
    pub counts: [usize; 3],
    pub batch_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            counts: [2, 1, 1],
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    /// Label noise of each modality before the hardness factor.
    pub label_noise: [f64; 3],
    /// Modality whose label noise is multiplied by `hardness`; `""` for none.
    pub hard_modality: String,
    pub hardness: f64,
    /// Fixed evaluation samples per modality.
    pub eval_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            label_noise: [0.1, 0.1, 0.1],
            hard_modality: String::new(),
            hardness: 4.0,
            eval_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub iterations: u64,
    pub base_lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            iterations: 500,
            base_lr: DEFAULT_BASE_LR,
            out_dir: None,
        }
    }
}

/// Base learning rate of the plain SGD update.
pub const DEFAULT_BASE_LR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub moe: MoeSection,
    #[serde(default)]
    pub dso: DsoSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub run: RunSection,
}

const REQUIRED: [(&str, &str); 2] = [("moe", "n_experts"), ("moe", "top_k")];

impl RunConfig {
    /// Defaults plus the given expert count and top-k.
    pub fn with_experts(n_experts: usize, top_k: usize) -> Self {
        Self {
            model: ModelSection::default(),
            moe: MoeSection {
                enabled: true,
                n_experts,
                top_k,
                gate_temperature: default_gate_temperature(),
                gate_dim: None,
            },
            dso: DsoSection::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
            run: RunSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(&parse_table(text)?)
    }

    pub fn from_table(table: &toml::Table) -> Result<Self> {
        for (section, key) in REQUIRED {
            let present = table
                .get(section)
                .and_then(|s| s.as_table())
                .is_some_and(|s| s.contains_key(key));
            if !present {
                return Err(HarnessError::field(
                    format!("{section}.{key}"),
                    "required key is missing",
                ));
            }
        }
        // round-trip through text so type errors carry the key location
        let text = toml::to_string(table).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every cross-field invariant; errors name the key.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.depth == 0 {
            return Err(HarnessError::field("model.depth", "must be at least 1"));
        }
        if m.channels == 0 {
            return Err(HarnessError::field("model.channels", "must be at least 1"));
        }
        self.placement_mask()?;
        if !(m.pretrained_noise >= 0.0 && m.pretrained_noise.is_finite()) {
            return Err(HarnessError::field(
                "model.pretrained_noise",
                "must be finite and ≥ 0",
            ));
        }
        if !(m.head_init_std >= 0.0 && m.head_init_std.is_finite()) {
            return Err(HarnessError::field(
                "model.head_init_std",
                "must be finite and ≥ 0",
            ));
        }

        let moe = &self.moe;
        if moe.n_experts == 0 {
            return Err(HarnessError::field("moe.n_experts", "must be at least 1"));
        }
        if moe.top_k == 0 || moe.top_k > moe.n_experts {
            return Err(HarnessError::field(
                "moe.top_k",
                format!("must be in 1..={}, got {}", moe.n_experts, moe.top_k),
            ));
        }
        if !(moe.gate_temperature > 0.0 && moe.gate_temperature.is_finite()) {
            return Err(HarnessError::field(
                "moe.gate_temperature",
                "must be positive",
            ));
        }
        if moe.gate_dim == Some(0) {
            return Err(HarnessError::field("moe.gate_dim", "must be at least 1"));
        }

        let d = &self.dso;
        if !(0.0..=1.0).contains(&d.alpha) {
            return Err(HarnessError::field("dso.alpha", "must be in [0, 1]"));
        }
        for (key, v) in [("dso.theta", d.theta), ("dso.tau", d.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::field(key, "must be positive"));
            }
        }
        if !d.bias_b.is_finite() {
            return Err(HarnessError::field("dso.bias_b", "must be finite"));
        }

        self.sampler_config()
            .validate()
            .map_err(|e| HarnessError::field("sampler.counts", e.to_string()))?;

        let data = &self.data;
        if data.height == 0 || data.width == 0 {
            return Err(HarnessError::field("data.height", "grid must be non-empty"));
        }
        if let Some(i) = data
            .label_noise
            .iter()
            .position(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(HarnessError::field(
                "data.label_noise",
                format!("entry {i} must be finite and ≥ 0"),
            ));
        }
        self.hard_modality()?;
        if !(data.hardness >= 0.0 && data.hardness.is_finite()) {
            return Err(HarnessError::field(
                "data.hardness",
                "must be finite and ≥ 0",
            ));
        }
        if data.eval_samples == 0 {
            return Err(HarnessError::field(
                "data.eval_samples",
                "must be at least 1",
            ));
        }
        if !(self.run.base_lr > 0.0 && self.run.base_lr.is_finite()) {
            return Err(HarnessError::field("run.base_lr", "must be positive"));
        }
        if self.run.name.is_empty() {
            return Err(HarnessError::field("run.name", "must not be empty"));
        }
        Ok(())
    }

    pub fn placement_mask(&self) -> Result<Vec<bool>> {
        parse_placement(&self.model.moe_placement, self.model.depth)
    }

    pub fn hard_modality(&self) -> Result<Option<Modality>> {
        let s = self.data.hard_modality.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|e| HarnessError::field("data.hard_modality", e))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let c = self.model.channels;
        let mut moe = MoeConfig::new(c, c)
            .with_experts(self.moe.n_experts, self.moe.top_k)
            .with_temperature(self.moe.gate_temperature);
        if let Some(g) = self.moe.gate_dim {
            moe.gate_dim = g;
        }
        let mask = if self.moe.enabled {
            self.placement_mask()?
        } else {
            vec![false; self.model.depth]
        };
        let spec = ModelSpec {
            depth: self.model.depth,
            channels: c,
            moe_mask: mask,
            moe,
            tasks: default_tasks(),
            pretrained_noise: self.model.pretrained_noise,
            head_init_std: self.model.head_init_std,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Generator parameters for A, B and C with the configured label noise.
    pub fn modality_specs(&self) -> Result<Vec<ModalitySpec>> {
        let hard = self.hard_modality()?;
        Ok(Modality::ALL
            .iter()
            .map(|&m| {
                let mut s = ModalitySpec::standard(
                    m,
                    self.data.height,
                    self.data.width,
                    self.model.channels,
                );
                s.label_noise = self.data.label_noise[m.index()];
                if hard == Some(m) {
                    s.label_noise *= self.data.hardness;
                }
                s
            })
            .collect())
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            counts: self.sampler.counts,
            batch_size: self.sampler.batch_size,
            seed: derive_seed(self.run.seed, &[20]),
        }
    }

    pub fn dso_config(&self) -> DsoConfig {
        DsoConfig {
            alpha: self.dso.alpha,
            theta: self.dso.theta,
            tau: self.dso.tau,
            bias_b: self.dso.bias_b,
            n_tasks: default_tasks().len(),
        }
    }
}

/// Parses config text into a raw table, for applying overrides.
pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse()
        .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))
}

/// Expands a placement name or bit string into a per-block mask.
pub fn parse_placement(s: &str, depth: usize) -> Result<Vec<bool>> {
    let field = "model.moe_placement";
    let mask: Vec<bool> = match s.trim().to_ascii_lowercase().as_str() {
        "even" => (0..depth).map(|i| i % 2 == 0).collect(),
        "odd" => (0..depth).map(|i| i % 2 == 1).collect(),
        "all" => vec![true; depth],
        "none" => vec![false; depth],
        bits => bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(HarnessError::field(
                    field,
                    format!("expected even, odd, all, none or a 0/1 string, found {other:?}"),
                )),
            })
            .collect::<Result<_>>()?,
    };
    if mask.len() != depth {
        return Err(HarnessError::field(
            field,
            format!("mask has {} entries but model.depth is {depth}", mask.len()),
        ));
    }
    Ok(mask)
}

/// Parses an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `section.key` in a raw config table.
pub fn set_key(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let (section, key) = path
        .split_once('.')
        .filter(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'))
        .ok_or_else(|| HarnessError::field(path, "override keys have the form section.key"))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sec = entry
        .as_table_mut()
        .ok_or_else(|| HarnessError::field(section, "is not a table"))?;
    sec.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[moe]\nn_experts = 4\ntop_k = 2\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg, RunConfig::with_experts(4, 2));
        assert_eq!(
            cfg.placement_mask().unwrap(),
            vec![true, false, true, false]
        );
        assert_eq!(cfg.model_spec().unwrap().moe_blocks(), vec![0, 2]);
    }

    #[test]
    fn missing_top_k_is_named() {
        let err = RunConfig::from_toml_str("[moe]\nn_experts = 4\n").unwrap_err();
        assert!(err.to_string().contains("moe.top_k"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml_str(&format!("{MINIMAL}topk = 3\n")).unwrap_err();
        assert!(err.to_string().contains("topk"), "{err}");
    }

    #[test]
    fn semantic_errors_are_named() {
        let err = RunConfig::from_toml_str("[moe]\nn_experts = 2\ntop_k = 3\n").unwrap_err();
        assert!(err.to_string().contains("moe.top_k"));
        let err = RunConfig::from_toml_str(&format!("{MINIMAL}[sampler]\ncounts = [2, 0, 2]\n"))
            .unwrap_err();
        assert!(err.to_string().contains("sampler.counts"));
        let err = RunConfig::from_toml_str(&format!("{MINIMAL}[model]\nmoe_placement = \"101\"\n"))
            .unwrap_err();
        assert!(err.to_string().contains("model.moe_placement"));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::with_experts(8, 2);
        cfg.data.hard_modality = "A".into();
        cfg.run.out_dir = Some("x".into());
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides() {
        let mut t: toml::Table = MINIMAL.parse().unwrap();
        set_key(&mut t, "moe.n_experts", parse_value("8")).unwrap();
        set_key(&mut t, "dso.tau", parse_value("2.5")).unwrap();
        set_key(&mut t, "model.moe_placement", parse_value("odd")).unwrap();
        set_key(&mut t, "data.hard_modality", parse_value("\"B\"")).unwrap();
        let cfg = RunConfig::from_table(&t).unwrap();
        assert_eq!(cfg.moe.n_experts, 8);
        assert_eq!(cfg.dso.tau, 2.5);
        assert_eq!(
            cfg.placement_mask().unwrap(),
            vec![false, true, false, true]
        );
        assert_eq!(cfg.hard_modality().unwrap(), Some(Modality::B));
        assert!(set_key(&mut t, "tau", parse_value("1")).is_err());
    }

    #[test]
    fn hard_modality_scales_noise() {
        let mut cfg = RunConfig::with_experts(4, 2);
        cfg.data.hard_modality = "c".into();
        let specs = cfg.modality_specs().unwrap();
        assert_eq!(specs[2].label_noise, 0.4);
        assert_eq!(specs[0].label_noise, 0.1);
    }
}
