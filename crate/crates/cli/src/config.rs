//! Flat-key run configuration.
//!
//! A config file is TOML whose keys are `section.key` pairs (either as
//! `[section]` tables or dotted keys) plus a few top-level keys. Defaults
//! come from the selected model preset and rotor class; a file and then
//! `--set`/flag overrides are layered on top. Keys the defaults do not know
//! are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use mdvit::iqsim::{class_presets, ClassId, CpiSpec, RotorParams};
use mdvit::mdtcwt::{ThresholdRule, DEFAULT_LEVELS};
use mdvit::train::TrainConfig;
use mdvit::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub class_id: ClassId,
    /// Noise level relative to the rotor power; `inf` for a clean record.
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspSection {
    /// Apply the clutter highpass before denoising.
    pub highpass: bool,
    pub cutoff_hz: f64,
    pub levels: usize,
    pub rule: ThresholdRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub total: usize,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub threads: usize,
    /// `desk` or `full`; picks the `vit.*` defaults.
    pub model: String,
    pub sim: SimSection,
    pub cpi: CpiSpec,
    pub rotor: RotorParams,
    pub dsp: DspSection,
    pub dataset: DatasetSection,
    pub vit: ViTConfig,
    pub train: TrainConfig,
}

pub type FlatConfig = BTreeMap<String, Value>;

fn model_preset(name: &str) -> CliResult<ViTConfig> {
    match name {
        "desk" => Ok(ViTConfig::desk()),
        "full" => Ok(ViTConfig::full()),
        _ => Err(CliError::Usage(format!("unknown model preset {name:?} (expected desk or full)"))),
    }
}

impl RunConfig {
    pub fn defaults(model: &str, class_id: ClassId) -> CliResult<Self> {
        Ok(RunConfig {
            seed: None,
            threads: 1,
            model: model.to_string(),
            sim: SimSection { class_id, snr_db: f64::INFINITY },
            cpi: CpiSpec::new(2048),
            rotor: class_presets(class_id),
            dsp: DspSection { highpass: true, cutoff_hz: mdvit::dsp::DEFAULT_CUTOFF_HZ, levels: DEFAULT_LEVELS, rule: ThresholdRule::Soft },
            dataset: DatasetSection { total: 600, snr_min_db: 5.0, snr_max_db: 15.0 },
            vit: model_preset(model)?,
            train: TrainConfig::default(),
        })
    }

    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::Usage("this command needs a seed (--seed N or seed = N)".into()))
    }

    /// Key/value view with rotor class and training seed folded into their
    /// top-level counterparts.
    pub fn flatten(&self) -> CliResult<FlatConfig> {
        let table = Table::try_from(self).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut flat = flatten(&table);
        flat.remove("rotor.class_id");
        flat.remove("train.seed");
        Ok(flat)
    }

    /// `key = value` lines, sorted by key.
    pub fn effective_text(&self) -> CliResult<String> {
        Ok(self.flatten()?.iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.cpi.validate()?;
        self.rotor.validate(&self.cpi)?;
        self.vit.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        if self.dsp.cutoff_hz.is_nan() || self.dsp.cutoff_hz <= 0.0 || self.dsp.levels == 0 {
            return Err(CliError::Usage("dsp.cutoff_hz and dsp.levels must be positive".into()));
        }
        Ok(())
    }
}

/// Two-level flattening: `section.key` for table entries, bare keys at the
/// top. Deeper values (such as `rotor.rotation`) stay whole.
pub fn flatten(table: &Table) -> FlatConfig {
    let mut out = BTreeMap::new();
    for (k, v) in table {
        match v {
            Value::Table(inner) => {
                for (ik, iv) in inner {
                    out.insert(format!("{k}.{ik}"), iv.clone());
                }
            }
            other => {
                out.insert(k.clone(), other.clone());
            }
        }
    }
    out
}

fn unflatten(flat: &FlatConfig) -> Table {
    let mut out = Table::new();
    for (k, v) in flat {
        match k.split_once('.') {
            Some((section, key)) => {
                let entry = out.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
                if let Value::Table(t) = entry {
                    t.insert(key.to_string(), v.clone());
                }
            }
            None => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    out
}

/// Parses a flag value as TOML, falling back to a bare string so
/// `--set sim.class_id=Heli4` needs no quoting.
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn parse_assignment(s: &str) -> CliResult<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Builds the effective config from optional file text and ordered
/// overrides (later ones win).
pub fn resolve(file_text: Option<&str>, overrides: &[(String, Value)]) -> CliResult<RunConfig> {
    let mut user = match file_text {
        Some(text) => {
            let table: Table = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
            flatten(&table)
        }
        None => FlatConfig::new(),
    };
    for (k, v) in overrides {
        user.insert(k.clone(), v.clone());
    }

    let text_of = |key: &str, default: &str| -> CliResult<String> {
        match user.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(v) => Err(CliError::Usage(format!("config: {key} must be a string, got {v}"))),
        }
    };
    let model = text_of("model", "desk")?;
    let class_id: ClassId = text_of("sim.class_id", "Heli3")?.parse().map_err(|e: mdvit::Error| CliError::Usage(e.to_string()))?;

    let base = RunConfig::defaults(&model, class_id)?;
    let mut merged = base.flatten()?;
    for (k, v) in &user {
        let known = merged.contains_key(k) || k == "seed" || k == "rotor.initial_phase_rad";
        if !known {
            return Err(CliError::Usage(format!("unknown config key {k:?}")));
        }
        merged.insert(k.clone(), v.clone());
    }
    let seed = match merged.get("seed") {
        None => None,
        Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
        Some(v) => return Err(CliError::Usage(format!("config: seed must be a non-negative integer, got {v}"))),
    };
    merged.insert("rotor.class_id".into(), Value::String(class_id.name().into()));
    merged.insert("train.seed".into(), Value::Integer(seed.unwrap_or(0) as i64));
    let cfg: RunConfig = unflatten(&merged).try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    resolve(text.as_deref(), overrides)
}
