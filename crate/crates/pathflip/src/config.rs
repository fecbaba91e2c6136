//! Run configuration from TOML, presets, and command-line overrides.

use std::path::Path;

use pathflip_core::train::RunConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("override `{key}`: {msg}")]
    Override { key: String, msg: String },
    #[error("unknown preset `{0}` (expected `desk` or `paper`)")]
    Preset(String),
    #[error(transparent)]
    Core(#[from] pathflip_core::Error),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Everything that selects a run configuration, applied in field order.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource<'a> {
    /// Starting point instead of a preset, e.g. a checkpoint's stored config.
    pub base: Option<RunConfig>,
    /// `desk` (default) or `paper`.
    pub preset: Option<&'a str>,
    pub file: Option<&'a Path>,
    /// Dotted keys such as `optim.lr`, values in TOML syntax (bare words are strings).
    pub overrides: &'a [(String, String)],
    pub seed: Option<u64>,
    pub ablate: &'a [String],
}

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "desk" => Ok(RunConfig::default()),
        "paper" => Ok(RunConfig::paper()),
        other => Err(ConfigError::Preset(other.into())),
    }
}

fn to_table(c: &RunConfig) -> Table {
    Table::try_from(c).expect("run config serializes to a table")
}

fn from_table(t: Table) -> std::result::Result<RunConfig, String> {
    t.try_into().map_err(|e: toml::de::Error| e.to_string())
}

/// Rejects keys absent from `reference`.
fn check_keys(t: &Table, reference: &Table, prefix: &str) -> Result<()> {
    for (k, v) in t {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, reference.get(k)) {
            (_, None) => return Err(ConfigError::UnknownKey(full)),
            (Value::Table(sub), Some(Value::Table(rsub))) => check_keys(sub, rsub, &full)?,
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(t: &mut Table, key: &str, raw: &str) -> Result<()> {
    let err = |msg: &str| ConfigError::Override {
        key: key.into(),
        msg: msg.into(),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| err("empty key"))?;
    let mut cur = t;
    for p in path {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(sub)) => sub,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        };
    }
    let slot = cur.get_mut(*last).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    if slot.is_table() {
        return Err(err("names a section, not a value"));
    }
    let mut v = parse_value(raw);
    if slot.is_float() {
        if let Value::Integer(i) = v {
            v = Value::Float(i as f64);
        }
    }
    if slot.type_str() != v.type_str() {
        return Err(err(&format!("expected {}, got {} `{raw}`", slot.type_str(), v.type_str())));
    }
    *slot = v;
    Ok(())
}

pub fn resolve(src: &ConfigSource<'_>) -> Result<RunConfig> {
    let base = match (&src.base, src.preset) {
        (Some(b), None) => b.clone(),
        (_, p) => preset(p.unwrap_or("desk"))?,
    };
    let mut table = to_table(&base);
    let reference = table.clone();
    if let Some(path) = src.file {
        let file_err = |msg: String| ConfigError::File {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let over: Table = text.parse().map_err(|e: toml::de::Error| file_err(e.to_string()))?;
        check_keys(&over, &reference, "")?;
        merge(&mut table, over);
    }
    for (k, v) in src.overrides {
        apply_override(&mut table, k, v)?;
    }
    let mut config = from_table(table).map_err(|msg| ConfigError::Override {
        key: "<config>".into(),
        msg,
    })?;
    if let Some(seed) = src.seed {
        config.seed = seed;
    }
    for flag in src.ablate {
        config = config.ablate(flag)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn to_toml(c: &RunConfig) -> String {
    toml::to_string(c).expect("run config serializes")
}

/// SHA-256 of the canonical TOML rendering, hex.
pub fn config_hash(c: &RunConfig) -> String {
    hex::encode(Sha256::digest(to_toml(c).as_bytes()))
}
