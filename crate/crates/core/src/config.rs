//! Run configuration: a TOML document with `[model]` and `[train]` tables
//! whose keys mirror [`ModelConfig`] and [`TrainConfig`], layered over a
//! named preset, then environment variables, then `key=value` overrides.
//!
//! Environment variables use the prefix `SYNERGY_` and `__` between path
//! segments: `SYNERGY_MODEL__K=32`, `SYNERGY_TRAIN__LR=1e-3`,
//! `SYNERGY_MODEL__BLOCK__WINDOW=none`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "SYNERGY_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
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

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Model preset (`paper`, `desk`, `tiny`) with the desk training settings.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::preset(name)?,
            train: TrainConfig::desk(),
        })
    }

    fn to_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| cfg_err(e.to_string()))
    }

    fn from_table(t: Table) -> Result<Self> {
        let cfg: Self = t.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Parses a TOML document. A top-level `preset` key picks the base
    /// (default `desk`); any keys present override it.
    pub fn from_toml_str(doc: &str) -> Result<Self> {
        let mut over: Table = doc.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        let preset = match over.remove("preset") {
            Some(Value::String(s)) => s,
            Some(other) => return Err(cfg_err(format!("preset must be a string, got {other}"))),
            None => "desk".into(),
        };
        for key in over.keys() {
            if key != "model" && key != "train" {
                return Err(cfg_err(format!("unknown top-level key {key:?}")));
            }
        }
        let mut base = Self::preset(&preset)?.to_table()?;
        merge(&mut base, over);
        Self::from_table(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// Applies `path = value` overrides such as `model.k=32`. The value
    /// `none` clears an optional field.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut table = self.to_table()?;
        for (path, raw) in pairs {
            let segs: Vec<&str> = path.split('.').collect();
            if segs.len() < 2 || (segs[0] != "model" && segs[0] != "train") {
                return Err(cfg_err(format!("override key {path:?} must start with model. or train.")));
            }
            let mut node = &mut table;
            for seg in &segs[..segs.len() - 1] {
                node = match node.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new())) {
                    Value::Table(t) => t,
                    _ => return Err(cfg_err(format!("{path:?}: {seg} is not a table"))),
                };
            }
            let leaf = segs[segs.len() - 1].to_string();
            if raw == "none" {
                node.remove(&leaf);
            } else {
                node.insert(leaf, parse_value(raw));
            }
        }
        *self = Self::from_table(table)?;
        Ok(())
    }

    /// Applies `SYNERGY_*` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .filter(|(k, _)| k.starts_with("model.") || k.starts_with("train."))
            .collect();
        self.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| cfg_err(format!("expected key=value, got {s:?}")))
}
