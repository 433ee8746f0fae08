//! Experiment configuration: a TOML document with `[network]`, `[data]`,
//! `[train]` and `[eval]` sections layered over built-in defaults, with
//! `section.key=value` command-line overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stimtrain::data::{
    load_csv, make_blobs, make_mixture, make_rings, CsvSchema, Dataset, SplitFractions, SplitSizes,
};
use stimtrain::network::{Activation, NetworkSpec, StageSpec};
use stimtrain::{EvalOptions, TrainConfig};

/// A configuration problem: unreadable file, bad TOML, unknown key or bad
/// override syntax.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Blocks per stage.
    pub blocks: Vec<usize>,
    /// Width of every stage, unless `widths` is given.
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mixture,
    Blobs,
    Rings,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    /// Ignored for rings (always 2) and CSV (taken from the file).
    pub input_dim: usize,
    pub train_per_class: usize,
    pub calib_per_class: usize,
    pub eval_per_class: usize,
    pub spread: f64,
    pub noise: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub fractions: SplitFractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for Config {
    /// The desk-scale protocol: ten-class blob/ring mixture in 16
    /// dimensions and a (2,3,4,2,3) residual MLP of width 32.
    fn default() -> Self {
        Config {
            network: NetworkConfig {
                blocks: vec![2, 3, 4, 2, 3],
                width: 32,
                widths: None,
                activation: Activation::Relu,
            },
            data: DataConfig {
                kind: DataKind::Mixture,
                classes: 10,
                input_dim: 16,
                train_per_class: 500,
                calib_per_class: 50,
                eval_per_class: 100,
                spread: 1.5,
                noise: 0.3,
                seed: 0,
                path: None,
                label_column: "label".into(),
                fractions: SplitFractions::default(),
            },
            train: TrainConfig {
                epochs: 100,
                lr0: 0.01,
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{text}` is not of the form key=value")))?;
    let keys: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        return Err(ConfigError(format!("override `{text}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((keys, value))
}

fn apply_override(table: &mut toml::Table, keys: &[String], value: toml::Value) {
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut t = table;
    for k in parents {
        t = t
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("override descends into a table");
    }
    t.insert(last.clone(), value);
}

impl Config {
    /// Defaults, then the file (if any), then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        Config::resolve_over(&Config::default(), path, overrides)
    }

    /// Like [`Config::resolve`] with `base` in place of the defaults.
    pub fn resolve_over(
        base: &Config,
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<Config> {
        let mut table = toml::Table::try_from(base).expect("config serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            let (keys, value) = parse_override(o)?;
            if keys.len() > 1 && !table.get(&keys[0]).is_some_and(toml::Value::is_table) {
                return Err(ConfigError(format!(
                    "unknown section `{}`, expected one of `network`, `data`, `train`, `eval`",
                    keys[0]
                ))
                .into());
            }
            apply_override(&mut table, &keys, value);
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(w) = &self.network.widths {
            if w.len() != self.network.blocks.len() {
                bail!(ConfigError(format!(
                    "network.widths has {} entries for {} stages",
                    w.len(),
                    self.network.blocks.len()
                )));
            }
        }
        if self.data.kind == DataKind::Csv && self.data.path.is_none() {
            bail!(ConfigError("data.kind = \"csv\" needs data.path".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let sizes = SplitSizes {
            train: d.train_per_class,
            calib: d.calib_per_class,
            eval: d.eval_per_class,
        };
        Ok(match d.kind {
            DataKind::Mixture => {
                make_mixture(d.classes, d.input_dim, sizes, d.spread, d.noise, d.seed)?
            }
            DataKind::Blobs => make_blobs(d.classes, d.input_dim, sizes, d.spread, d.seed)?,
            DataKind::Rings => make_rings(d.classes, sizes, d.noise, d.seed)?,
            DataKind::Csv => {
                let path = d.path.as_deref().expect("validated");
                let schema = CsvSchema {
                    label_column: d.label_column.clone(),
                    num_classes: Some(d.classes),
                    fractions: d.fractions,
                    seed: d.seed,
                };
                load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?
            }
        })
    }

    /// The network shape for a dataset with the given feature count.
    pub fn network_spec(&self, input_dim: usize) -> Result<NetworkSpec> {
        let n = &self.network;
        let widths = n
            .widths
            .clone()
            .unwrap_or_else(|| vec![n.width; n.blocks.len()]);
        let spec = NetworkSpec {
            input_dim,
            num_classes: self.data.classes,
            stages: n
                .blocks
                .iter()
                .zip(widths)
                .map(|(&num_blocks, width)| StageSpec { num_blocks, width })
                .collect(),
            activation: n.activation,
        };
        spec.validate()?;
        Ok(spec)
    }
}
