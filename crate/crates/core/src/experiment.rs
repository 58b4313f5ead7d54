//! Experiment configuration files and `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, DataFormat, TrafficSeries};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::{self, SyntheticSpec};
use crate::train::TrainConfig;

pub const OUTPUT_ROOT_ENV: &str = "TEDDN_OUTPUT_ROOT";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Flatbin,
    /// Generated by [`synthetic::pems_like`]; `paths` is ignored.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: DatasetFormat,
    /// Relative paths are taken from the directory of the config file.
    pub paths: Vec<PathBuf>,
    pub steps_per_day: Option<usize>,
    pub start_weekday: Option<usize>,
    pub split: [usize; 3],
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: DatasetFormat::Synthetic,
            paths: Vec::new(),
            steps_per_day: None,
            start_weekday: None,
            split: [6, 2, 2],
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<TrafficSeries> {
        match self.format {
            DatasetFormat::Csv => data::load(DataFormat::Csv, &self.paths, self.steps_per_day, self.start_weekday),
            DatasetFormat::Flatbin => data::load(DataFormat::Flatbin, &self.paths, self.steps_per_day, self.start_weekday),
            DatasetFormat::Synthetic => {
                let mut spec = self.synthetic.clone();
                if let Some(spd) = self.steps_per_day {
                    spec.steps_per_day = spd;
                }
                if let Some(w) = self.start_weekday {
                    spec.start_weekday = w;
                }
                synthetic::pems_like(&spec)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: String,
    /// Relative to `$TEDDN_OUTPUT_ROOT` when set, else to the working
    /// directory.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variant: "full".into(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` and resolves relative paths.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = Self::from_value(raw, overrides)?;
        cfg.resolve(base, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).as_deref());
        Ok(cfg)
    }

    /// Parses a config value strictly, then applies dotted-key overrides to
    /// the fully defaulted form so that any documented key can be set.
    pub fn from_value(raw: Value, overrides: &[String]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(raw).map_err(|e| Error::Config(e.to_string()))?;
        if overrides.is_empty() {
            return Ok(cfg);
        }
        let mut value = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    fn resolve(&mut self, config_dir: &Path, output_root: Option<&Path>) {
        for p in &mut self.dataset.paths {
            if p.is_relative() {
                *p = absolute(&config_dir.join(&*p));
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = absolute(&output_root.unwrap_or(Path::new("")).join(&self.output_dir));
        }
    }

    /// Effective config as pretty JSON, suitable for reloading.
    pub fn echo(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Config(e.to_string()))
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Sets `a.b.c=value` inside `root`. The value is parsed as JSON and falls
/// back to a plain string. Every key along the path must already exist.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let key = key.trim();
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
