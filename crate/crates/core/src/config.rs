//! Run configuration: every knob of a run in one flat `section.key = value`
//! file. `#` starts a comment; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{default_value_columns, CsvSchema, TrainSplit};
use crate::error::{CocaError, Result};
use crate::model::ModelConfig;
use crate::objective::{BoundaryMode, ObjectiveConfig, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// Rate grid search on labelled test data.
    Grid,
    /// Flag only the top-scoring window of each object.
    MaxScore,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub paths: Vec<PathBuf>,
    pub value_columns: Vec<String>,
    pub label_column: Option<String>,
    pub train_split: TrainSplit,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            paths: Vec::new(),
            value_columns: default_value_columns(1),
            label_column: Some("label".into()),
            train_split: TrainSplit::Fraction(0.3),
        }
    }
}

impl DataConfig {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            value_columns: self.value_columns.clone(),
            label_column: self.label_column.clone(),
            train_split: self.train_split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub threshold: ThresholdMode,
    pub p_grid: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            threshold: ThresholdMode::Grid,
            p_grid: crate::detect::default_p_grid(),
            out_dir: PathBuf::from("coca-out"),
        }
    }
}

fn list<T>(v: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CocaError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative paths are taken relative to the config file
        if let Some(dir) = path.parent() {
            for p in cfg
                .data
                .paths
                .iter_mut()
                .chain(std::iter::once(&mut cfg.out_dir))
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CocaError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CocaError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(cfg)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CocaError::Config(format!("{key}: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(CocaError::Config(format!(
                    "{key}: expected true/false, got `{v}`"
                ))),
            }
        }
        let m = &mut self.model;
        let o = &mut self.objective;
        let t = &mut self.train;
        let a = &mut self.augment;
        match key {
            "model.in_channels" => m.in_channels = num(key, v)?,
            "model.conv_channels" => m.conv_channels = list(v, |s| num(key, s))?,
            "model.kernel_size" => m.kernel_size = num(key, v)?,
            "model.dropout" => m.dropout = num(key, v)?,
            "model.hidden_size" => m.hidden_size = num(key, v)?,
            "model.seq_layers" => m.seq_layers = num(key, v)?,
            "model.project_hidden" => m.project_hidden = num(key, v)?,
            "model.project_channels" => m.project_channels = num(key, v)?,
            "model.window_length" => m.window_length = num(key, v)?,
            "objective.lambda" => o.lambda = num(key, v)?,
            "objective.mu" => o.mu = num(key, v)?,
            "objective.gamma" => o.gamma = num(key, v)?,
            "objective.eps" => o.eps = num(key, v)?,
            "objective.nu" => o.nu = num(key, v)?,
            "objective.eta" => o.eta = if v == "nu" { None } else { Some(num(key, v)?) },
            "objective.mode" => {
                o.mode = match v {
                    "hard" => BoundaryMode::Hard,
                    "soft" => BoundaryMode::Soft,
                    _ => return Err(CocaError::Config(format!("{key}: expected hard or soft"))),
                }
            }
            "objective.variant" => o.variant = Variant::parse(v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.max_epochs" => t.max_epochs = num(key, v)?,
            "train.center_freeze_epoch" => t.center_freeze_epoch = num(key, v)?,
            "train.early_stop_patience" => t.early_stop_patience = num(key, v)?,
            "train.min_delta" => t.min_delta = num(key, v)?,
            "train.grad_clip" => t.grad_clip = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "augment.jitter_ratio" => a.jitter_ratio = num(key, v)?,
            "augment.scale_ratio" => a.scale_ratio = num(key, v)?,
            "augment.enabled" => a.enabled = flag(key, v)?,
            "augment.seed" => a.seed = num(key, v)?,
            "data.paths" => self.data.paths = list(v, |s| Ok(PathBuf::from(s)))?,
            "data.value_columns" => self.data.value_columns = list(v, |s| Ok(s.to_string()))?,
            "data.label_column" => {
                self.data.label_column = (v != "none").then(|| v.to_string());
            }
            "data.train_fraction" => self.data.train_split = TrainSplit::Fraction(num(key, v)?),
            "data.train_end" => self.data.train_split = TrainSplit::Index(num(key, v)?),
            "detect.threshold" => {
                self.threshold = match v {
                    "grid" => ThresholdMode::Grid,
                    "max" => ThresholdMode::MaxScore,
                    _ => ThresholdMode::Fixed(num(key, v)?),
                }
            }
            "detect.p_grid" => self.p_grid = list(v, |s| num(key, s))?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(CocaError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value; parsing this text gives back `self`.
    pub fn to_text(&self) -> String {
        let (m, o, t, a, d) = (
            &self.model,
            &self.objective,
            &self.train,
            &self.augment,
            &self.data,
        );
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.in_channels", m.in_channels.to_string());
        kv("model.conv_channels", join(&m.conv_channels));
        kv("model.kernel_size", m.kernel_size.to_string());
        kv("model.dropout", format!("{:?}", m.dropout));
        kv("model.hidden_size", m.hidden_size.to_string());
        kv("model.seq_layers", m.seq_layers.to_string());
        kv("model.project_hidden", m.project_hidden.to_string());
        kv("model.project_channels", m.project_channels.to_string());
        kv("model.window_length", m.window_length.to_string());
        kv("objective.lambda", format!("{:?}", o.lambda));
        kv("objective.mu", format!("{:?}", o.mu));
        kv("objective.gamma", format!("{:?}", o.gamma));
        kv("objective.eps", format!("{:?}", o.eps));
        kv("objective.nu", format!("{:?}", o.nu));
        kv(
            "objective.eta",
            o.eta.map_or("nu".into(), |e| format!("{e:?}")),
        );
        kv(
            "objective.mode",
            match o.mode {
                BoundaryMode::Hard => "hard".into(),
                BoundaryMode::Soft => "soft".into(),
            },
        );
        kv("objective.variant", o.variant.name().into());
        kv("train.learning_rate", format!("{:?}", t.learning_rate));
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.adam_beta1", format!("{:?}", t.adam_beta1));
        kv("train.adam_beta2", format!("{:?}", t.adam_beta2));
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv(
            "train.center_freeze_epoch",
            t.center_freeze_epoch.to_string(),
        );
        kv(
            "train.early_stop_patience",
            t.early_stop_patience.to_string(),
        );
        kv("train.min_delta", format!("{:?}", t.min_delta));
        kv("train.grad_clip", format!("{:?}", t.grad_clip));
        kv("train.seed", t.seed.to_string());
        kv("augment.jitter_ratio", format!("{:?}", a.jitter_ratio));
        kv("augment.scale_ratio", format!("{:?}", a.scale_ratio));
        kv("augment.enabled", a.enabled.to_string());
        kv("augment.seed", a.seed.to_string());
        kv(
            "data.paths",
            d.paths
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("data.value_columns", d.value_columns.join(","));
        kv(
            "data.label_column",
            d.label_column.clone().unwrap_or_else(|| "none".into()),
        );
        match d.train_split {
            TrainSplit::Fraction(f) => kv("data.train_fraction", format!("{f:?}")),
            TrainSplit::Index(i) => kv("data.train_end", i.to_string()),
        }
        kv(
            "detect.threshold",
            match self.threshold {
                ThresholdMode::Grid => "grid".into(),
                ThresholdMode::MaxScore => "max".into(),
                ThresholdMode::Fixed(x) => format!("{x:?}"),
            },
        );
        kv(
            "detect.p_grid",
            self.p_grid
                .iter()
                .map(|p| format!("{p:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("output.dir", self.out_dir.display().to_string());
        s
    }

    /// Shrinks the network and batch to the sizes used for the synthetic
    /// suites: windows of 16, a [16, 32, 32] encoder, 64-d projections.
    pub fn desk_scale(mut self) -> Self {
        self.model.window_length = 16;
        self.model.conv_channels = vec![16, 32, 32];
        self.model.hidden_size = 32;
        self.model.project_hidden = 16;
        self.model.project_channels = 64;
        self.train.batch_size = 16;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.data.value_columns.len() != self.model.in_channels {
            return Err(CocaError::Config(format!(
                "{} value columns but model.in_channels = {}",
                self.data.value_columns.len(),
                self.model.in_channels
            )));
        }
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(CocaError::Config(
                "detect.p_grid needs rates in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "\
# small run
model.window_length = 16
model.conv_channels = 8, 16, 16
objective.variant = NoVar
objective.mode = soft
objective.eta = 0.05
train.seed = 7
data.label_column = none
data.train_end = 400
detect.threshold = 0.25
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.conv_channels, vec![8, 16, 16]);
        assert_eq!(cfg.objective.variant, Variant::NoVar);
        assert_eq!(cfg.objective.eta, Some(0.05));
        assert_eq!(cfg.data.label_column, None);
        assert_eq!(cfg.data.train_split, TrainSplit::Index(400));
        assert_eq!(cfg.threshold, ThresholdMode::Fixed(0.25));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("model.window_length = 16\nbogus.key = 1\n").unwrap_err();
        assert!(matches!(err, CocaError::Parse { line: 2, .. }), "{err}");
        let err = RunConfig::parse("model.window_length 16\n").unwrap_err();
        assert!(matches!(err, CocaError::Parse { line: 1, .. }));
    }

    #[test]
    fn zero_nu_fails_validation() {
        let cfg = RunConfig::parse("objective.nu = 0\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
