//! Run configuration: one TOML document merging every component's settings.
//!
//! Values resolve as flags > file > defaults. Flags arrive as dotted-key
//! overrides applied to the parsed file before deserialization, so unknown
//! keys are rejected the same way wherever they come from.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{TargetStyle, TripletOrder};
use crate::episode::SamplerConfig;
use crate::error::{Error, Result};
use crate::hyper::HyperConfig;
use crate::metric::MatchConfig;
use crate::model::ModelConfig;
use crate::reptile::ReptileConfig;
use crate::synth::PoolMode;
use crate::system::{SystemSpec, Variant};
use crate::train::TrainConfig;

/// Environment variable naming the directory that relative input paths
/// (corpus, templates) are resolved against.
pub const DATA_ROOT_ENV: &str = "ZERORTE_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing corpus to split instead of the synthesized one.
    pub corpus: Option<PathBuf>,
    /// Template file for synthesis; the built-in inventory when unset.
    pub templates: Option<PathBuf>,
    pub samples_per_relation: usize,
    pub multi_triplet_fraction: f64,
    pub pool_mode: PoolMode,
    pub pool_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            templates: None,
            samples_per_relation: 100,
            multi_triplet_fraction: 0.1,
            pool_mode: PoolMode::Separable,
            pool_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Number of unseen relations.
    pub m: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { m: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub order: TripletOrder,
    pub style: TargetStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Variant trained by the r, order and t sweeps; the alpha sweep
    /// always trains the metric variant.
    pub variant: Variant,
    pub r: Vec<usize>,
    pub order: Vec<TripletOrder>,
    pub t: Vec<usize>,
    pub alpha: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            variant: Variant::Tgm,
            r: vec![2, 5, 10, 15],
            order: vec![TripletOrder::Htr, TripletOrder::Thr, TripletOrder::Rht],
            t: vec![1, 2, 3, 5],
            alpha: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: corpus, split, initialization and training streams.
    pub seed: u64,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub codec: CodecConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reptile: ReptileConfig,
    pub metric: MatchConfig,
    pub hyper: HyperConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    /// Desk-scale settings: a small model that trains in minutes on one CPU core.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            codec: CodecConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig {
                d_model: 64,
                n_heads: 4,
                n_encoder_layers: 2,
                n_decoder_layers: 2,
                d_ff: 256,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 10,
                lr_backbone: 1e-3,
                lr_heads: 1e-3,
                patience: 3,
                max_validation_samples: 100,
                ..TrainConfig::default()
            },
            reptile: ReptileConfig::default(),
            metric: MatchConfig::default(),
            hyper: HyperConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// One `key.path=value` override. The value is read as a TOML value when
/// it parses as one and as a bare string otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Override {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("override `{s}` has an empty key")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Override::new(key, value))
    }
}

fn apply_override(table: &mut toml::Table, o: &Override) -> Result<()> {
    let parts: Vec<&str> = o.key.split('.').collect();
    let (last, path) = parts.split_last().expect("override keys are non-empty");
    let mut cur = table;
    for (i, p) in path.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("`{}` is not a section", parts[..=i].join(".")))
        })?;
    }
    cur.insert(last.to_string(), o.value.clone());
    Ok(())
}

impl RunConfig {
    /// Parse a TOML document, apply overrides, validate.
    pub fn from_toml_str(text: &str, overrides: &[Override]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file at `path` if any, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides).map_err(|e| match (path, e) {
            (Some(p), Error::Config(msg)) => Error::Config(format!("{}: {msg}", p.display())),
            (_, e) => e,
        })
    }

    /// Push the master seed into every component.
    pub fn resolved(mut self) -> Self {
        self.model.init_seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.samples_per_relation == 0 {
            return Err(Error::Config("data.samples_per_relation must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.multi_triplet_fraction) {
            return Err(Error::Config("data.multi_triplet_fraction must lie in [0, 1]".into()));
        }
        if self.data.pool_size == 0 {
            return Err(Error::Config("data.pool_size must be positive".into()));
        }
        if self.split.m == 0 {
            return Err(Error::Config("split.m must be positive".into()));
        }
        self.sampler.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.reptile.validate()?;
        if !(0.0..=1.0).contains(&self.metric.alpha) {
            return Err(Error::Config("metric.alpha must lie in [0, 1]".into()));
        }
        if self.metric.d_match == 0 {
            return Err(Error::Config("metric.d_match must be positive".into()));
        }
        if self.hyper.hidden == 0 {
            return Err(Error::Config("hyper.hidden must be positive".into()));
        }
        let s = &self.sweep;
        if s.r.is_empty() || s.order.is_empty() || s.t.is_empty() || s.alpha.is_empty() {
            return Err(Error::Config("sweep value lists must be non-empty".into()));
        }
        if s.r.contains(&0) || s.t.contains(&0) {
            return Err(Error::Config("sweep.r and sweep.t values must be positive".into()));
        }
        if s.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("sweep.alpha values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn system_spec(&self, variant: Variant) -> SystemSpec {
        SystemSpec {
            variant,
            model: self.model.clone(),
            metric: self.metric.clone(),
            hyper: self.hyper.clone(),
            order: self.codec.order,
            style: self.codec.style,
        }
    }
}

/// `path` itself when absolute, else joined onto the data root (the
/// environment variable when set, the working directory otherwise).
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}
