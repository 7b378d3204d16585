//! Run configuration: one TOML file with a section per stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array_sim::SimConfig;
use crate::beamformer::BeamformerConfig;
use crate::crf::EstimatorConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::signal::StftConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub chunk_seconds: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optimize the cRF estimator through the reference channel when the
    /// beamformer is closed-form.
    pub train_crf: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 4.0,
            lr: 1e-4,
            max_grad_norm: 10.0,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            train_crf: false,
            checkpoint_every: 100,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn chunk_samples(&self, sample_rate: u32) -> usize {
        (self.chunk_seconds * sample_rate as f64).round() as usize
    }

    pub fn validate(&self, sample_rate: u32, window_length: usize) -> Result<()> {
        if !(self.chunk_seconds > 0.0) || self.chunk_samples(sample_rate) < 2 * window_length {
            return Err(Error::Config(format!(
                "training chunk of {} s is shorter than two analysis windows",
                self.chunk_seconds
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!("max_grad_norm {} must be positive", self.max_grad_norm)));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, checkpoint_every and log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Emit one row per scene after the bucket table.
    pub per_scene_rows: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { per_scene_rows: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub stft: StftConfig,
    pub array: SimConfig,
    pub features: FeatureConfig,
    pub estimator: EstimatorConfig,
    pub beamformer: BeamformerConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stft: StftConfig::default(),
            array: SimConfig::default(),
            features: FeatureConfig::default(),
            estimator: EstimatorConfig::default(),
            beamformer: BeamformerConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    User,
    Flag,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::User => "user",
            Source::Flag => "flag",
        }
    }
}

/// Where each leaf key of a [`RunConfig`] came from, keyed by dotted path.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    user: BTreeMap<String, Source>,
}

impl Provenance {
    pub fn mark(&mut self, path: &str, source: Source) {
        self.user.insert(path.to_string(), source);
    }

    pub fn source(&self, path: &str) -> Source {
        self.user.get(path).copied().unwrap_or(Source::Default)
    }
}

fn collect_leaves(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_leaves(&p, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<(Self, Provenance)> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(v) = value.get("schema_version") {
            if v.as_integer() != Some(SCHEMA_VERSION as i64) {
                return Err(Error::Config(format!(
                    "unsupported schema_version {v} (this build reads {SCHEMA_VERSION})"
                )));
            }
        }
        let cfg: RunConfig = value.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut prov = Provenance::default();
        let mut leaves = Vec::new();
        collect_leaves("", &value, &mut leaves);
        for (path, _) in leaves {
            prov.mark(&path, Source::User);
        }
        cfg.validate()?;
        Ok((cfg, prov))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Provenance)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        self.stft.validate()?;
        self.array.validate()?;
        self.features.resolve_pairs(self.array.positions.len())?;
        if self.features.ref_channel >= self.array.positions.len() {
            return Err(Error::Config(format!(
                "reference channel {} out of range for {} mics",
                self.features.ref_channel,
                self.array.positions.len()
            )));
        }
        self.estimator.validate()?;
        self.beamformer.validate()?;
        self.training.validate(self.array.sample_rate, self.stft.window_length)
    }

    pub fn mics(&self) -> usize {
        self.array.positions.len()
    }

    /// Every leaf key with its value and origin, one per line.
    pub fn echo(&self, prov: &Provenance) -> String {
        let value = toml::Value::try_from(self).expect("run config serializes");
        let mut leaves = Vec::new();
        collect_leaves("", &value, &mut leaves);
        let mut out = String::new();
        for (path, v) in leaves {
            let _ = writeln!(out, "{path} = {v}  # {}", prov.source(&path).label());
        }
        out
    }
}
