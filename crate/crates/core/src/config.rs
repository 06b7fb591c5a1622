//! Run configuration: one TOML file, every field overridable with
//! `--section.key value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cadd::LossWeights;
use crate::error::{Error, Result};
use crate::metrics::MatchCriterion;
use crate::model::ModelConfig;

pub const DEVICE_ENV: &str = "CCDNET_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Desk-scale default; the long GPU schedule uses 1e-4.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detections scoring at or below this are discarded before matching.
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub criterion: MatchCriterion,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.5,
            nms_iou: 0.5,
            criterion: MatchCriterion::default(),
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random horizontal and vertical flips during training.
    pub flip: bool,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub device: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            flip: true,
            checkpoint_every: 5,
            device: "cpu".into(),
            data_dir: PathBuf::from("data/synth"),
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        check_device(&self.device)?;
        let o = &self.optim;
        if !(o.lr > 0.0
            && o.weight_decay >= 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults), applies overrides, then the
    /// device environment variable, and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Ok(dev) = std::env::var(DEVICE_ENV) {
            cfg.device = dev;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Only the CPU backend exists.
pub fn check_device(device: &str) -> Result<()> {
    if device.eq_ignore_ascii_case("cpu") {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unsupported device {device:?}; only \"cpu\" is available"
        )))
    }
}

/// A TOML literal when the text parses as one, a bare string otherwise.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Sets a dotted key such as `loss.alpha`, creating sections as needed.
pub fn set_path(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}

/// Splits `--key value` pairs; anything else is an error.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key value, got {a:?}")))?;
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((k, v));
    }
    Ok(out)
}
