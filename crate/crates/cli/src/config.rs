//! TOML run configuration.
//!
//! A file is layered over a preset: keys present in the file replace the
//! preset's values, and any unknown key is rejected. Command-line flags are
//! applied on top by the caller.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use gtloc::encoders::EncoderConfig;
use gtloc::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Reduced widths and a short-schedule recipe for CPU runs.
    #[default]
    Desk,
    /// Full encoder widths and the long, low-learning-rate schedule.
    Full,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown preset '{other}' (desk|full)")),
        }
    }
}

/// Encoder widths; the backbone width always comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub rff_features: usize,
    pub scales: Vec<f64>,
    pub head_hidden: usize,
    pub head_hidden_layers: usize,
    pub embed_dim: usize,
    pub image_hidden: usize,
    pub seed: u64,
}

impl ModelSection {
    fn from_encoder(e: &EncoderConfig) -> Self {
        Self {
            rff_features: e.rff_features,
            scales: e.scales.clone(),
            head_hidden: e.head_hidden,
            head_hidden_layers: e.head_hidden_layers,
            embed_dim: e.embed_dim,
            image_hidden: e.image_hidden,
            seed: e.seed,
        }
    }

    pub fn encoder(&self, backbone_dim: usize) -> EncoderConfig {
        EncoderConfig {
            rff_features: self.rff_features,
            scales: self.scales.clone(),
            head_hidden: self.head_hidden,
            head_hidden_layers: self.head_hidden_layers,
            embed_dim: self.embed_dim,
            backbone_dim,
            image_hidden: self.image_hidden,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Preset,
    pub train: TrainConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl ConfigFile {
    pub fn preset(p: Preset) -> Self {
        let (train, enc) = match p {
            Preset::Desk => (TrainConfig::desk(), EncoderConfig::desk(0)),
            Preset::Full => (TrainConfig::default(), EncoderConfig::default()),
        };
        Self { preset: p, train, model: ModelSection::from_encoder(&enc), paths: PathsSection::default() }
    }

    /// Parses `text`, layering it over the preset it names (or `fallback`).
    pub fn parse(text: &str, fallback: Preset) -> CliResult<Self> {
        let err = |m: String| CliError::usage("config", m);
        let file: toml::Table = toml::from_str(text).map_err(|e| err(e.message().to_string()))?;
        let preset = match file.get("preset") {
            Some(toml::Value::String(s)) => s.parse().map_err(err)?,
            Some(other) => return Err(err(format!("preset must be a string, got {other}"))),
            None => fallback,
        };
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| err(e.to_string()))?;
        let merged = merge(base, file);
        merged.try_into().map_err(|e: toml::de::Error| err(e.message().to_string()))
    }

    pub fn load(path: &Path, fallback: Preset) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, fallback)
            .map_err(|e| CliError { message: format!("{}: {}", path.display(), e.message), ..e })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Recursively replaces entries of `base` with those of `over`.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
