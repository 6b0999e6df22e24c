//! The single structured run configuration shared by every command.
//!
//! Configs are TOML documents. Every key is optional and falls back to the
//! full-scale defaults; `--set section.key=value` overrides are applied to
//! the parsed document before it is validated.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pyramid::PyramidConfig;
use crate::training::TrainConfig;

/// File name of the resolved config written into every output directory.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory holding `<category>/train`, `<category>/test`, ...
    pub root: PathBuf,
    pub category: String,
    pub channels: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data"),
            category: "synthetic".into(),
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidSection {
    pub levels: usize,
    pub gamma: f64,
    /// `[height, width]` of the finest level.
    pub base_resolution: [usize; 2],
}

impl Default for PyramidSection {
    fn default() -> Self {
        PyramidSection {
            levels: 5,
            gamma: 0.5,
            base_resolution: [256, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub memory_slots: usize,
    pub channel_base: usize,
    pub target_spatial: usize,
    pub fuser_hidden: usize,
    /// Hard-shrinkage threshold; omitted means `1 / memory_slots`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shrink_threshold: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: 1024,
            memory_slots: 60,
            channel_base: 32,
            target_spatial: 8,
            fuser_hidden: 64,
            shrink_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSection {
    /// Box-filter radius applied to maps; 0 disables smoothing.
    pub smooth_radius: usize,
    pub heatmaps: bool,
    /// Fixed decision threshold `e`; when set, binary masks are written too.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            smooth_radius: 0,
            heatmaps: true,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub fpr_limit: f64,
    pub plot: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fpr_limit: 0.3,
            plot: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub pyramid: PyramidSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub score: ScoreSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses a TOML document, rejecting (and listing) every unknown key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config(format!("cannot parse config: {}", e.message()))
        })?;
        Self::from_table(doc)
    }

    fn from_table(doc: toml::Table) -> Result<Self> {
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(toml::Value::Table(doc), |path| {
            unknown.push(path.to_string())
        })
        .map_err(|e| Error::config(format!("bad config value: {e}")))?;
        if !unknown.is_empty() {
            return Err(Error::Config(
                unknown
                    .into_iter()
                    .map(|k| format!("unknown key `{k}`"))
                    .collect(),
            ));
        }
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`), applies `key=value`
    /// overrides in order, then validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| {
                    Error::config(format!("cannot parse {}: {}", p.display(), e.message()))
                })?
            }
            None => toml::Table::new(),
        };
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(msg) = apply_override(&mut doc, o) {
                problems.push(msg);
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg = Self::from_table(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pyramid_config(&self) -> PyramidConfig {
        let [h, w] = self.pyramid.base_resolution;
        PyramidConfig::new(self.pyramid.levels, self.pyramid.gamma, (h, w))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            pyramid: self.pyramid_config(),
            channels: self.data.channels,
            latent_dim: self.model.latent_dim,
            memory_slots: self.model.memory_slots,
            channel_base: self.model.channel_base,
            target_spatial: self.model.target_spatial,
            fuser_hidden: self.model.fuser_hidden,
            shrink_threshold: self.model.shrink_threshold,
        }
    }

    pub fn base_resolution(&self) -> (usize, usize) {
        let [h, w] = self.pyramid.base_resolution;
        (h, w)
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(p)) => problems.extend(p),
            Err(other) => problems.push(other.to_string()),
        };
        collect(self.model_config().validate());
        collect(self.train.validate());
        collect(self.synth.validate());
        if let Some(l) = self.model.shrink_threshold {
            if !(0.0..1.0).contains(&l) {
                problems.push(format!("model.shrink_threshold must be in [0, 1), got {l}"));
            }
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            problems.push(format!(
                "eval.fpr_limit must be in (0, 1], got {}",
                self.eval.fpr_limit
            ));
        }
        if let Some(e) = self.score.threshold {
            if !(e >= 0.0 && e.is_finite()) {
                problems.push(format!("score.threshold must be >= 0, got {e}"));
            }
        }
        if self.data.category.is_empty() {
            problems.push("data.category must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes to JSON")
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Sets a dotted key. Values are parsed as TOML and fall back to a bare
/// string, so `data.root=/tmp/x` and `train.epochs=3` both work.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` is malformed"));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let (last, sections) = parts.split_last().expect("key has at least one part");
    let mut table = doc;
    for s in sections {
        let entry = table
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{s}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
