use std::path::{Path, PathBuf};

use anyhow::Context;
use chessrec_core::dataset::{RenderConfig, SplitRatios};
use chessrec_core::eval::{OrientationScope, PhaseBoundaries};
use chessrec_core::model::{ModelConfig, TrainRecipe};
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from one TOML file. Unknown keys are
/// rejected so typos fail loudly instead of silently using defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub build: BuildSection,
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub train: TrainRecipe,
    pub limits: Limits,
    /// Train on on-the-fly renders of random positions instead of a
    /// dataset on disk.
    pub synthetic: Option<SyntheticSource>,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            build: BuildSection::default(),
            render: RenderConfig::default(),
            model: ModelConfig::desk(128),
            train: TrainRecipe::classification(),
            limits: Limits::default(),
            synthetic: None,
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `annotations.json` and the images.
    pub dataset_root: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { dataset_root: None, out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub split: SplitRatios,
    pub default_device: String,
}

impl Default for BuildSection {
    fn default() -> Self {
        BuildSection { split: SplitRatios::default(), default_device: "unknown".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub time_budget_minutes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub train: u64,
    pub val: u64,
    pub max_plies: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource { train: 2000, val: 100, max_plies: 120 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub orientation_search: bool,
    pub orientation_scope: OrientationScope,
    pub phases: PhaseBoundaries,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        RunConfig::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Keys given in `text` override the defaults one by one, so a partial
    /// `[model]` section still starts from the desk model.
    pub fn from_toml(text: &str) -> anyhow::Result<RunConfig> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(RunConfig::default())?;
        overlay(&mut merged, user);
        Ok(merged.try_into()?)
    }

    /// The effective config as JSON, embedded in every artifact.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// A user table carrying a `kind` tag selects another enum variant, so it
/// replaces the default instead of merging into it.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("seed = 1\n[train]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[model]\ninput_resolution = 64\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainRecipe::classification().batch_size);
        assert_eq!(cfg.model, ModelConfig { input_resolution: 64, ..ModelConfig::desk(128) });
        let cfg = RunConfig::from_toml("[model.head_layout]\nkind = \"global_pool\"\n").unwrap();
        assert_eq!(cfg.model.head_layout, chessrec_core::model::HeadLayout::GlobalPool);
    }
}
