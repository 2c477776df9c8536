//! Run configuration: one TOML tree covering every module, with defaults,
//! file overrides, flag overrides, and per-key provenance tracking.
//!
//! Precedence is flag > file > default. Every value is validated against
//! its module's domain before any work starts.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{MockConfig, PreprocessConfig, BACKEND_EXTERNAL, BACKEND_MOCK};
use crate::encoder::{CLIP_MEAN, CLIP_STD};
use crate::error::{io_err, Error, Result};
use crate::model::DetectorShape;
use crate::scoring::FocalLossConfig;
use crate::text_prior::{PromptStyle, TextPriorConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSettings,
    pub patch_residual: PatchResidualSettings,
    pub adapter: AdapterSettings,
    pub classifier: ClassifierSettings,
    pub text_prior: TextPriorSettings,
    pub scoring: ScoringSettings,
    pub data: DataSettings,
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    /// `mock` or `external`.
    pub backend: String,
    pub resolution: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub mock: MockSettings,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            backend: BACKEND_MOCK.to_string(),
            resolution: 240,
            mean: CLIP_MEAN,
            std: CLIP_STD,
            mock: MockSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub layers: usize,
    pub grid: usize,
    pub patch_dim: usize,
    pub global_dim: usize,
    pub seed: u64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            layers: 3,
            grid: 4,
            patch_dim: 8,
            global_dim: 16,
            seed: 0,
        }
    }
}

/// Which encoder layers feed the patch residual average.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    Named(String),
    Indices(Vec<usize>),
}

impl Default for LayerSelection {
    fn default() -> Self {
        LayerSelection::Named("all".to_string())
    }
}

impl LayerSelection {
    pub fn resolve(&self, layer_count: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelection::Named(name) if name == "all" => Ok((0..layer_count).collect()),
            LayerSelection::Named(other) => Err(Error::Config(format!(
                "patch_residual.layers must be \"all\" or a list of indices, got {other:?}"
            ))),
            LayerSelection::Indices(indices) => {
                if indices.is_empty() {
                    return Err(Error::Config("patch_residual.layers must not be empty".into()));
                }
                let mut seen = std::collections::BTreeSet::new();
                for &i in indices {
                    if i >= layer_count {
                        return Err(Error::Config(format!(
                            "patch_residual layer index {i} out of range (backend has {layer_count})"
                        )));
                    }
                    if !seen.insert(i) {
                        return Err(Error::Config(format!("duplicate patch_residual layer index {i}")));
                    }
                }
                Ok(indices.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchResidualSettings {
    pub layers: LayerSelection,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    /// Hidden width; omit for the default `global_dim / 4`.
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextPriorSettings {
    /// `defect` or `semantic`.
    pub style: String,
    pub temperature: f64,
    pub normalize: bool,
    /// Class label substituted into prompt templates; empty derives it from
    /// the dataset at hand.
    pub class_label: String,
    /// Optional template file overriding the bundled ensemble.
    pub template_file: Option<PathBuf>,
}

impl Default for TextPriorSettings {
    fn default() -> Self {
        Self {
            style: "defect".to_string(),
            temperature: 1.0,
            normalize: true,
            class_label: String::new(),
            template_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSettings {
    pub alpha: f64,
    pub focal: FocalLossConfig,
    pub head: HeadSettings,
}

impl Default for ScoringSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            focal: FocalLossConfig::default(),
            head: HeadSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    pub hidden: Vec<usize>,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Allow prompt selection from the test split (datasets without a train
    /// split).
    pub prompts_from_test: bool,
    pub protocol: ProtocolSettings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    /// `plain`, `one_vs_all`, or `multi_class`.
    pub mode: String,
    /// Category predicate: a class label, a comma list, `even_number`, or
    /// `animal`. Ignored in plain mode.
    pub normal_selector: String,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            mode: "plain".to_string(),
            normal_selector: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub k: usize,
    pub seed: u64,
    /// Only `adam` is supported.
    pub optimizer: String,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 48,
            learning_rate: 1e-3,
            k: 2,
            seed: 0,
            optimizer: "adam".to_string(),
        }
    }
}

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Default => write!(f, "default"),
            Provenance::File => write!(f, "file"),
            Provenance::Flag => write!(f, "flag"),
        }
    }
}

/// A validated [`RunConfig`] plus the provenance of every overridden key.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub config: RunConfig,
    provenance: BTreeMap<String, Provenance>,
}

impl LoadedConfig {
    /// Wrap an existing config (e.g. one restored from a checkpoint) so
    /// flag overrides can still be applied on top.
    pub fn from_config(config: RunConfig) -> Self {
        Self {
            config,
            provenance: BTreeMap::new(),
        }
    }

    /// Defaults merged with an optional TOML file.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut loaded = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e: toml::de::Error| Error::Parse {
                    path: path.to_path_buf(),
                    line: e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0),
                    reason: e.message().to_string(),
                })?;
            let value = toml::Value::Table(table);
            loaded.config = value.clone().try_into().map_err(|e: toml::de::Error| {
                Error::Config(format!("{}: {}", path.display(), e.message()))
            })?;
            collect_keys(&value, String::new(), &mut |key| {
                loaded.provenance.insert(key, Provenance::File);
            });
        }
        Ok(loaded)
    }

    /// Apply one flag override as a dotted key with a TOML-syntax value.
    pub fn set_flag(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut doc: toml::Value = toml::Value::try_from(&self.config)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        // Bare scalars parse as bool/int/float; anything else is a string.
        let parsed = parse_scalar(raw).unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        insert_dotted(&mut doc, &parts, parsed)
            .map_err(|_| Error::Config(format!("{key} does not name a config value")))?;
        self.config = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("--set {key}: {}", e.message())))?;
        self.provenance.insert(key.to_string(), Provenance::Flag);
        Ok(())
    }

    /// Mark a key as flag-provided after mutating `config` directly.
    pub fn mark_flag(&mut self, key: &str) {
        self.provenance.insert(key.to_string(), Provenance::Flag);
    }

    pub fn provenance_of(&self, key: &str) -> Provenance {
        self.provenance
            .get(key)
            .copied()
            .unwrap_or(Provenance::Default)
    }

    /// All non-default keys with their provenance.
    pub fn overridden(&self) -> impl Iterator<Item = (&str, Provenance)> {
        self.provenance.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn insert_dotted(node: &mut toml::Value, parts: &[&str], value: toml::Value) -> Result<()> {
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config("not a table".into()))?;
    match parts {
        [] => Err(Error::Config("empty key".into())),
        [leaf] => {
            table.insert(leaf.to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let next = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            insert_dotted(next, rest, value)
        }
    }
}

fn parse_scalar(raw: &str) -> Option<toml::Value> {
    if let Ok(b) = raw.parse::<bool>() {
        return Some(toml::Value::Boolean(b));
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Some(toml::Value::Integer(i));
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Some(toml::Value::Float(f));
    }
    None
}

fn collect_keys(value: &toml::Value, prefix: String, sink: &mut impl FnMut(String)) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_keys(v, key, sink);
            }
        }
        _ => sink(prefix),
    }
}

impl RunConfig {
    /// Check every value against its domain. Called before any work starts.
    pub fn validate(&self) -> Result<()> {
        match self.encoder.backend.as_str() {
            BACKEND_MOCK | BACKEND_EXTERNAL => {}
            other => {
                return Err(Error::Config(format!(
                    "encoder.backend must be \"mock\" or \"external\", got {other:?}"
                )))
            }
        }
        if self.encoder.resolution == 0 {
            return Err(Error::Config("encoder.resolution must be positive".into()));
        }
        if self.encoder.std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("encoder.std entries must be positive".into()));
        }
        let m = &self.encoder.mock;
        if m.layers == 0 || m.grid == 0 || m.patch_dim == 0 || m.global_dim == 0 {
            return Err(Error::Config("encoder.mock geometry must be positive".into()));
        }
        if let Some(0) = self.adapter.hidden {
            return Err(Error::Config("adapter.hidden must be positive when set".into()));
        }
        if self.classifier.hidden.contains(&0) {
            return Err(Error::Config("classifier.hidden widths must be positive".into()));
        }
        if self.scoring.head.hidden.contains(&0) {
            return Err(Error::Config("scoring.head.hidden widths must be positive".into()));
        }
        PromptStyle::from_str(&self.text_prior.style)?;
        if self.text_prior.temperature <= 0.0 || !self.text_prior.temperature.is_finite() {
            return Err(Error::Config("text_prior.temperature must be positive".into()));
        }
        if !(self.scoring.alpha >= 0.0 && self.scoring.alpha.is_finite()) {
            return Err(Error::Config("scoring.alpha must be nonnegative".into()));
        }
        self.scoring.focal.validate()?;
        crate::data::ProtocolMode::from_str(&self.data.protocol.mode)?;
        if self.data.protocol.mode != "plain" && self.data.protocol.normal_selector.is_empty() {
            return Err(Error::Config(format!(
                "data.protocol.mode {:?} requires data.protocol.normal_selector",
                self.data.protocol.mode
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be nonnegative".into()));
        }
        if self.train.k == 0 {
            return Err(Error::Config("train.k must be at least 1".into()));
        }
        if self.train.optimizer != "adam" {
            return Err(Error::Config(format!(
                "train.optimizer must be \"adam\", got {:?}",
                self.train.optimizer
            )));
        }
        // Layer selection indices are validated against the backend at
        // build time; check only the literal form here.
        if let LayerSelection::Named(name) = &self.patch_residual.layers {
            if name != "all" {
                return Err(Error::Config(format!(
                    "patch_residual.layers must be \"all\" or a list of indices, got {name:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            resolution: self.encoder.resolution,
            mean: self.encoder.mean,
            std: self.encoder.std,
        }
    }

    pub fn mock_config(&self) -> MockConfig {
        MockConfig {
            layers: self.encoder.mock.layers,
            grid: self.encoder.mock.grid,
            patch_dim: self.encoder.mock.patch_dim,
            global_dim: self.encoder.mock.global_dim,
            seed: self.encoder.mock.seed,
            resolution: self.encoder.resolution,
        }
    }

    pub fn prompt_style(&self) -> Result<PromptStyle> {
        PromptStyle::from_str(&self.text_prior.style)
    }

    pub fn text_prior_config(&self) -> TextPriorConfig {
        TextPriorConfig {
            temperature: self.text_prior.temperature,
            normalize: self.text_prior.normalize,
        }
    }

    pub fn protocol_spec(&self) -> Result<crate::data::ProtocolSpec> {
        let mode = crate::data::ProtocolMode::from_str(&self.data.protocol.mode)?;
        let normal_selector = if self.data.protocol.normal_selector.is_empty() {
            None
        } else {
            Some(crate::data::NormalSelector::from_str(
                &self.data.protocol.normal_selector,
            )?)
        };
        Ok(crate::data::ProtocolSpec {
            mode,
            normal_selector,
        })
    }

    pub fn detector_shape(&self, global_dim: usize, patch_count: usize) -> DetectorShape {
        DetectorShape {
            global_dim,
            patch_count,
            adapter_hidden: self.adapter.hidden,
            classifier_hidden: self.classifier.hidden.clone(),
            head_hidden: self.scoring.head.hidden.clone(),
            alpha: self.scoring.alpha,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_overrides_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[train]\nk = 8\n[scoring]\nalpha = 0.5\n[patch_residual]\nlayers = [0, 2]\n",
        )
        .unwrap();
        let loaded = LoadedConfig::load(Some(&path)).unwrap();
        assert_eq!(loaded.config.train.k, 8);
        assert_eq!(loaded.config.scoring.alpha, 0.5);
        assert_eq!(
            loaded.config.patch_residual.layers,
            LayerSelection::Indices(vec![0, 2])
        );
        // Untouched values keep defaults.
        assert_eq!(loaded.config.train.epochs, 10);
        assert_eq!(loaded.config.train.batch_size, 48);
        assert_eq!(loaded.provenance_of("train.k"), Provenance::File);
        assert_eq!(loaded.provenance_of("train.epochs"), Provenance::Default);
    }

    #[test]
    fn flag_overrides_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nk = 4\n").unwrap();
        let mut loaded = LoadedConfig::load(Some(&path)).unwrap();
        loaded.set_flag("train.k", "8").unwrap();
        loaded.set_flag("text_prior.style", "semantic").unwrap();
        assert_eq!(loaded.config.train.k, 8);
        assert_eq!(loaded.config.text_prior.style, "semantic");
        assert_eq!(loaded.provenance_of("train.k"), Provenance::Flag);
        loaded.config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nnot_a_key = 1\n").unwrap();
        assert!(LoadedConfig::load(Some(&path)).is_err());
    }

    #[test]
    fn validation_catches_domain_errors() {
        let mut cfg = RunConfig::default();
        cfg.train.k = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.encoder.backend = "quantum".into();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.text_prior.style = "poetic".into();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.scoring.focal.pos_weight = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.protocol.mode = "one_vs_all".into();
        assert!(cfg.validate().is_err(), "selector required for one_vs_all");
        cfg.data.protocol.normal_selector = "0".into();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn layer_selection_resolution() {
        assert_eq!(LayerSelection::default().resolve(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            LayerSelection::Indices(vec![0, 2]).resolve(3).unwrap(),
            vec![0, 2]
        );
        assert!(LayerSelection::Indices(vec![3]).resolve(3).is_err());
        assert!(LayerSelection::Indices(vec![]).resolve(3).is_err());
        assert!(LayerSelection::Indices(vec![1, 1]).resolve(3).is_err());
        assert!(LayerSelection::Named("top".into()).resolve(3).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
