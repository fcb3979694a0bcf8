//! The single JSON document that drives every command.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use posenet_core::data::TaskSpec;
use posenet_core::layers::AttentionMode;
use posenet_core::tensor::GradCheckOptions;
use posenet_core::training::TrainConfig;
use posenet_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A config file that cannot be read, parsed or validated.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Mechanism switches layered over the model section. Unset fields leave
/// the model section untouched; a resolved config has every field set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub encoder_pe_per_layer: Option<bool>,
    /// Off forces every encoder box to dilation 1; on restores `[1, 2]`
    /// when the model section has no dilation above 1.
    pub encoder_dilation: Option<bool>,
    pub encoder_self_attention: Option<bool>,
    pub decoder_self_attention: Option<bool>,
    pub decoder_pe_once: Option<bool>,
    pub heads: Option<usize>,
    pub attention_mode: Option<AttentionMode>,
}

impl Toggles {
    pub fn apply(&self, model: &mut ModelConfig) {
        if let Some(on) = self.encoder_pe_per_layer {
            model.encoder.pe_per_layer = on;
        }
        match self.encoder_dilation {
            Some(false) => model.encoder.dilations = [1, 1],
            Some(true) if model.encoder.dilations == [1, 1] => model.encoder.dilations = [1, 2],
            _ => {}
        }
        if let Some(on) = self.encoder_self_attention {
            model.encoder.self_attention = on;
        }
        if let Some(on) = self.decoder_self_attention {
            model.decoder.self_attention = on;
        }
        if let Some(on) = self.decoder_pe_once {
            model.decoder.apply_pe_once = on;
        }
        if let Some(h) = self.heads {
            model.encoder.attention.heads = h;
            model.decoder.attention.heads = h;
        }
        if let Some(mode) = self.attention_mode {
            model.encoder.attention.mode = mode;
            model.decoder.attention.mode = mode;
        }
    }

    /// Fully specified toggles describing `model`. The shared attention
    /// fields are left unset when encoder and decoder differ.
    pub fn describe(model: &ModelConfig) -> Self {
        let (ea, da) = (&model.encoder.attention, &model.decoder.attention);
        Self {
            encoder_pe_per_layer: Some(model.encoder.pe_per_layer),
            encoder_dilation: Some(model.encoder.dilations != [1, 1]),
            encoder_self_attention: Some(model.encoder.self_attention),
            decoder_self_attention: Some(model.decoder.self_attention),
            decoder_pe_once: Some(model.decoder.apply_pe_once),
            heads: (ea.heads == da.heads).then_some(ea.heads),
            attention_mode: (ea.mode == da.mode).then_some(ea.mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Toggle name → values; every combination is one run.
    pub grid: IndexMap<String, Vec<Value>>,
    /// Training steps per run; `None` keeps `train.train_steps`.
    pub train_steps: Option<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let both = vec![Value::Bool(true), Value::Bool(false)];
        let mut grid = IndexMap::new();
        grid.insert("encoder_pe_per_layer".to_string(), both.clone());
        grid.insert("encoder_dilation".to_string(), both);
        Self {
            grid,
            train_steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let d = GradCheckOptions::default();
        Self {
            step: d.step,
            tolerance: d.tolerance,
            floor: d.floor,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn options(&self) -> GradCheckOptions {
        GradCheckOptions {
            step: self.step,
            tolerance: self.tolerance,
            floor: self.floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub toggles: Toggles,
    pub ablation: AblationConfig,
    pub gradcheck: GradCheckConfig,
    /// Training examples written by `gen-data`.
    pub corpus_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            toggles: Toggles::default(),
            ablation: AblationConfig::default(),
            gradcheck: GradCheckConfig::default(),
            corpus_examples: 1000,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the seed override and the toggles, then validates. The
    /// result is a fixed point: resolving it again changes nothing.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, ConfigError> {
        if let Some(seed) = seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.task.seed = seed;
        }
        self.toggles.apply(&mut self.model);
        self.toggles = Toggles::describe(&self.model);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: posenet_core::Error| ConfigError(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.task
            .validate(self.model.vocab_size, self.model.max_length)
            .map_err(wrap)?;
        if self.ablation.grid.values().any(Vec::is_empty) {
            return Err(ConfigError("ablation grid entries need at least one value".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"toggles": {"encoder_pe": true}}"#).is_err());
        assert!(RunConfig::parse(r#"{"model": {"depth": 32}}"#).is_ok());
    }

    #[test]
    fn resolution_is_a_fixed_point() {
        let cfg = RunConfig::parse(r#"{"toggles": {"encoder_dilation": false, "heads": 2}}"#).unwrap();
        let resolved = cfg.resolve(Some(5)).unwrap();
        assert_eq!(resolved.model.encoder.dilations, [1, 1]);
        assert_eq!(resolved.model.decoder.attention.heads, 2);
        assert_eq!(resolved.train.seed, 5);
        let again = RunConfig::parse(&resolved.to_json()).unwrap().resolve(None).unwrap();
        assert_eq!(again, resolved);
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        let cfg = RunConfig::parse(r#"{"model": {"depth": 6}, "toggles": {"heads": 4}}"#).unwrap();
        assert!(cfg.resolve(None).is_err());
        let cfg = RunConfig::parse(r#"{"task": {"max_len": 80}}"#).unwrap();
        assert!(cfg.resolve(None).is_err());
    }
}
