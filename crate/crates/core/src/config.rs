//! Architectural hyperparameters.

use serde::{Deserialize, Serialize};

use crate::data::RESERVED_IDS;
use crate::error::{Error, Result};
use crate::layers::AttentionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub kernel: usize,
    /// Dilations of the two convolution boxes of every layer.
    pub dilations: [usize; 2],
    /// Add the timing signal at the start of every layer.
    pub pe_per_layer: bool,
    pub self_attention: bool,
    pub attention: AttentionConfig,
    /// Hidden width of the feed-forward net; `None` means `4·depth`.
    pub ffn_hidden: Option<usize>,
    pub ffn_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            kernel: 3,
            dilations: [1, 2],
            pe_per_layer: true,
            self_attention: true,
            attention: AttentionConfig::default(),
            ffn_hidden: None,
            ffn_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub kernel: usize,
    pub self_attention: bool,
    /// Add the timing signal once at the bottom of the stack (never per layer).
    pub apply_pe_once: bool,
    pub attention: AttentionConfig,
    pub ffn_hidden: Option<usize>,
    pub ffn_layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 5,
            kernel: 3,
            self_attention: true,
            apply_pe_once: true,
            attention: AttentionConfig::default(),
            ffn_hidden: None,
            ffn_layers: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub depth: usize,
    pub max_length: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Share the source embedding table with the decoder input.
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            depth: 64,
            max_length: 64,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            tie_embeddings: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_ffn_hidden(&self) -> usize {
        self.encoder.ffn_hidden.unwrap_or(4 * self.depth)
    }

    pub fn decoder_ffn_hidden(&self) -> usize {
        self.decoder.ffn_hidden.unwrap_or(4 * self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size < RESERVED_IDS {
            return bad(format!(
                "vocab_size must be at least {RESERVED_IDS}, got {}",
                self.vocab_size
            ));
        }
        if self.depth == 0 || !self.depth.is_multiple_of(2) {
            return bad(format!("depth must be even and positive, got {}", self.depth));
        }
        if self.max_length < 2 {
            return bad(format!("max_length must be at least 2, got {}", self.max_length));
        }
        let enc = &self.encoder;
        if enc.num_layers == 0 || enc.kernel == 0 || enc.ffn_layers == 0 {
            return bad("encoder layers, kernel and ffn_layers must be positive".into());
        }
        if enc.dilations.contains(&0) {
            return bad("encoder dilations must be at least 1".into());
        }
        let dec = &self.decoder;
        if dec.num_layers == 0 || dec.kernel == 0 || dec.ffn_layers == 0 {
            return bad("decoder layers, kernel and ffn_layers must be positive".into());
        }
        if self.encoder_ffn_hidden() == 0 || self.decoder_ffn_hidden() == 0 {
            return bad("ffn_hidden must be positive".into());
        }
        enc.attention.validate(self.depth)?;
        dec.attention.validate(self.depth)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_depths() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder.num_layers, 6);
        assert_eq!(cfg.decoder.num_layers, 5);
        assert_eq!(cfg.encoder.dilations, [1, 2]);
        assert_eq!(cfg.encoder_ffn_hidden(), 256);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ModelConfig {
            depth: 7,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.depth = 8;
        cfg.encoder.attention.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.encoder.attention.heads = 2;
        cfg.vocab_size = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_rejects_unknown_keys_and_fills_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"depth": 16, "encoder": {"num_layers": 2}}"#).unwrap();
        assert_eq!(cfg.depth, 16);
        assert_eq!(cfg.encoder.num_layers, 2);
        assert_eq!(cfg.encoder.kernel, 3);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"dept": 16}"#).is_err());
    }
}
