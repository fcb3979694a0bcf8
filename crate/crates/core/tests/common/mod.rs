#![allow(dead_code)]

use posenet_core::layers::{AttentionConfig, AttentionMode};
use posenet_core::tensor::{Mask, Tensor};
use posenet_core::{DecoderConfig, EncoderConfig, ModelConfig};
use rand::Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn pad_mask(lengths: &[usize], width: usize) -> Mask {
    let data = lengths.iter().flat_map(|&l| (0..width).map(move |j| j < l)).collect();
    Mask::new(vec![lengths.len(), width], data).unwrap()
}

/// Population layer norm with unit gain and zero bias.
pub fn layer_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter().map(|x| (x - mean) / (var + 1e-6).sqrt()).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// A small random architecture: depth 4 or 8, one or two layers per stack.
pub fn random_model_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let depth = [4, 8][rng.gen_range(0..2)];
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let mode = if rng.gen_bool(0.5) {
        AttentionMode::Plain
    } else {
        AttentionMode::Projected
    };
    let attention = AttentionConfig { heads, mode };
    ModelConfig {
        vocab_size: rng.gen_range(6..12),
        depth,
        max_length: 12,
        encoder: EncoderConfig {
            num_layers: rng.gen_range(1..3),
            kernel: rng.gen_range(2..5),
            dilations: [1, rng.gen_range(1..4)],
            pe_per_layer: rng.gen_bool(0.7),
            self_attention: rng.gen_bool(0.7),
            attention,
            ffn_hidden: Some(2 * depth),
            ffn_layers: rng.gen_range(1..3),
        },
        decoder: DecoderConfig {
            num_layers: rng.gen_range(1..3),
            kernel: rng.gen_range(2..5),
            self_attention: rng.gen_bool(0.7),
            apply_pe_once: rng.gen_bool(0.7),
            attention,
            ffn_hidden: Some(2 * depth),
            ffn_layers: rng.gen_range(1..3),
        },
        tie_embeddings: rng.gen_bool(0.3),
        seed: rng.gen(),
    }
}

pub fn random_ids<R: Rng>(rng: &mut R, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}
