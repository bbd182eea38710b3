#![allow(dead_code)]

use mabsa_core::corpus::{AspectLabel, Sentiment, Span};
use mabsa_core::graph::softmax_slice;
use mabsa_core::model::{ModelConfig, ModelInput};
use mabsa_core::trainer::Prepared;
use mabsa_core::vocab::Special;
use mabsa_core::Tensor;
use rand::Rng;

pub const ORDINARY: usize = 12;

pub fn tiny_config(hidden: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        hidden,
        encoder_layers: layers,
        decoder_layers: layers,
        heads: 2,
        ffn: 2 * hidden,
        regions: 3,
        classes: 4,
        feature_dim: 5,
        vocab_size: Special::COUNT + ORDINARY,
        max_positions: 40,
        max_generation_len: 16,
        ..ModelConfig::default()
    }
}

pub fn random_tokens<R: Rng>(rng: &mut R, t: usize) -> Vec<usize> {
    (0..t).map(|_| rng.gen_range(Special::COUNT..Special::COUNT + ORDINARY)).collect()
}

pub fn random_input<R: Rng>(rng: &mut R, cfg: &ModelConfig, t: usize) -> ModelInput {
    ModelInput { token_ids: random_tokens(rng, t), regions: Tensor::uniform(&[cfg.regions, cfg.feature_dim], 1.0, rng) }
}

pub fn random_dist<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    softmax_slice(&logits)
}

/// A fully supervised example with `t` tokens: aspects (1,2,POS) and
/// (t,t,NEG), opinion (3,3).
pub fn supervised<R: Rng>(rng: &mut R, cfg: &ModelConfig, t: usize) -> Prepared {
    assert!(t >= 4);
    let input = random_input(rng, cfg, t);
    let dists: Vec<f64> = (0..cfg.regions).flat_map(|_| random_dist(rng, cfg.classes)).collect();
    Prepared {
        token_ids: input.token_ids,
        regions: input.regions,
        class_dists: Some(Tensor::matrix(cfg.regions, cfg.classes, dists).unwrap()),
        aspects: Some(vec![
            AspectLabel { span: Span::new(1, 2), sentiment: Some(Sentiment::Pos) },
            AspectLabel { span: Span::new(t, t), sentiment: Some(Sentiment::Neg) },
        ]),
        opinions: Some(vec![Span::new(3, 3)]),
        sentiment: Some(Sentiment::Neu),
        anp_ids: Some(random_tokens(rng, 2)),
    }
}
