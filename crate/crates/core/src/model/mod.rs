//! Shared transformer encoder-decoder, its parameters and task heads.

mod generate;
mod net;

pub use generate::{generate, generate_pointer, generate_tokens, Generation, GenerationOutput};
pub use net::{CandidateSet, EncoderOutput, Model, ModelInput};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Regions per image.
    pub regions: usize,
    /// Detector semantic classes predicted by the masked-region head.
    pub classes: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Longest encoder or decoder sequence.
    pub max_positions: usize,
    pub max_generation_len: usize,
    /// Whether region slots receive position embeddings.
    pub region_positions: bool,
    /// Only greedy decoding (width 1) is implemented.
    pub beam_width: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    /// Base-size architecture: six encoder and decoder layers, hidden 768.
    fn default() -> Self {
        Self {
            hidden: 768,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 12,
            ffn: 3072,
            regions: 36,
            classes: 1601,
            feature_dim: 2048,
            vocab_size: 0,
            max_positions: 512,
            max_generation_len: 64,
            region_positions: true,
            beam_width: 1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Small architecture that trains on a CPU core in seconds to minutes.
    pub fn desk(vocab_size: usize, regions: usize, classes: usize, feature_dim: usize) -> Self {
        Self {
            hidden: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn: 64,
            regions,
            classes,
            feature_dim,
            vocab_size,
            max_positions: 128,
            max_generation_len: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            bail!(Config, "hidden size {} is not divisible by {} heads", self.hidden, self.heads);
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            bail!(Config, "encoder and decoder need at least one layer");
        }
        for (name, v) in [
            ("ffn", self.ffn),
            ("classes", self.classes),
            ("feature_dim", self.feature_dim),
            ("max_positions", self.max_positions),
            ("max_generation_len", self.max_generation_len),
        ] {
            if v == 0 {
                bail!(Config, "{name} must be at least 1");
            }
        }
        if self.vocab_size <= crate::vocab::Special::COUNT {
            bail!(Config, "vocab_size {} leaves no room for ordinary tokens", self.vocab_size);
        }
        if self.beam_width != 1 {
            bail!(Config, "beam width {} requested; only greedy decoding is supported", self.beam_width);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncLayerIdx {
    pub attn: AttnIdx,
    pub ln1: LnIdx,
    pub ffn: MlpIdx,
    pub ln2: LnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: LnIdx,
    pub cross: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: MlpIdx,
    pub ln3: LnIdx,
}

/// Index of every parameter tensor inside [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    /// Shared by the input embedding and the language-model head.
    pub token_embedding: usize,
    pub encoder_positions: usize,
    pub decoder_positions: usize,
    pub modality: usize,
    pub encoder_embed_ln: LnIdx,
    pub decoder_embed_ln: LnIdx,
    pub projection_weight: usize,
    pub projection_bias: usize,
    pub encoder: Vec<EncLayerIdx>,
    pub decoder: Vec<DecLayerIdx>,
    pub mrm_head: MlpIdx,
    pub msp_head: MlpIdx,
}

enum Init {
    /// Uniform in ±1/√fan_in.
    Scaled(usize),
    Zeros,
    Ones,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Scaled(fan_in) => Tensor::uniform(shape, 1.0 / math::sqrt(fan_in as f64), self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let lin = |b: &mut Self, n: &str| {
            (
                b.add(format!("{prefix}.{n}.weight"), &[d, d], Init::Scaled(d)),
                b.add(format!("{prefix}.{n}.bias"), &[d], Init::Zeros),
            )
        };
        let (wq, bq) = lin(self, "query");
        let (wk, bk) = lin(self, "key");
        let (wv, bv) = lin(self, "value");
        let (wo, bo) = lin(self, "out");
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn mlp(&mut self, prefix: &str, din: usize, dh: usize, dout: usize) -> MlpIdx {
        MlpIdx {
            w1: self.add(format!("{prefix}.fc1.weight"), &[din, dh], Init::Scaled(din)),
            b1: self.add(format!("{prefix}.fc1.bias"), &[dh], Init::Zeros),
            w2: self.add(format!("{prefix}.fc2.weight"), &[dh, dout], Init::Scaled(dh)),
            b2: self.add(format!("{prefix}.fc2.bias"), &[dout], Init::Zeros),
        }
    }
}

/// Every learnable tensor, addressed by name and by stable index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub(crate) layout: Layout,
}

impl ModelParams {
    /// Fresh parameters; weights uniform in ±1/√fan_in, layer-norm gains 1,
    /// biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), rng: &mut rng };
        let token_embedding = b.add("embed.tokens".into(), &[config.vocab_size, d], Init::Scaled(d));
        let encoder_positions = b.add("embed.encoder_positions".into(), &[config.max_positions, d], Init::Scaled(d));
        let decoder_positions = b.add("embed.decoder_positions".into(), &[config.max_positions, d], Init::Scaled(d));
        let modality = b.add("embed.modality".into(), &[2, d], Init::Scaled(d));
        let encoder_embed_ln = b.ln("embed.encoder_ln", d);
        let decoder_embed_ln = b.ln("embed.decoder_ln", d);
        let projection_weight =
            b.add("region_projection.weight".into(), &[config.feature_dim, d], Init::Scaled(config.feature_dim));
        let projection_bias = b.add("region_projection.bias".into(), &[d], Init::Zeros);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncLayerIdx {
                    attn: b.attn(&format!("{p}.self_attn"), d),
                    ln1: b.ln(&format!("{p}.self_attn_ln"), d),
                    ffn: b.mlp(&format!("{p}.ffn"), d, config.ffn, d),
                    ln2: b.ln(&format!("{p}.ffn_ln"), d),
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecLayerIdx {
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    ln1: b.ln(&format!("{p}.self_attn_ln"), d),
                    cross: b.attn(&format!("{p}.cross_attn"), d),
                    ln2: b.ln(&format!("{p}.cross_attn_ln"), d),
                    ffn: b.mlp(&format!("{p}.ffn"), d, config.ffn, d),
                    ln3: b.ln(&format!("{p}.ffn_ln"), d),
                }
            })
            .collect();
        let mrm_head = b.mlp("mrm_head", d, d, config.classes);
        let msp_head = b.mlp("msp_head", d, d, 3);
        let layout = Layout {
            token_embedding,
            encoder_positions,
            decoder_positions,
            modality,
            encoder_embed_ln,
            decoder_embed_ln,
            projection_weight,
            projection_bias,
            encoder,
            decoder,
            mrm_head,
            msp_head,
        };
        let (names, tensors) = (b.names, b.tensors);
        Ok(Self { config, names, tensors, layout })
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint), checking
    /// that every name and shape matches what `config` implies.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut fresh = Self::init(config, 0)?;
        if named.len() != fresh.tensors.len() {
            bail!(Validation, "expected {} tensors, found {}", fresh.tensors.len(), named.len());
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != fresh.names[i] {
                bail!(Validation, "tensor {} is {:?}, expected {:?}", i, name, fresh.names[i]);
            }
            if t.shape() != fresh.tensors[i].shape() {
                bail!(
                    Dimension,
                    "tensor {:?} has shape {:?}, config implies {:?}",
                    name,
                    t.shape(),
                    fresh.tensors[i].shape()
                );
            }
            if !t.is_finite() {
                bail!(Validation, "tensor {:?} holds non-finite values", name);
            }
            fresh.tensors[i] = t;
        }
        Ok(fresh)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// The one table used both to embed tokens and as the LM output layer.
    pub fn token_embedding(&self) -> &Tensor {
        &self.tensors[self.layout.token_embedding]
    }

    pub fn token_embedding_mut(&mut self) -> &mut Tensor {
        &mut self.tensors[self.layout.token_embedding]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
