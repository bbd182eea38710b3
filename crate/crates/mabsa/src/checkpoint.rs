//! Binary checkpoint container.
//!
//! ```text
//! magic      8 bytes  "MABSACKP"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON {config, vocab, anps, tensors: [{name, shape}]}
//! data       f64 LE, tensors concatenated in header order
//! ```
//!
//! Loading checks the magic, the version, that the data length matches the
//! declared shapes exactly, and that every tensor name and shape matches
//! what the embedded model config implies.

use std::fs;
use std::path::Path;

use mabsa_core::model::{ModelConfig, ModelParams};
use mabsa_core::vocab::Vocabulary;
use mabsa_core::weak_label::AnpVocabulary;
use mabsa_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::write_with;

const MAGIC: &[u8; 8] = b"MABSACKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    anps: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus the tables needed to feed them text.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub anps: Option<AnpVocabulary>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.params.config().clone(),
            vocab: self.vocab.tokens().to_vec(),
            anps: self.anps.as_ref().map(|a| a.entries().to_vec()),
            tensors: self
                .params
                .named()
                .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| AppError::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let data = &body[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != 8 * total {
            return Err(bad(format!("{} data bytes, shapes declare {}", data.len(), 8 * total)));
        }
        let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.shape.iter().product();
            let t = Tensor::new(e.shape, values.by_ref().take(n).collect())?;
            named.push((e.name, t));
        }
        let vocab = Vocabulary::from_lines(&header.vocab)?;
        if vocab.len() != header.config.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} entries, model config declares {}",
                vocab.len(),
                header.config.vocab_size
            )));
        }
        let params = ModelParams::from_named(header.config, named)?;
        let anps = header.anps.map(AnpVocabulary::new).transpose()?;
        Ok(Self { params, vocab, anps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_with(path, |w| std::io::Write::write_all(w, &bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
