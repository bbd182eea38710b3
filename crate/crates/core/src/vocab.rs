//! Word-level tokenizer, vocabulary and the special-token registry.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Every special token, in registry order. The registry order is the id
/// order: `Special::Img` is id 0, `Special::Unk` is the last special id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Special {
    Img,
    ImgEnd,
    Bos,
    Eos,
    Mask,
    Mlm,
    Aoe,
    Mrm,
    Aog,
    Msp,
    Aesc,
    Mate,
    Masc,
    Zero,
    Feat,
    Sep,
    Pos,
    Neu,
    Neg,
    Unk,
}

impl Special {
    pub const ALL: [Special; 20] = [
        Special::Img,
        Special::ImgEnd,
        Special::Bos,
        Special::Eos,
        Special::Mask,
        Special::Mlm,
        Special::Aoe,
        Special::Mrm,
        Special::Aog,
        Special::Msp,
        Special::Aesc,
        Special::Mate,
        Special::Masc,
        Special::Zero,
        Special::Feat,
        Special::Sep,
        Special::Pos,
        Special::Neu,
        Special::Neg,
        Special::Unk,
    ];

    pub const COUNT: usize = Self::ALL.len();

    /// Vocabulary id; specials occupy `0..Special::COUNT`.
    pub const fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Special> {
        Self::ALL.get(id).copied()
    }

    /// Surface form used in vocabulary files.
    pub const fn surface(self) -> &'static str {
        match self {
            Special::Img => "<img>",
            Special::ImgEnd => "</img>",
            Special::Bos => "<bos>",
            Special::Eos => "<eos>",
            Special::Mask => "<mask>",
            Special::Mlm => "<mlm>",
            Special::Aoe => "<aoe>",
            Special::Mrm => "<mrm>",
            Special::Aog => "<aog>",
            Special::Msp => "<msp>",
            Special::Aesc => "<aesc>",
            Special::Mate => "<mate>",
            Special::Masc => "<masc>",
            Special::Zero => "<zero>",
            Special::Feat => "<feat>",
            Special::Sep => "<sep>",
            Special::Pos => "<POS>",
            Special::Neu => "<NEU>",
            Special::Neg => "<NEG>",
            Special::Unk => "<unk>",
        }
    }
}

/// Tokenized text: vocabulary ids aligned with the original surface tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub surface: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface.is_empty()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits on whitespace, then breaks every other non-word character off as
/// its own token. `"good!"` becomes `["good", "!"]`.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_word_char(c) {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(core::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Surface tokenization without ids; errors on text with no tokens.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let toks = split_words(text);
    if toks.is_empty() {
        bail!(Validation, "text has no tokens");
    }
    Ok(toks)
}

/// Bijective token/id table. Specials come first in registry order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds from tokenized sentences: specials, then every token seen at
    /// least `min_freq` times by descending frequency, ties lexicographic.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            bail!(Validation, "cannot build a vocabulary from an empty corpus");
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for sent in corpus {
            for tok in sent {
                *freq.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Specials followed by `tokens` in the given order; duplicates and
    /// special surfaces among `tokens` are skipped.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut v = Vocabulary { to_id: BTreeMap::new(), tokens: Vec::new() };
        for s in Special::ALL {
            v.insert(s.surface().to_string());
        }
        for t in tokens {
            if !v.to_id.contains_key(&t) {
                v.insert(t);
            }
        }
        Ok(v)
    }

    /// Reads the one-token-per-line listing where line number is the id.
    /// The specials must lead in registry order.
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        for (i, s) in Special::ALL.iter().enumerate() {
            match lines.get(i) {
                Some(l) if l.as_ref() == s.surface() => {}
                other => bail!(
                    Validation,
                    "vocabulary line {} must be {}, found {:?}",
                    i + 1,
                    s.surface(),
                    other.map(|l| l.as_ref())
                ),
            }
        }
        let mut v = Vocabulary { to_id: BTreeMap::new(), tokens: Vec::new() };
        for (i, l) in lines.iter().enumerate() {
            let l = l.as_ref();
            if l.is_empty() || v.to_id.contains_key(l) {
                bail!(Validation, "vocabulary line {} is empty or duplicated: {:?}", i + 1, l);
            }
            v.insert(l.to_string());
        }
        Ok(v)
    }

    fn insert(&mut self, tok: String) {
        self.to_id.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.to_id.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Out-of-vocabulary tokens map to `<unk>`.
    pub fn encode_tokens<S: AsRef<str>>(&self, toks: &[S]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t.as_ref()).unwrap_or(Special::Unk.id())).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| match self.token(i) {
                Some(t) => Ok(t.to_string()),
                None => bail!(Index, "id {} outside vocabulary of {}", i, self.len()),
            })
            .collect()
    }

    /// Tokenizes and encodes raw text.
    pub fn encode_text(&self, text: &str) -> Result<TokenSequence> {
        let surface = tokenize(text)?;
        Ok(TokenSequence { ids: self.encode_tokens(&surface), surface })
    }
}
