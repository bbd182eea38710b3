//! Weak supervision: opinion lexicon and entity gazetteer matching, and
//! adjective-noun pair selection from a detector distribution.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{AspectLabel, MultimodalExample, Sentiment, Span};
use crate::error::{bail, Result};
use crate::vocab::split_words;

/// Longest phrase, in tokens, a lexicon entry may have.
pub const MAX_LEXICON_PHRASE: usize = 3;

/// Lowercased opinion phrases (up to three tokens) with polarity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpinionLexicon {
    entries: BTreeMap<Vec<String>, Sentiment>,
}

impl OpinionLexicon {
    pub fn new<'a, I: IntoIterator<Item = (&'a str, Sentiment)>>(entries: I) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (phrase, pol) in entries {
            let key: Vec<String> = split_words(&phrase.to_lowercase());
            if key.is_empty() {
                bail!(Validation, "empty lexicon entry");
            }
            if key.len() > MAX_LEXICON_PHRASE {
                bail!(Validation, "lexicon entry {:?} longer than {} tokens", phrase, MAX_LEXICON_PHRASE);
            }
            map.insert(key, pol);
        }
        Ok(Self { entries: map })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn polarity(&self, phrase: &str) -> Option<Sentiment> {
        self.entries.get(&split_words(&phrase.to_lowercase())).copied()
    }

    /// Entries as (space-joined phrase, polarity), sorted by phrase.
    pub fn entries(&self) -> impl Iterator<Item = (String, Sentiment)> + '_ {
        self.entries.iter().map(|(k, v)| (k.join(" "), *v))
    }
}

/// Cased entity phrases standing in for a named-entity recognizer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AspectGazetteer {
    phrases: BTreeSet<Vec<String>>,
}

impl AspectGazetteer {
    pub fn new<S: AsRef<str>, I: IntoIterator<Item = S>>(phrases: I) -> Result<Self> {
        let mut set = BTreeSet::new();
        for p in phrases {
            let key = split_words(p.as_ref());
            if key.is_empty() {
                bail!(Validation, "empty gazetteer phrase");
            }
            set.insert(key);
        }
        Ok(Self { phrases: set })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.phrases.contains(&split_words(phrase))
    }

    pub fn phrases(&self) -> impl Iterator<Item = String> + '_ {
        self.phrases.iter().map(|p| p.join(" "))
    }
}

/// Ordered adjective-noun pairs; the index of an entry is its class id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnpVocabulary {
    entries: Vec<String>,
}

impl AnpVocabulary {
    pub fn new(entries: Vec<String>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if split_words(e).len() < 2 {
                bail!(Validation, "ANP entry {} ({:?}) needs an adjective and a noun", i, e);
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

/// Token strings of the selected pair; the decoder target appends `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnpTarget {
    pub index: usize,
    pub tokens: Vec<String>,
}

fn longest_match(tokens: &[String], max_len: usize, mut hit: impl FnMut(&[String]) -> bool) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = 0;
        for len in (1..=max_len.min(tokens.len() - i)).rev() {
            if hit(&tokens[i..i + len]) {
                matched = len;
                break;
            }
        }
        if matched > 0 {
            spans.push(Span::new(i + 1, i + matched));
            i += matched;
        } else {
            i += 1;
        }
    }
    spans
}

/// Left-to-right, longest-first, case-insensitive lexicon scan.
pub fn extract_opinions<S: AsRef<str>>(tokens: &[S], lexicon: &OpinionLexicon) -> Vec<Span> {
    let lowered: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
    longest_match(&lowered, MAX_LEXICON_PHRASE, |w| lexicon.entries.contains_key(w))
}

/// Same scan as [`extract_opinions`] but case-sensitive.
pub fn extract_aspects<S: AsRef<str>>(tokens: &[S], gazetteer: &AspectGazetteer) -> Vec<Span> {
    let toks: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
    let max_len = gazetteer.phrases.iter().map(Vec::len).max().unwrap_or(0);
    longest_match(&toks, max_len, |w| gazetteer.phrases.contains(w))
}

/// Argmax of the detector distribution, lowest index on ties.
pub fn select_anp(dist: &[f64], anps: &AnpVocabulary) -> Result<AnpTarget> {
    if dist.len() != anps.len() {
        bail!(Dimension, "ANP distribution has {} entries for {} pairs", dist.len(), anps.len());
    }
    if dist.is_empty() {
        bail!(Dimension, "empty ANP vocabulary");
    }
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    Ok(AnpTarget { index: best, tokens: split_words(&anps.entries[best]) })
}

/// Fills `aspects` (without sentiment) and `opinions` from the gazetteer and
/// lexicon when the example lacks them; fields already present are kept.
/// Returns whether anything was filled.
pub fn annotate(
    example: &mut MultimodalExample,
    lexicon: &OpinionLexicon,
    gazetteer: &AspectGazetteer,
) -> Result<bool> {
    if example.aspects.is_some() && example.opinions.is_some() {
        return Ok(false);
    }
    let tokens = example.tokens()?;
    if example.aspects.is_none() {
        let spans = extract_aspects(&tokens, gazetteer);
        example.aspects = Some(spans.into_iter().map(|span| AspectLabel { span, sentiment: None }).collect());
    }
    if example.opinions.is_none() {
        example.opinions = Some(extract_opinions(&tokens, lexicon));
    }
    Ok(true)
}
