//! Multimodal records, their validation, seeded splitting and a synthetic
//! corpus generator with planted labels.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::features::RegionFeature;
use crate::math;
use crate::vocab::{tokenize, Special};
use crate::weak_label::{AnpVocabulary, AspectGazetteer, OpinionLexicon};

const DIST_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sentiment {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "NEG")]
    Neg,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Pos, Sentiment::Neu, Sentiment::Neg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn special(self) -> Special {
        match self {
            Sentiment::Pos => Special::Pos,
            Sentiment::Neu => Special::Neu,
            Sentiment::Neg => Special::Neg,
        }
    }

    pub fn from_special(s: Special) -> Option<Self> {
        match s {
            Special::Pos => Some(Sentiment::Pos),
            Special::Neu => Some(Sentiment::Neu),
            Special::Neg => Some(Sentiment::Neg),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Pos => "POS",
            Sentiment::Neu => "NEU",
            Sentiment::Neg => "NEG",
        }
    }
}

/// 1-based inclusive token span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

/// An aspect span with its sentiment when known. Serialized as
/// `[start, end, "POS"]` or `[start, end, null]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize, Option<Sentiment>)", into = "(usize, usize, Option<Sentiment>)")]
pub struct AspectLabel {
    pub span: Span,
    pub sentiment: Option<Sentiment>,
}

impl From<(usize, usize, Option<Sentiment>)> for AspectLabel {
    fn from((s, e, sentiment): (usize, usize, Option<Sentiment>)) -> Self {
        AspectLabel { span: Span::new(s, e), sentiment }
    }
}

impl From<AspectLabel> for (usize, usize, Option<Sentiment>) {
    fn from(a: AspectLabel) -> Self {
        (a.span.start, a.span.end, a.sentiment)
    }
}

/// Region features either stored inline or regenerated from a seed as
/// standard-normal vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Regions {
    Features(Vec<RegionFeature>),
    Seeded { seed: u64, count: usize, dim: usize },
}

impl Regions {
    pub fn count(&self) -> usize {
        match self {
            Regions::Features(f) => f.len(),
            Regions::Seeded { count, .. } => *count,
        }
    }

    pub fn materialize(&self) -> Vec<RegionFeature> {
        match self {
            Regions::Features(f) => f.clone(),
            Regions::Seeded { seed, count, dim } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| RegionFeature { vector: (0..*dim).map(|_| normal(&mut rng)).collect(), confidence: 1.0 })
                    .collect()
            }
        }
    }
}

/// One image-text record with whatever supervision it carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalExample {
    pub text: String,
    pub regions: Regions,
    pub region_class_dists: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentiment: Option<Sentiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspects: Option<Vec<AspectLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opinions: Option<Vec<Span>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anp_dist: Option<Vec<f64>>,
}

fn field_err(field: &str, msg: String) -> Error {
    Error::Validation(format!("field `{field}`: {msg}"))
}

fn check_dist(field: &str, d: &[f64]) -> Result<()> {
    if d.is_empty() {
        return Err(field_err(field, "empty distribution".into()));
    }
    if d.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(field_err(field, "negative or non-finite probability".into()));
    }
    let s: f64 = d.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(field_err(field, format!("distribution sums to {s}, expected 1")));
    }
    Ok(())
}

fn check_spans(field: &str, spans: &[Span], t: usize) -> Result<()> {
    for s in spans {
        if s.start == 0 {
            return Err(field_err(field, format!("1-based span required, got start=0 in {:?}", (s.start, s.end))));
        }
        if s.start > s.end || s.end > t {
            return Err(field_err(field, format!("span ({}, {}) violates 1 <= start <= end <= {}", s.start, s.end, t)));
        }
    }
    let mut sorted = spans.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0].overlaps(&w[1])) {
        return Err(field_err(field, "overlapping spans".into()));
    }
    Ok(())
}

impl MultimodalExample {
    pub fn tokens(&self) -> Result<Vec<String>> {
        tokenize(&self.text).map_err(|e| field_err("text", e.to_string()))
    }

    pub fn aspect_spans(&self) -> Vec<Span> {
        self.aspects.iter().flatten().map(|a| a.span).collect()
    }

    /// Checks every record invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let t = self.tokens()?.len();
        let r = self.regions.count();
        if let Regions::Features(f) = &self.regions {
            if let Some(first) = f.first() {
                let dim = first.vector.len();
                if dim == 0 {
                    return Err(field_err("regions", "zero-dimensional feature".into()));
                }
                for (i, rf) in f.iter().enumerate() {
                    if rf.vector.len() != dim {
                        return Err(field_err("regions", format!("region {i} has dim {} not {dim}", rf.vector.len())));
                    }
                    if rf.vector.iter().any(|x| !x.is_finite()) || !rf.confidence.is_finite() {
                        return Err(field_err("regions", format!("region {i} has a non-finite value")));
                    }
                }
            }
        }
        if r == 0 {
            return Err(field_err("regions", "at least one region required".into()));
        }
        if self.region_class_dists.len() != r {
            return Err(field_err(
                "region_class_dists",
                format!("{} distributions for {} regions", self.region_class_dists.len(), r),
            ));
        }
        let k = self.region_class_dists[0].len();
        for d in &self.region_class_dists {
            if d.len() != k {
                return Err(field_err("region_class_dists", "ragged class counts".into()));
            }
            check_dist("region_class_dists", d)?;
        }
        if let Some(a) = &self.aspects {
            check_spans("aspects", &a.iter().map(|x| x.span).collect::<Vec<_>>(), t)?;
        }
        if let Some(o) = &self.opinions {
            check_spans("opinions", o, t)?;
        }
        if let Some(d) = &self.anp_dist {
            check_dist("anp_dist", d)?;
        }
        Ok(())
    }
}

/// Shuffles with `seed` and cuts into train/dev/test by `fractions`.
pub fn split<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let s: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) || (s - 1.0).abs() > 1e-9 {
        bail!(Config, "split fractions {:?} must be nonnegative and sum to 1", fractions);
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = libm::round(fractions[0] * n as f64) as usize;
    let n_dev = (libm::round(fractions[1] * n as f64) as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |r: core::ops::Range<usize>| r.map(|i| items[order[i]].clone()).collect::<Vec<_>>();
    Ok((pick(0..n_train), pick(n_train..n_train + n_dev), pick(n_train + n_dev..n)))
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub examples: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub class_count: usize,
    pub anp_count: usize,
    pub lexicon_size: usize,
    pub gazetteer_size: usize,
    pub sentence_len: (usize, usize),
    pub aspects_per_example: (usize, usize),
    pub opinions_per_example: (usize, usize),
    pub region_count: usize,
    pub feature_dim: usize,
    /// Post-level sentiment mixture over (POS, NEU, NEG).
    pub sentiment_mix: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            examples: 600,
            vocab_size: 60,
            class_count: 8,
            anp_count: 40,
            lexicon_size: 12,
            gazetteer_size: 30,
            sentence_len: (8, 20),
            aspects_per_example: (1, 3),
            opinions_per_example: (1, 3),
            region_count: 36,
            feature_dim: 32,
            sentiment_mix: [0.4, 0.35, 0.25],
            seed: 13,
        }
    }
}

/// Generated records plus the resources whose entries were planted in them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub examples: Vec<MultimodalExample>,
    pub lexicon: OpinionLexicon,
    pub gazetteer: AspectGazetteer,
    pub anps: AnpVocabulary,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const INTENSIFIERS: [&str; 3] = ["very", "truly", "so"];

struct WordForge {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl WordForge {
    fn word(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[self.rng.gen_range(0..ONSETS.len())]);
                w.push_str(VOWELS[self.rng.gen_range(0..VOWELS.len())]);
            }
            if !INTENSIFIERS.contains(&w.as_str()) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn peaked_dist<R: Rng + ?Sized>(rng: &mut R, n: usize, peak_at: usize, peak: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let mut rest: Vec<f64> = (0..n).map(|i| if i == peak_at { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
    let s: f64 = rest.iter().sum();
    for (i, x) in rest.iter_mut().enumerate() {
        *x = if i == peak_at { peak } else { *x / s * (1.0 - peak) };
    }
    // exact renormalization so the sum is 1 to rounding
    let total: f64 = rest.iter().sum();
    rest.iter_mut().for_each(|x| *x /= total);
    rest
}

struct Chunk {
    tokens: Vec<String>,
    aspect: Option<(usize, Option<Sentiment>)>,
    opinion: Option<usize>,
}

impl SyntheticConfig {
    pub fn check(&self) -> Result<()> {
        let counts = [
            ("examples", self.examples),
            ("vocab_size", self.vocab_size),
            ("class_count", self.class_count),
            ("anp_count", self.anp_count),
            ("region_count", self.region_count),
            ("feature_dim", self.feature_dim),
            ("gazetteer_size", self.gazetteer_size),
            ("lexicon_size", self.lexicon_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                bail!(Config, "{name} must be at least 1");
            }
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            bail!(Config, "sentence_len range ({lo}, {hi}) is empty");
        }
        if self.aspects_per_example.0 > self.aspects_per_example.1 {
            bail!(Config, "aspects_per_example range is empty");
        }
        if self.opinions_per_example.0 > self.opinions_per_example.1 {
            bail!(Config, "opinions_per_example range is empty");
        }
        if self.lexicon_size < 3 {
            bail!(Config, "lexicon_size must cover all three polarities");
        }
        // Worst case: every aspect and opinion is two tokens, one filler between chunks.
        let (a, o) = (self.aspects_per_example.1, self.opinions_per_example.1);
        let chunks = a + o.saturating_sub(a);
        let worst = 2 * a + 2 * o + chunks.saturating_sub(1);
        if worst > hi {
            bail!(Config, "up to {a} aspects and {o} opinions need {worst} tokens but sentences are at most {hi}");
        }
        let s: f64 = self.sentiment_mix.iter().sum();
        if self.sentiment_mix.iter().any(|x| x.is_nan() || *x < 0.0) || (s - 1.0).abs() > 1e-9 {
            bail!(Config, "sentiment_mix must be a distribution");
        }
        Ok(())
    }

    /// Deterministic in `seed`.
    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.check()?;
        let mut forge = WordForge { rng: ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed), used: BTreeSet::new() };
        let fillers: Vec<String> = (0..self.vocab_size).map(|_| forge.word(2)).collect();

        let mut lexicon_entries = Vec::new();
        let mut by_polarity: [Vec<Vec<String>>; 3] = Default::default();
        for i in 0..self.lexicon_size {
            let pol = Sentiment::ALL[i % 3];
            let adj = forge.word(3);
            let phrase = if i >= 3 && i % 5 == 4 {
                vec![INTENSIFIERS[i % INTENSIFIERS.len()].to_string(), adj]
            } else {
                vec![adj]
            };
            by_polarity[pol.index()].push(phrase.clone());
            lexicon_entries.push((phrase.join(" "), pol));
        }
        let lexicon = OpinionLexicon::new(lexicon_entries.iter().map(|(p, s)| (p.as_str(), *s)))?;

        let mut entities: Vec<Vec<String>> = Vec::new();
        for i in 0..self.gazetteer_size {
            let n = if i % 3 == 2 { 2 } else { 1 };
            entities.push((0..n).map(|_| capitalize(&forge.word(2))).collect());
        }
        let gazetteer = AspectGazetteer::new(entities.iter().map(|e| e.join(" ")))?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let single_adj: [Vec<&Vec<String>>; 3] =
            core::array::from_fn(|p| by_polarity[p].iter().filter(|ph| ph.len() == 1).collect());
        let mut anp_set = BTreeSet::new();
        let mut anp_list: Vec<(String, Sentiment)> = Vec::new();
        let max_pairs = self.lexicon_size * self.gazetteer_size;
        while anp_list.len() < self.anp_count.min(max_pairs) {
            let pol = Sentiment::ALL[anp_list.len() % 3];
            let pool = &single_adj[pol.index()];
            let adj = if pool.is_empty() { &by_polarity[pol.index()][0] } else { pool[rng.gen_range(0..pool.len())] };
            let noun = &entities[rng.gen_range(0..entities.len())][0];
            let pair = format!("{} {}", adj.last().expect("non-empty phrase"), noun);
            if anp_set.insert(pair.clone()) {
                anp_list.push((pair, pol));
            }
        }
        let anps = AnpVocabulary::new(anp_list.iter().map(|(p, _)| p.clone()).collect())?;

        let means: Vec<Vec<f64>> =
            (0..self.class_count).map(|_| (0..self.feature_dim).map(|_| 2.0 * normal(&mut rng)).collect()).collect();

        let mut examples = Vec::with_capacity(self.examples);
        for _ in 0..self.examples {
            let post = sample_mix(&mut rng, &self.sentiment_mix);
            let n_asp = rng.gen_range(self.aspects_per_example.0..=self.aspects_per_example.1);
            let mut n_op = rng.gen_range(self.opinions_per_example.0..=self.opinions_per_example.1);

            let mut chunks: Vec<Chunk> = Vec::new();
            let mut picked = BTreeSet::new();
            for _ in 0..n_asp {
                let mut e = rng.gen_range(0..entities.len());
                while !picked.insert(e) && picked.len() < entities.len() {
                    e = rng.gen_range(0..entities.len());
                }
                let ent = entities[e].clone();
                if n_op > 0 {
                    n_op -= 1;
                    let pol = if rng.gen_bool(0.8) { post } else { Sentiment::ALL[rng.gen_range(0..3)] };
                    let pool = &by_polarity[pol.index()];
                    let op = pool[rng.gen_range(0..pool.len())].clone();
                    let ol = op.len();
                    let mut tokens = op;
                    tokens.extend(ent.iter().cloned());
                    chunks.push(Chunk { tokens, aspect: Some((ol, Some(pol))), opinion: Some(0) });
                } else {
                    chunks.push(Chunk { tokens: ent, aspect: Some((0, Some(Sentiment::Neu))), opinion: None });
                }
            }
            for _ in 0..n_op {
                let pool = &by_polarity[post.index()];
                let op = pool[rng.gen_range(0..pool.len())].clone();
                chunks.push(Chunk { tokens: op, aspect: None, opinion: Some(0) });
            }
            chunks.shuffle(&mut rng);

            let content: usize = chunks.iter().map(|c| c.tokens.len()).sum();
            let min_len = content + chunks.len().saturating_sub(1);
            let lo = self.sentence_len.0.max(min_len);
            let len = rng.gen_range(lo..=self.sentence_len.1.max(lo));
            // gaps: before, between (>= 1), after
            let mut gaps = vec![0usize; chunks.len() + 1];
            for g in gaps.iter_mut().take(chunks.len()).skip(1) {
                *g = 1;
            }
            for _ in 0..len - min_len {
                let k = rng.gen_range(0..gaps.len());
                gaps[k] += 1;
            }

            let mut words: Vec<String> = Vec::with_capacity(len);
            let mut aspects = Vec::new();
            let mut opinions = Vec::new();
            for (ci, chunk) in chunks.iter().enumerate() {
                for _ in 0..gaps[ci] {
                    words.push(fillers[rng.gen_range(0..fillers.len())].clone());
                }
                let base = words.len() + 1;
                if let Some((off, sent)) = chunk.aspect {
                    let start = base + off;
                    aspects
                        .push(AspectLabel { span: Span::new(start, base + chunk.tokens.len() - 1), sentiment: sent });
                    if chunk.opinion.is_some() {
                        opinions.push(Span::new(base, start - 1));
                    }
                } else if chunk.opinion.is_some() {
                    opinions.push(Span::new(base, base + chunk.tokens.len() - 1));
                }
                words.extend(chunk.tokens.iter().cloned());
            }
            for _ in 0..gaps[chunks.len()] {
                words.push(fillers[rng.gen_range(0..fillers.len())].clone());
            }
            aspects.sort();
            opinions.sort();

            let mut feats = Vec::with_capacity(self.region_count);
            let mut dists = Vec::with_capacity(self.region_count);
            for _ in 0..self.region_count {
                let class = if rng.gen_bool(0.5) && self.class_count >= 3 {
                    let per = self.class_count / 3;
                    post.index() + 3 * rng.gen_range(0..per.max(1))
                } else {
                    rng.gen_range(0..self.class_count)
                };
                let vector = means[class].iter().map(|m| m + 0.5 * normal(&mut rng)).collect();
                feats.push(RegionFeature { vector, confidence: rng.gen_range(0.5..1.0) });
                let peak = rng.gen_range(0.6..0.9);
                dists.push(peaked_dist(&mut rng, self.class_count, class, peak));
            }

            let matching: Vec<usize> =
                anp_list.iter().enumerate().filter(|(_, (_, p))| *p == post).map(|(i, _)| i).collect();
            let anp_idx = if matching.is_empty() {
                rng.gen_range(0..anp_list.len())
            } else {
                matching[rng.gen_range(0..matching.len())]
            };
            let peak = rng.gen_range(0.4..0.8);
            let anp_dist = peaked_dist(&mut rng, anp_list.len(), anp_idx, peak);

            examples.push(MultimodalExample {
                text: words.join(" "),
                regions: Regions::Features(feats),
                region_class_dists: dists,
                sentiment: Some(post),
                aspects: Some(aspects),
                opinions: Some(opinions),
                anp_dist: Some(anp_dist),
            });
        }
        Ok(SyntheticCorpus { examples, lexicon, gazetteer, anps })
    }
}

fn sample_mix<R: Rng + ?Sized>(rng: &mut R, mix: &[f64; 3]) -> Sentiment {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return Sentiment::ALL[i];
        }
    }
    Sentiment::Neg
}
