//! Masking procedures, target-sequence construction and parsing, and the
//! decoding grammar that keeps generated sequences parseable.
//!
//! Target sequences mix 1-based text positions with special tokens:
//!
//! | task  | format                                             | length   |
//! |-------|----------------------------------------------------|----------|
//! | AOE   | `a1s a1e … aMs aMe <sep> o1s o1e … oNs oNe <eos>`   | 2M+2N+2  |
//! | JMASA | `a1s a1e s1 … aks ake sk <eos>`                     | 3k+1     |
//! | MATE  | `a1s a1e … aks ake <eos>`                           | 2k+1     |
//! | MASC  | same as JMASA, spans given at inference             | 3k+1     |
//!
//! At the pointer head, position `p` is candidate `p − 1`; the task's
//! special tokens follow at `T + j` in the order of
//! [`Task::pointer_specials`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AspectLabel, Sentiment, Span};
use crate::error::{bail, Error, Result};
use crate::vocab::Special;

/// Every objective the shared decoder is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mlm,
    Aoe,
    Mrm,
    Aog,
    Msp,
    Jmasa,
    Mate,
    Masc,
}

impl Task {
    /// Pre-training objectives in round-robin order.
    pub const PRETRAIN: [Task; 5] = [Task::Mlm, Task::Aoe, Task::Mrm, Task::Aog, Task::Msp];
    pub const DOWNSTREAM: [Task; 3] = [Task::Jmasa, Task::Mate, Task::Masc];

    /// Token fed to the decoder right after `<bos>`.
    pub fn decoder_token(self) -> Special {
        match self {
            Task::Mlm => Special::Mlm,
            Task::Aoe => Special::Aoe,
            Task::Mrm => Special::Mrm,
            Task::Aog => Special::Aog,
            Task::Msp => Special::Msp,
            Task::Jmasa => Special::Aesc,
            Task::Mate => Special::Mate,
            Task::Masc => Special::Masc,
        }
    }

    /// Special candidates appended after the text positions at the pointer
    /// head; empty for tasks that do not point.
    pub fn pointer_specials(self) -> &'static [Special] {
        match self {
            Task::Aoe => &[Special::Sep, Special::Eos],
            Task::Jmasa | Task::Mate | Task::Masc => &[Special::Pos, Special::Neu, Special::Neg, Special::Eos],
            _ => &[],
        }
    }

    pub fn is_pointer(self) -> bool {
        !self.pointer_specials().is_empty()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Mlm => "mlm",
            Task::Aoe => "aoe",
            Task::Mrm => "mrm",
            Task::Aog => "aog",
            Task::Msp => "msp",
            Task::Jmasa => "jmasa",
            Task::Mate => "mate",
            Task::Masc => "masc",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "mlm" => Task::Mlm,
            "aoe" => Task::Aoe,
            "mrm" => Task::Mrm,
            "aog" => Task::Aog,
            "msp" => Task::Msp,
            "jmasa" | "aesc" => Task::Jmasa,
            "mate" => Task::Mate,
            "masc" => Task::Masc,
            other => bail!(Usage, "unknown task {:?}", other),
        })
    }
}

/// One element of a target sequence. Serialized as a bare integer for
/// positions, or one of `"SEP" "EOS" "POS" "NEU" "NEG"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawItem", into = "RawItem")]
pub enum TargetItem {
    Index(usize),
    Special(Special),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawItem {
    Index(usize),
    Token(String),
}

impl TryFrom<RawItem> for TargetItem {
    type Error = String;

    fn try_from(r: RawItem) -> core::result::Result<Self, String> {
        match r {
            RawItem::Index(i) => Ok(TargetItem::Index(i)),
            RawItem::Token(t) => Ok(TargetItem::Special(match t.as_str() {
                "SEP" => Special::Sep,
                "EOS" => Special::Eos,
                "POS" => Special::Pos,
                "NEU" => Special::Neu,
                "NEG" => Special::Neg,
                other => return Err(format!("unknown target token {other:?}")),
            })),
        }
    }
}

impl From<TargetItem> for RawItem {
    fn from(t: TargetItem) -> Self {
        match t {
            TargetItem::Index(i) => RawItem::Index(i),
            TargetItem::Special(s) => RawItem::Token(
                match s {
                    Special::Sep => "SEP",
                    Special::Pos => "POS",
                    Special::Neu => "NEU",
                    Special::Neg => "NEG",
                    _ => "EOS",
                }
                .into(),
            ),
        }
    }
}

const EOS: TargetItem = TargetItem::Special(Special::Eos);
const SEP: TargetItem = TargetItem::Special(Special::Sep);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSequence {
    pub task: Task,
    pub items: Vec<TargetItem>,
}

impl TargetSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Candidate index at the pointer head for `item`, if it is a candidate of
/// `task` for a text of length `t`.
pub fn item_to_candidate(task: Task, t: usize, item: TargetItem) -> Option<usize> {
    match item {
        TargetItem::Index(p) if (1..=t).contains(&p) => Some(p - 1),
        TargetItem::Index(_) => None,
        TargetItem::Special(s) => task.pointer_specials().iter().position(|&c| c == s).map(|j| t + j),
    }
}

pub fn candidate_to_item(task: Task, t: usize, idx: usize) -> Option<TargetItem> {
    if idx < t {
        Some(TargetItem::Index(idx + 1))
    } else {
        task.pointer_specials().get(idx - t).map(|&s| TargetItem::Special(s))
    }
}

// ── masking ─────────────────────────────────────────────────────────────

/// What happened to a selected text position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub corrupted: Vec<usize>,
    /// 1-based selected positions, ascending.
    pub positions: Vec<usize>,
    pub branches: Vec<Corruption>,
    pub original: Vec<usize>,
}

/// Selects each position with probability `rate`; a selected token becomes
/// `<mask>` 80% of the time, a random non-special token 10%, and stays
/// unchanged 10%.
pub fn mask_text<R: Rng + ?Sized>(ids: &[usize], rate: f64, vocab_len: usize, rng: &mut R) -> MaskedText {
    let mut out =
        MaskedText { corrupted: ids.to_vec(), positions: Vec::new(), branches: Vec::new(), original: ids.to_vec() };
    for (i, id) in out.corrupted.iter_mut().enumerate() {
        if !rng.gen_bool(rate.clamp(0.0, 1.0)) {
            continue;
        }
        let u: f64 = rng.gen();
        let branch = if u < 0.8 {
            *id = Special::Mask.id();
            Corruption::Masked
        } else if u < 0.9 {
            if vocab_len > Special::COUNT {
                *id = rng.gen_range(Special::COUNT..vocab_len);
            } else {
                *id = Special::Mask.id();
            }
            Corruption::Random
        } else {
            Corruption::Kept
        };
        out.positions.push(i + 1);
        out.branches.push(branch);
    }
    out
}

/// Regions selected for masking (0-based region indices) and the decoder
/// placeholder for every region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMaskPlan {
    pub masked: Vec<usize>,
    pub placeholders: Vec<Special>,
}

impl RegionMaskPlan {
    pub fn from_masked(region_count: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.is_empty() {
            bail!(Usage, "a region mask plan needs at least one masked region");
        }
        if masked.last().is_some_and(|&m| m >= region_count) {
            bail!(Index, "masked region out of range for {} regions", region_count);
        }
        let mut placeholders = vec![Special::Feat; region_count];
        for &m in &masked {
            placeholders[m] = Special::Zero;
        }
        Ok(Self { masked, placeholders })
    }

    pub fn is_masked(&self, region: usize) -> bool {
        self.placeholders.get(region) == Some(&Special::Zero)
    }
}

/// Independent Bernoulli(`rate`) per region; when nothing is selected one
/// region is chosen uniformly so the plan is never empty.
pub fn mask_regions<R: Rng + ?Sized>(region_count: usize, rate: f64, rng: &mut R) -> Result<RegionMaskPlan> {
    if region_count == 0 {
        bail!(Usage, "cannot mask regions of an image with none");
    }
    let mut masked: Vec<usize> = (0..region_count).filter(|_| rng.gen_bool(rate.clamp(0.0, 1.0))).collect();
    if masked.is_empty() {
        masked.push(rng.gen_range(0..region_count));
    }
    RegionMaskPlan::from_masked(region_count, masked)
}

// ── builders ────────────────────────────────────────────────────────────

fn checked_sorted(field: &str, spans: &[Span]) -> Result<Vec<Span>> {
    let mut v = spans.to_vec();
    v.sort();
    for s in &v {
        if s.start == 0 || s.start > s.end {
            bail!(Validation, "{} span ({}, {}) is not a 1-based inclusive span", field, s.start, s.end);
        }
    }
    if v.windows(2).any(|w| w[0].overlaps(&w[1])) {
        bail!(Validation, "overlapping {} spans", field);
    }
    Ok(v)
}

/// `[a1s, a1e, …, <sep>, o1s, o1e, …, <eos>]`; `<sep>` is present even
/// when either list is empty.
pub fn build_aoe_target(aspects: &[Span], opinions: &[Span]) -> Result<TargetSequence> {
    let aspects = checked_sorted("aspect", aspects)?;
    let opinions = checked_sorted("opinion", opinions)?;
    let mut items = Vec::with_capacity(2 * aspects.len() + 2 * opinions.len() + 2);
    for s in &aspects {
        items.extend([TargetItem::Index(s.start), TargetItem::Index(s.end)]);
    }
    items.push(SEP);
    for s in &opinions {
        items.extend([TargetItem::Index(s.start), TargetItem::Index(s.end)]);
    }
    items.push(EOS);
    Ok(TargetSequence { task: Task::Aoe, items })
}

/// Downstream targets; JMASA and MASC need a sentiment on every tuple.
pub fn build_downstream_target(task: Task, tuples: &[AspectLabel]) -> Result<TargetSequence> {
    if !Task::DOWNSTREAM.contains(&task) {
        bail!(Usage, "{} is not a downstream task", task);
    }
    let spans: Vec<Span> = tuples.iter().map(|a| a.span).collect();
    checked_sorted("aspect", &spans)?;
    let mut sorted = tuples.to_vec();
    sorted.sort_by_key(|a| a.span);
    let mut items = Vec::new();
    for a in &sorted {
        items.extend([TargetItem::Index(a.span.start), TargetItem::Index(a.span.end)]);
        if task != Task::Mate {
            let Some(s) = a.sentiment else {
                bail!(Validation, "{} tuple ({}, {}) has no sentiment", task, a.span.start, a.span.end);
            };
            items.push(TargetItem::Special(s.special()));
        }
    }
    items.push(EOS);
    Ok(TargetSequence { task, items })
}

// ── parsing ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Defect {
    /// A start index with no end index, or an end index with no sentiment
    /// where a sentiment is required but something else follows.
    DanglingIndex {
        at: usize,
    },
    MissingSentiment {
        at: usize,
    },
    ReversedSpan {
        at: usize,
    },
    IndexOutOfRange {
        at: usize,
    },
    UnexpectedToken {
        at: usize,
    },
    MissingSeparator,
    MissingEos,
    TrailingItems {
        at: usize,
    },
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::DanglingIndex { at } => write!(f, "dangling index at {at}"),
            Defect::MissingSentiment { at } => write!(f, "missing sentiment at {at}"),
            Defect::ReversedSpan { at } => write!(f, "span end before start at {at}"),
            Defect::IndexOutOfRange { at } => write!(f, "index out of range at {at}"),
            Defect::UnexpectedToken { at } => write!(f, "unexpected token at {at}"),
            Defect::MissingSeparator => f.write_str("missing separator"),
            Defect::MissingEos => f.write_str("missing end of sequence"),
            Defect::TrailingItems { at } => write!(f, "trailing items after end at {at}"),
        }
    }
}

/// Tuples recovered from a sequence plus anything that was wrong with it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Parsed {
    /// Aspect tuples in sequence order (sentiment `None` for AOE and MATE).
    pub aspects: Vec<AspectLabel>,
    /// AOE opinion spans in sequence order.
    pub opinions: Vec<Span>,
    pub defects: Vec<Defect>,
}

impl Parsed {
    pub fn is_valid(&self) -> bool {
        self.defects.is_empty()
    }
}

/// Inverse of the builders. Never fails: on a malformed sequence it keeps
/// the complete tuples before the first defect and reports that defect.
pub fn parse_target(task: Task, items: &[TargetItem], t: usize) -> Parsed {
    let mut out = Parsed::default();
    let needs_sentiment = matches!(task, Task::Jmasa | Task::Masc);
    let mut opinions_phase = false;
    let mut i = 0;
    let defect = loop {
        match items.get(i) {
            None => {
                break Some(if task == Task::Aoe && !opinions_phase {
                    Defect::MissingSeparator
                } else {
                    Defect::MissingEos
                })
            }
            Some(&TargetItem::Special(Special::Eos)) => {
                if task == Task::Aoe && !opinions_phase {
                    break Some(Defect::MissingSeparator);
                }
                break (i + 1 < items.len()).then_some(Defect::TrailingItems { at: i + 1 });
            }
            Some(&TargetItem::Special(Special::Sep)) if task == Task::Aoe && !opinions_phase => {
                opinions_phase = true;
                i += 1;
            }
            Some(&TargetItem::Special(_)) => break Some(Defect::UnexpectedToken { at: i }),
            Some(&TargetItem::Index(s)) => {
                let e = match items.get(i + 1) {
                    Some(&TargetItem::Index(e)) => e,
                    _ => break Some(Defect::DanglingIndex { at: i }),
                };
                if s == 0 || e > t {
                    break Some(Defect::IndexOutOfRange { at: i });
                }
                if s > e {
                    break Some(Defect::ReversedSpan { at: i });
                }
                let span = Span::new(s, e);
                if needs_sentiment {
                    let sentiment = match items.get(i + 2) {
                        Some(&TargetItem::Special(sp)) => Sentiment::from_special(sp),
                        Some(&TargetItem::Index(_)) => break Some(Defect::DanglingIndex { at: i + 2 }),
                        None => None,
                    };
                    let Some(sentiment) = sentiment else {
                        break Some(Defect::MissingSentiment { at: i + 2 });
                    };
                    out.aspects.push(AspectLabel { span, sentiment: Some(sentiment) });
                    i += 3;
                } else {
                    if opinions_phase {
                        out.opinions.push(span);
                    } else {
                        out.aspects.push(AspectLabel { span, sentiment: None });
                    }
                    i += 2;
                }
            }
        }
    };
    out.defects.extend(defect);
    out
}

// ── decoding grammar ────────────────────────────────────────────────────

/// Grammar driving constrained generation. MASC carries the gold spans,
/// which are forced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grammar {
    Aoe,
    Jmasa,
    Mate,
    Masc(Vec<Span>),
}

impl Grammar {
    pub fn for_task(task: Task, gold_spans: Option<&[Span]>) -> Result<Self> {
        Ok(match task {
            Task::Aoe => Grammar::Aoe,
            Task::Jmasa => Grammar::Jmasa,
            Task::Mate => Grammar::Mate,
            Task::Masc => {
                let Some(spans) = gold_spans else { bail!(Usage, "MASC decoding needs the gold aspect spans") };
                let mut spans = spans.to_vec();
                spans.sort();
                Grammar::Masc(spans)
            }
            other => bail!(Usage, "{} has no pointer grammar", other),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Grammar::Aoe => Task::Aoe,
            Grammar::Jmasa => Task::Jmasa,
            Grammar::Mate => Task::Mate,
            Grammar::Masc(_) => Task::Masc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    TupleStart { opinions: bool },
    AfterStart { start: usize, opinions: bool },
    NeedSentiment,
    Forced(TargetItem),
    Done,
}

fn masc_template(spans: &[Span]) -> Vec<Option<TargetItem>> {
    let mut v = Vec::with_capacity(3 * spans.len() + 1);
    for s in spans {
        v.extend([Some(TargetItem::Index(s.start)), Some(TargetItem::Index(s.end)), None]);
    }
    v.push(Some(EOS));
    v
}

fn advance(grammar: &Grammar, prefix: &[TargetItem], t: usize) -> Result<State> {
    let ungrammatical = |at: usize| Error::Usage(format!("ungrammatical prefix at item {at}"));
    if let Grammar::Masc(spans) = grammar {
        let template = masc_template(spans);
        for (k, item) in prefix.iter().enumerate() {
            match template.get(k) {
                Some(Some(forced)) if forced == item => {}
                Some(None) if matches!(item, TargetItem::Special(s) if Sentiment::from_special(*s).is_some()) => {}
                _ => return Err(ungrammatical(k)),
            }
        }
        return Ok(match template.get(prefix.len()) {
            Some(Some(forced)) => State::Forced(*forced),
            Some(None) => State::NeedSentiment,
            None => State::Done,
        });
    }
    let mut state = State::TupleStart { opinions: false };
    for (k, &item) in prefix.iter().enumerate() {
        state = match (state, item) {
            (State::TupleStart { opinions }, TargetItem::Index(p)) if (1..=t).contains(&p) => {
                State::AfterStart { start: p, opinions }
            }
            (State::TupleStart { opinions: false }, SEP) if *grammar == Grammar::Aoe => {
                State::TupleStart { opinions: true }
            }
            (State::TupleStart { opinions }, EOS) if *grammar != Grammar::Aoe || opinions => State::Done,
            (State::AfterStart { start, opinions }, TargetItem::Index(p)) if p >= start && p <= t => {
                if *grammar == Grammar::Jmasa {
                    State::NeedSentiment
                } else {
                    State::TupleStart { opinions }
                }
            }
            (State::NeedSentiment, TargetItem::Special(s)) if Sentiment::from_special(s).is_some() => {
                State::TupleStart { opinions: false }
            }
            _ => return Err(ungrammatical(k)),
        };
    }
    Ok(state)
}

/// Which of the `T + |C|` pointer candidates may follow `prefix`.
pub fn valid_next_mask(grammar: &Grammar, prefix: &[TargetItem], t: usize) -> Result<Vec<bool>> {
    let task = grammar.task();
    let n = t + task.pointer_specials().len();
    let mut mask = vec![false; n];
    let allow = |item: TargetItem, mask: &mut Vec<bool>| {
        if let Some(c) = item_to_candidate(task, t, item) {
            mask[c] = true;
        }
    };
    match advance(grammar, prefix, t)? {
        State::TupleStart { opinions } => {
            for p in 1..=t {
                allow(TargetItem::Index(p), &mut mask);
            }
            if *grammar == Grammar::Aoe && !opinions {
                allow(SEP, &mut mask);
            } else {
                allow(EOS, &mut mask);
            }
        }
        State::AfterStart { start, .. } => {
            for p in start..=t {
                allow(TargetItem::Index(p), &mut mask);
            }
        }
        State::NeedSentiment => {
            for s in Sentiment::ALL {
                allow(TargetItem::Special(s.special()), &mut mask);
            }
        }
        State::Forced(item) => allow(item, &mut mask),
        State::Done => {}
    }
    Ok(mask)
}

/// True once the grammar has consumed `<eos>`.
pub fn is_complete(grammar: &Grammar, prefix: &[TargetItem], t: usize) -> bool {
    matches!(advance(grammar, prefix, t), Ok(State::Done))
}
