use alloc::vec::Vec;

use super::net::{EncoderOutput, Model, ModelInput};
use crate::codec::{candidate_to_item, is_complete, valid_next_mask, Grammar, TargetSequence, Task};
use crate::corpus::Span;
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::vocab::Special;

#[derive(Debug, Clone, PartialEq)]
pub enum GenerationOutput {
    Pointer(TargetSequence),
    /// Vocabulary ids, without the closing `<eos>`.
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub output: GenerationOutput,
    /// False when the length limit cut generation before `<eos>`.
    pub complete: bool,
}

impl Generation {
    pub fn pointer(&self) -> Option<&TargetSequence> {
        match &self.output {
            GenerationOutput::Pointer(t) => Some(t),
            GenerationOutput::Tokens(_) => None,
        }
    }
}

fn argmax_masked(scores: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if allowed(i) && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy pointer decoding restricted at every step to the candidates the
/// grammar accepts, so the output always parses.
pub fn generate_pointer(model: &Model, g: &mut Graph, enc: &EncoderOutput, grammar: &Grammar) -> Result<Generation> {
    let task = grammar.task();
    let t = enc.text_len();
    let max_len = model.params.config().max_generation_len;
    let cands = model.candidates(g, enc, task)?;
    let mut items = Vec::new();
    while items.len() < max_len {
        let mask = valid_next_mask(grammar, &items, t)?;
        let input = model.pointer_decoder_input(g, &cands, &items)?;
        let h = model.decode_step(g, enc, input)?;
        let logits = model.pointer_logits(g, &cands, h)?;
        let Some(c) = argmax_masked(g.value(logits).data(), |i| mask[i]) else { break };
        let Some(item) = candidate_to_item(task, t, c) else {
            bail!(Index, "candidate {} outside the pointer head", c);
        };
        items.push(item);
        if is_complete(grammar, &items, t) {
            break;
        }
    }
    let complete = is_complete(grammar, &items, t);
    Ok(Generation { output: GenerationOutput::Pointer(TargetSequence { task, items }), complete })
}

/// Greedy vocabulary decoding for aspect-oriented caption generation. Only
/// `<eos>` among the special tokens can be produced.
pub fn generate_tokens(model: &Model, g: &mut Graph, enc: &EncoderOutput, task: Task) -> Result<Generation> {
    let max_len = model.params.config().max_generation_len;
    let mut ids: Vec<usize> = Vec::new();
    let prefix = model.task_prefix(g, task)?;
    loop {
        if ids.len() >= max_len {
            return Ok(Generation { output: GenerationOutput::Tokens(ids), complete: false });
        }
        let input = if ids.is_empty() {
            prefix
        } else {
            let rest = model.embed_tokens(g, &ids)?;
            g.concat_rows(&[prefix, rest])?
        };
        let h = model.decode_step(g, enc, input)?;
        let logits = model.lm_logits(g, h)?;
        let next = argmax_masked(g.value(logits).data(), |i| i >= Special::COUNT || i == Special::Eos.id())
            .expect("vocabulary holds <eos>");
        if next == Special::Eos.id() {
            return Ok(Generation { output: GenerationOutput::Tokens(ids), complete: true });
        }
        ids.push(next);
    }
}

/// Encodes `input` and decodes greedily for `task`. MASC needs the gold
/// aspect spans; MLM, MRM and MSP are not generative.
pub fn generate(
    model: &Model,
    g: &mut Graph,
    input: &ModelInput,
    task: Task,
    gold_spans: Option<&[Span]>,
) -> Result<Generation> {
    let enc = model.encode(g, input)?;
    match task {
        Task::Aog => generate_tokens(model, g, &enc, task),
        Task::Mlm | Task::Mrm | Task::Msp => bail!(Usage, "{} has no generation procedure", task),
        _ => generate_pointer(model, g, &enc, &Grammar::for_task(task, gold_spans)?),
    }
}
