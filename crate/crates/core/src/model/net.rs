use alloc::vec;
use alloc::vec::Vec;

use super::{AttnIdx, LnIdx, MlpIdx, ModelParams};
use crate::codec::{item_to_candidate, RegionMaskPlan, TargetItem, Task};
use crate::error::{bail, Result};
use crate::features::{assemble_input, project_regions, InputLayout};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;
use crate::vocab::Special;

/// What the encoder reads for one example: token ids and an `R ×
/// feature_dim` region matrix (masked regions already zeroed).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<usize>,
    pub regions: Tensor,
}

/// Encoder states with the textual block split out.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(R + T + 4) × d`.
    pub hidden: Var,
    pub layout: InputLayout,
    /// `T × d` encoder states of the text slots.
    pub text_states: Var,
    /// `T × d` input embeddings of the text tokens.
    pub text_embeddings: Var,
    /// `(text_embeddings + text_states) / 2`, the pointer candidates.
    pub text_average: Var,
}

impl EncoderOutput {
    pub fn text_len(&self) -> usize {
        self.layout.text_len
    }

    /// `R × d` encoder states of the region slots.
    pub fn visual(&self, g: &mut Graph) -> Result<Var> {
        let r = self.layout.visual_range();
        g.slice_rows(self.hidden, r.start, r.len())
    }
}

/// Pointer candidates: text positions `1..=T`, then the task's specials.
#[derive(Debug, Clone, Copy)]
pub struct CandidateSet {
    pub matrix: Var,
    pub task: Task,
    pub text_len: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.text_len + self.task.pointer_specials().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters bound into one graph.
pub struct Model<'p> {
    pub params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Model<'p> {
    /// Registers every parameter as a leaf; with `trainable` they receive
    /// gradients.
    pub fn bind(g: &mut Graph, params: &'p ModelParams, trainable: bool) -> Self {
        let vars = params.tensors().iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Self { params, vars }
    }

    /// Uses existing graph variables (one per tensor of `params`, same
    /// order and shapes) as the parameters.
    pub fn from_vars(g: &Graph, params: &'p ModelParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.tensors().len() {
            bail!(Usage, "{} variables for {} parameters", vars.len(), params.tensors().len());
        }
        for ((&v, t), name) in vars.iter().zip(params.tensors()).zip(params.names()) {
            if g.value(v).shape() != t.shape() {
                bail!(
                    Dimension,
                    "variable for `{}` has shape {:?}, expected {:?}",
                    name,
                    g.value(v).shape(),
                    t.shape()
                );
            }
        }
        Ok(Self { params, vars })
    }

    /// Graph variable of every parameter, in [`ModelParams::tensors`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn d(&self) -> usize {
        self.params.config().hidden
    }

    fn layer_norm(&self, g: &mut Graph, idx: LnIdx, x: Var) -> Result<Var> {
        g.layer_norm(x, self.v(idx.gain), self.v(idx.bias), self.params.config().layer_norm_eps)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, self.v(w))?;
        g.add_row(y, self.v(b))
    }

    fn mlp(&self, g: &mut Graph, idx: MlpIdx, x: Var) -> Result<Var> {
        let h = self.linear(g, x, idx.w1, idx.b1)?;
        let h = g.gelu(h);
        self.linear(g, h, idx.w2, idx.b2)
    }

    fn attention(&self, g: &mut Graph, idx: AttnIdx, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let heads = self.params.config().heads;
        let dh = self.d() / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let q = self.linear(g, xq, idx.wq, idx.bq)?;
        let k = self.linear(g, xkv, idx.wk, idx.bk)?;
        let v = self.linear(g, xkv, idx.wv, idx.bv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) =
                (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?);
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = if causal { g.causal_softmax(scores)? } else { g.softmax(scores)? };
            outs.push(g.matmul(p, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.linear(g, o, idx.wo, idx.bo)
    }

    pub fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        g.gather_rows(self.v(self.params.layout.token_embedding), ids)
    }

    /// Bidirectional encoder over `<img> regions </img> <bos> text <eos>`.
    pub fn encode(&self, g: &mut Graph, input: &ModelInput) -> Result<EncoderOutput> {
        let cfg = self.params.config();
        let lay = &self.params.layout;
        let r = input.regions.rows();
        let t = input.token_ids.len();
        let len = r + t + 4;
        if len > cfg.max_positions {
            bail!(Capacity, "encoder input of {} slots exceeds the {} configured positions", len, cfg.max_positions);
        }
        if t == 0 {
            bail!(Usage, "cannot encode empty text");
        }
        let regions = g.constant(input.regions.clone());
        let projected = project_regions(g, regions, self.v(lay.projection_weight), self.v(lay.projection_bias))?;
        let mi = assemble_input(g, projected, &input.token_ids, self.v(lay.token_embedding))?;

        let pos = if cfg.region_positions {
            g.gather_rows(self.v(lay.encoder_positions), &(0..len).collect::<Vec<_>>())?
        } else {
            let visual = g.constant(Tensor::zeros(&[r + 2, self.d()]));
            let text = g.gather_rows(self.v(lay.encoder_positions), &(r + 2..len).collect::<Vec<_>>())?;
            g.concat_rows(&[visual, text])?
        };
        let kinds: Vec<usize> = mi.layout.slots.iter().map(|s| usize::from(!s.is_visual())).collect();
        let modality = g.gather_rows(self.v(lay.modality), &kinds)?;
        let x = g.add(mi.embeddings, pos)?;
        let x = g.add(x, modality)?;
        let mut x = self.layer_norm(g, lay.encoder_embed_ln, x)?;

        for layer in &lay.encoder {
            let a = self.attention(g, layer.attn, x, x, false)?;
            let s = g.add(x, a)?;
            x = self.layer_norm(g, layer.ln1, s)?;
            let f = self.mlp(g, layer.ffn, x)?;
            let s = g.add(x, f)?;
            x = self.layer_norm(g, layer.ln2, s)?;
        }

        let text = mi.layout.text_range();
        let text_states = g.slice_rows(x, text.start, t)?;
        let text_embeddings = self.embed_tokens(g, &input.token_ids)?;
        let sum = g.add(text_embeddings, text_states)?;
        let text_average = g.scale(sum, 0.5);
        Ok(EncoderOutput { hidden: x, layout: mi.layout, text_states, text_embeddings, text_average })
    }

    /// Causal decoder over `inputs` (`S × d`) with cross-attention to the
    /// full encoder output; returns all `S` hidden states.
    pub fn decode(&self, g: &mut Graph, enc: &EncoderOutput, inputs: Var) -> Result<Var> {
        let cfg = self.params.config();
        let lay = &self.params.layout;
        let s = g.value(inputs).rows();
        if s == 0 {
            bail!(Usage, "decoder needs a non-empty prefix");
        }
        if s > cfg.max_positions {
            bail!(Capacity, "decoder input of {} steps exceeds the {} configured positions", s, cfg.max_positions);
        }
        let pos = g.gather_rows(self.v(lay.decoder_positions), &(0..s).collect::<Vec<_>>())?;
        let y = g.add(inputs, pos)?;
        let mut y = self.layer_norm(g, lay.decoder_embed_ln, y)?;
        for layer in &lay.decoder {
            let a = self.attention(g, layer.self_attn, y, y, true)?;
            let sum = g.add(y, a)?;
            y = self.layer_norm(g, layer.ln1, sum)?;
            let c = self.attention(g, layer.cross, y, enc.hidden, false)?;
            let sum = g.add(y, c)?;
            y = self.layer_norm(g, layer.ln2, sum)?;
            let f = self.mlp(g, layer.ffn, y)?;
            let sum = g.add(y, f)?;
            y = self.layer_norm(g, layer.ln3, sum)?;
        }
        Ok(y)
    }

    /// Hidden state of the last prefix position.
    pub fn decode_step(&self, g: &mut Graph, enc: &EncoderOutput, prefix: Var) -> Result<Var> {
        let h = self.decode(g, enc, prefix)?;
        let s = g.value(h).rows();
        g.slice_rows(h, s - 1, 1)
    }

    /// Embeddings of `<bos>` and the task token.
    pub fn task_prefix(&self, g: &mut Graph, task: Task) -> Result<Var> {
        self.embed_tokens(g, &[Special::Bos.id(), task.decoder_token().id()])
    }

    pub fn candidates(&self, g: &mut Graph, enc: &EncoderOutput, task: Task) -> Result<CandidateSet> {
        let ids: Vec<usize> = task.pointer_specials().iter().map(|s| s.id()).collect();
        if ids.is_empty() {
            bail!(Usage, "{} does not generate pointer indices", task);
        }
        let specials = self.embed_tokens(g, &ids)?;
        let matrix = g.concat_rows(&[enc.text_average, specials])?;
        Ok(CandidateSet { matrix, task, text_len: enc.text_len() })
    }

    /// Decoder input rows for already generated pointer items: the
    /// candidate vector each item selected.
    pub fn pointer_inputs(&self, g: &mut Graph, cands: &CandidateSet, items: &[TargetItem]) -> Result<Var> {
        let mut idx = Vec::with_capacity(items.len());
        for &it in items {
            match item_to_candidate(cands.task, cands.text_len, it) {
                Some(c) => idx.push(c),
                None => bail!(Index, "{:?} is not a candidate of {} with T = {}", it, cands.task, cands.text_len),
            }
        }
        g.gather_rows(cands.matrix, &idx)
    }

    /// Full decoder input for a pointer task: `<bos> <task>` then items.
    pub fn pointer_decoder_input(&self, g: &mut Graph, cands: &CandidateSet, items: &[TargetItem]) -> Result<Var> {
        let prefix = self.task_prefix(g, cands.task)?;
        if items.is_empty() {
            return Ok(prefix);
        }
        let rest = self.pointer_inputs(g, cands, items)?;
        g.concat_rows(&[prefix, rest])
    }

    /// Dot product of each hidden row with every candidate.
    pub fn pointer_logits(&self, g: &mut Graph, cands: &CandidateSet, hidden: Var) -> Result<Var> {
        g.matmul_t(hidden, cands.matrix)
    }

    pub fn pointer_distribution(&self, g: &mut Graph, cands: &CandidateSet, hidden: Var) -> Result<Var> {
        let l = self.pointer_logits(g, cands, hidden)?;
        g.softmax(l)
    }

    /// Vocabulary logits through the shared embedding table.
    pub fn lm_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        g.matmul_t(hidden, self.v(self.params.layout.token_embedding))
    }

    pub fn lm_distribution(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let l = self.lm_logits(g, hidden)?;
        g.softmax(l)
    }

    /// Decoder input for masked region modeling: `<bos> <mrm>` then one
    /// `<zero>` or `<feat>` per region.
    pub fn mrm_decoder_input(&self, g: &mut Graph, plan: &RegionMaskPlan) -> Result<Var> {
        let mut ids = vec![Special::Bos.id(), Special::Mrm.id()];
        ids.extend(plan.placeholders.iter().map(|s| s.id()));
        self.embed_tokens(g, &ids)
    }

    /// Class logits (`Z × K`) at the `<zero>` slots.
    pub fn mrm_logits(&self, g: &mut Graph, enc: &EncoderOutput, plan: &RegionMaskPlan) -> Result<Var> {
        if plan.masked.is_empty() {
            bail!(Usage, "masked region prediction needs at least one masked region");
        }
        let input = self.mrm_decoder_input(g, plan)?;
        let h = self.decode(g, enc, input)?;
        let rows: Vec<usize> = plan.masked.iter().map(|&z| z + 2).collect();
        let hz = g.gather_rows(h, &rows)?;
        self.mlp(g, self.params.layout.mrm_head, hz)
    }

    /// One class distribution per masked region.
    pub fn mrm_predict(&self, g: &mut Graph, enc: &EncoderOutput, plan: &RegionMaskPlan) -> Result<Var> {
        let l = self.mrm_logits(g, enc, plan)?;
        g.softmax(l)
    }

    /// Sentiment logits (`1 × 3`) from the `<msp>` slot of the two-token
    /// decoder prefix.
    pub fn msp_logits(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Var> {
        let prefix = self.task_prefix(g, Task::Msp)?;
        let h = self.decode(g, enc, prefix)?;
        let last = g.slice_rows(h, 1, 1)?;
        self.mlp(g, self.params.layout.msp_head, last)
    }

    pub fn msp_predict(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Var> {
        let l = self.msp_logits(g, enc)?;
        g.softmax(l)
    }
}
