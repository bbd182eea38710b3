//! Task losses, the optimizer, alternating multi-task pre-training and
//! downstream fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    build_aoe_target, build_downstream_target, item_to_candidate, mask_regions, mask_text, parse_target, Parsed,
    RegionMaskPlan, TargetItem, Task,
};
use crate::corpus::{AspectLabel, MultimodalExample, Sentiment, Span};
use crate::error::{bail, Error, Result};
use crate::features::region_matrix;
use crate::graph::{Graph, Var};
use crate::math;
use crate::metrics::{evaluate, MetricReport};
use crate::model::{generate, GenerationOutput, Model, ModelInput, ModelParams};
use crate::tensor::Tensor;
use crate::vocab::{Special, Vocabulary};
use crate::weak_label::{select_anp, AnpVocabulary};

/// Multipliers of the five pre-training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mlm: f64,
    pub aoe: f64,
    pub mrm: f64,
    pub aog: f64,
    pub msp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mlm: 1.0, aoe: 1.0, mrm: 1.0, aog: 1.0, msp: 1.0 }
    }
}

impl LossWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Mlm => self.mlm,
            Task::Aoe => self.aoe,
            Task::Mrm => self.mrm,
            Task::Aog => self.aog,
            Task::Msp => self.msp,
            _ => 1.0,
        }
    }

    pub fn set(&mut self, task: Task, value: f64) {
        match task {
            Task::Mlm => self.mlm = value,
            Task::Aoe => self.aoe = value,
            Task::Mrm => self.mrm = value,
            Task::Aog => self.aog = value,
            Task::Msp => self.msp = value,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambdas: LossWeights,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub pretrain_batch: usize,
    pub finetune_batch: usize,
    pub seed: u64,
    /// Pre-training objectives in round-robin order.
    pub tasks: Vec<Task>,
    pub text_mask_rate: f64,
    pub region_mask_rate: f64,
    /// Restrict the MLM loss to the corrupted positions.
    pub mlm_masked_only: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// MASC accuracy over predicted spans only.
    pub masc_on_predicted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: LossWeights::default(),
            learning_rate: 5e-5,
            pretrain_epochs: 40,
            finetune_epochs: 35,
            pretrain_batch: 64,
            finetune_batch: 16,
            seed: 0,
            tasks: Task::PRETRAIN.to_vec(),
            text_mask_rate: 0.15,
            region_mask_rate: 0.15,
            mlm_masked_only: false,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            masc_on_predicted: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for t in Task::PRETRAIN {
            let l = self.lambdas.get(t);
            if !(l >= 0.0 && l.is_finite()) {
                bail!(Config, "lambda for {} must be a finite non-negative number, got {}", t, l);
            }
        }
        if self.pretrain_epochs == 0 || self.finetune_epochs == 0 {
            bail!(Config, "epoch counts must be at least 1");
        }
        if self.pretrain_batch == 0 || self.finetune_batch == 0 {
            bail!(Config, "batch sizes must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.learning_rate);
        }
        if self.tasks.is_empty() {
            bail!(Config, "no pre-training task enabled");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if !Task::PRETRAIN.contains(t) {
                bail!(Config, "{} is not a pre-training task", t);
            }
            if self.tasks[..i].contains(t) {
                bail!(Config, "{} listed twice in the task order", t);
            }
        }
        for (name, r) in [("text_mask_rate", self.text_mask_rate), ("region_mask_rate", self.region_mask_rate)] {
            if !(0.0..=1.0).contains(&r) {
                bail!(Config, "{} must lie in [0, 1], got {}", name, r);
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            bail!(Config, "invalid optimizer constants");
        }
        if self.clip_norm < 0.0 {
            bail!(Config, "clip_norm must be non-negative");
        }
        Ok(())
    }
}

// ── optimizer ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { first: zeros.clone(), second: zeros, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { learning_rate: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One bias-corrected adaptive-moment update. A tensor whose gradient is
/// entirely zero only has its moments decayed.
pub fn optimizer_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimizerState,
    adam: Adam,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != names.len() {
        bail!(
            Usage,
            "optimizer given {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        );
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            bail!(Dimension, "gradient of `{}` has shape {:?}, parameter {:?}", name, g.shape(), p.shape());
        }
        if !g.is_finite() {
            bail!(Training, "non-finite gradient for parameter `{}`", name);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(adam.beta1, t as f64);
    let c2 = 1.0 - libm::pow(adam.beta2, t as f64);
    for (i, g) in grads.iter().enumerate() {
        let active = g.data().iter().any(|&x| x != 0.0);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = params[i].data_mut();
        for j in 0..g.numel() {
            let gj = g.data()[j];
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
            if active {
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= adam.learning_rate * mh / (math::sqrt(vh) + adam.eps);
            }
        }
    }
    Ok(())
}

// ── example preparation ────────────────────────────────────────────────

/// An example converted to ids and tensors, with whatever supervision it
/// carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub token_ids: Vec<usize>,
    pub regions: Tensor,
    pub class_dists: Option<Tensor>,
    pub aspects: Option<Vec<AspectLabel>>,
    pub opinions: Option<Vec<Span>>,
    pub sentiment: Option<Sentiment>,
    /// Token ids of the highest-scoring adjective-noun pair.
    pub anp_ids: Option<Vec<usize>>,
}

impl Prepared {
    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn input(&self) -> ModelInput {
        ModelInput { token_ids: self.token_ids.clone(), regions: self.regions.clone() }
    }

    pub fn aspect_spans(&self) -> Option<Vec<Span>> {
        self.aspects.as_ref().map(|a| a.iter().map(|l| l.span).collect())
    }

    /// Config error unless the fields `task` trains on are present.
    pub fn require(&self, task: Task) -> Result<()> {
        let missing = match task {
            Task::Mlm => None,
            Task::Aoe if self.aspects.is_none() => Some("aspects"),
            Task::Aoe if self.opinions.is_none() => Some("opinions"),
            Task::Mrm if self.class_dists.is_none() => Some("region_class_dists"),
            Task::Aog if self.anp_ids.is_none() => Some("anp_dist"),
            Task::Msp if self.sentiment.is_none() => Some("sentiment"),
            Task::Jmasa | Task::Mate | Task::Masc if self.aspects.is_none() => Some("aspects"),
            Task::Jmasa | Task::Masc
                if self.aspects.as_ref().is_some_and(|a| a.iter().any(|l| l.sentiment.is_none())) =>
            {
                Some("aspects[].sentiment")
            }
            _ => None,
        };
        match missing {
            Some(field) => bail!(Config, "{} needs the `{}` field", task, field),
            None => Ok(()),
        }
    }
}

/// Tokenizes and tensorizes `ex`. ANP supervision is only attached when
/// `anps` is given.
pub fn prepare(
    ex: &MultimodalExample,
    vocab: &Vocabulary,
    anps: Option<&AnpVocabulary>,
    feature_dim: usize,
) -> Result<Prepared> {
    let token_ids = vocab.encode_text(&ex.text)?.ids;
    let regions = region_matrix(&ex.regions.materialize(), feature_dim, &[])?;
    let class_dists = if ex.region_class_dists.is_empty() {
        None
    } else {
        let k = ex.region_class_dists[0].len();
        if ex.region_class_dists.len() != regions.rows() || ex.region_class_dists.iter().any(|d| d.len() != k) {
            bail!(Dimension, "region_class_dists must hold one equal-length row per region");
        }
        Some(Tensor::matrix(regions.rows(), k, ex.region_class_dists.concat())?)
    };
    let anp_ids = match (anps, &ex.anp_dist) {
        (Some(a), Some(d)) => Some(vocab.encode_tokens(&select_anp(d, a)?.tokens)),
        _ => None,
    };
    Ok(Prepared {
        token_ids,
        regions,
        class_dists,
        aspects: ex.aspects.clone(),
        opinions: ex.opinions.clone(),
        sentiment: ex.sentiment,
        anp_ids,
    })
}

pub fn prepare_all(
    examples: &[MultimodalExample],
    vocab: &Vocabulary,
    anps: Option<&AnpVocabulary>,
    feature_dim: usize,
) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| prepare(ex, vocab, anps, feature_dim).map_err(|e| at_example(i, e)))
        .collect()
}

fn at_example(i: usize, e: Error) -> Error {
    let wrap = |m: String| format!("example {i}: {m}");
    match e {
        Error::Dimension(m) => Error::Dimension(wrap(m)),
        Error::Index(m) => Error::Index(wrap(m)),
        Error::Validation(m) => Error::Validation(wrap(m)),
        Error::Usage(m) => Error::Usage(wrap(m)),
        Error::Capacity(m) => Error::Capacity(wrap(m)),
        Error::Config(m) => Error::Config(wrap(m)),
        Error::Training(m) => Error::Training(wrap(m)),
    }
}

// ── losses ──────────────────────────────────────────────────────────────

/// Teacher-forced pointer cross-entropy summed over the target steps in
/// `scored` (all steps when `None`).
fn pointer_loss(
    model: &Model,
    g: &mut Graph,
    input: &ModelInput,
    task: Task,
    items: &[TargetItem],
    scored: Option<&[usize]>,
) -> Result<Var> {
    let enc = model.encode(g, input)?;
    let cands = model.candidates(g, &enc, task)?;
    let t = enc.text_len();
    let dec_in = model.pointer_decoder_input(g, &cands, &items[..items.len() - 1])?;
    let h = model.decode(g, &enc, dec_in)?;
    let all: Vec<usize> = (0..items.len()).collect();
    let steps = scored.unwrap_or(&all);
    let rows: Vec<usize> = steps.iter().map(|&s| s + 1).collect();
    let mut targets = Vec::with_capacity(steps.len());
    for &s in steps {
        match item_to_candidate(task, t, items[s]) {
            Some(c) => targets.push(c),
            None => bail!(Index, "target item {:?} is not a {} candidate", items[s], task),
        }
    }
    let hs = g.gather_rows(h, &rows)?;
    let logits = model.pointer_logits(g, &cands, hs)?;
    g.cross_entropy(logits, &targets)
}

/// Teacher-forced language-model loss of `target` after `<bos> <task>`,
/// summed over `scored` steps (all when `None`).
fn token_loss(
    model: &Model,
    g: &mut Graph,
    input: &ModelInput,
    task: Task,
    target: &[usize],
    scored: Option<&[usize]>,
) -> Result<Var> {
    let enc = model.encode(g, input)?;
    let prefix = model.task_prefix(g, task)?;
    let dec_in = if target.len() > 1 {
        let rest = model.embed_tokens(g, &target[..target.len() - 1])?;
        g.concat_rows(&[prefix, rest])?
    } else {
        prefix
    };
    let h = model.decode(g, &enc, dec_in)?;
    let all: Vec<usize> = (0..target.len()).collect();
    let steps = scored.unwrap_or(&all);
    let rows: Vec<usize> = steps.iter().map(|&s| s + 1).collect();
    let targets: Vec<usize> = steps.iter().map(|&s| target[s]).collect();
    let hs = g.gather_rows(h, &rows)?;
    let logits = model.lm_logits(g, hs)?;
    g.cross_entropy(logits, &targets)
}

/// Per-example loss of `task`, before batch averaging and λ scaling.
/// Randomness (text and region masking) is drawn from `rng`.
pub fn example_loss<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph,
    ex: &Prepared,
    task: Task,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Var> {
    ex.require(task)?;
    match task {
        Task::Mlm => {
            let vocab_len = model.params.config().vocab_size;
            let masked = mask_text(&ex.token_ids, cfg.text_mask_rate, vocab_len, rng);
            let input = ModelInput { token_ids: masked.corrupted, regions: ex.regions.clone() };
            if cfg.mlm_masked_only {
                let steps: Vec<usize> = masked.positions.iter().map(|p| p - 1).collect();
                if steps.is_empty() {
                    return Ok(g.constant(Tensor::scalar(0.0)));
                }
                token_loss(model, g, &input, task, &ex.token_ids, Some(&steps))
            } else {
                token_loss(model, g, &input, task, &ex.token_ids, None)
            }
        }
        Task::Aoe => {
            let aspects = ex.aspect_spans().unwrap_or_default();
            let y = build_aoe_target(&aspects, ex.opinions.as_deref().unwrap_or_default())?;
            pointer_loss(model, g, &ex.input(), task, &y.items, None)
        }
        Task::Mrm => {
            let q = ex.class_dists.as_ref().expect("checked by require");
            let plan = mask_regions(ex.regions.rows(), cfg.region_mask_rate, rng)?;
            mrm_loss(model, g, ex, q, &plan)
        }
        Task::Aog => {
            let mut target = ex.anp_ids.clone().expect("checked by require");
            target.push(Special::Eos.id());
            token_loss(model, g, &ex.input(), task, &target, None)
        }
        Task::Msp => {
            let enc = model.encode(g, &ex.input())?;
            let logits = model.msp_logits(g, &enc)?;
            g.cross_entropy(logits, &[ex.sentiment.expect("checked by require").index()])
        }
        Task::Jmasa | Task::Mate | Task::Masc => {
            let y = build_downstream_target(task, ex.aspects.as_deref().unwrap_or_default())?;
            if task == Task::Masc {
                let steps: Vec<usize> = (0..y.items.len()).filter(|s| s % 3 == 2).collect();
                if steps.is_empty() {
                    return Ok(g.constant(Tensor::scalar(0.0)));
                }
                pointer_loss(model, g, &ex.input(), task, &y.items, Some(&steps))
            } else {
                pointer_loss(model, g, &ex.input(), task, &y.items, None)
            }
        }
    }
}

/// Mean over masked regions of `KL(q ‖ p)`, with the masked features
/// zeroed in the encoder input.
pub fn mrm_loss(model: &Model, g: &mut Graph, ex: &Prepared, q: &Tensor, plan: &RegionMaskPlan) -> Result<Var> {
    let mut regions = ex.regions.clone();
    for &z in &plan.masked {
        regions.row_mut(z).iter_mut().for_each(|x| *x = 0.0);
    }
    let input = ModelInput { token_ids: ex.token_ids.clone(), regions };
    let enc = model.encode(g, &input)?;
    let p = model.mrm_predict(g, &enc, plan)?;
    let k = q.cols();
    let mut rows = Vec::with_capacity(plan.masked.len() * k);
    for &z in &plan.masked {
        rows.extend_from_slice(q.row(z));
    }
    let qz = Tensor::matrix(plan.masked.len(), k, rows)?;
    let kl = g.kl_divergence(&qz, p)?;
    Ok(g.scale(kl, 1.0 / plan.masked.len() as f64))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    /// Batch-mean loss before λ scaling.
    pub loss: f64,
    pub weighted: f64,
    pub grad_norm: f64,
}

/// Builds the batch-mean loss of `task` over `batch`, backpropagates the
/// λ-scaled loss and applies one optimizer update.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    batch: &[&Prepared],
    task: Task,
    weight: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepLoss> {
    if batch.is_empty() {
        bail!(Usage, "empty batch");
    }
    let mut g = Graph::new();
    let (total, vars) = {
        let model = Model::bind(&mut g, params, true);
        let mut total: Option<Var> = None;
        for ex in batch {
            let l = example_loss(&model, &mut g, ex, task, cfg, rng)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        (total.expect("non-empty batch"), model.vars().to_vec())
    };
    let mean = g.scale(total, 1.0 / batch.len() as f64);
    let loss = g.value(mean).item();
    if !loss.is_finite() {
        bail!(Training, "{} loss became non-finite", task);
    }
    let root = g.scale(mean, weight);
    let mut grads = g.backward(root)?;
    let mut gs: Vec<Tensor> = vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let grad_norm = clip_global_norm(&mut gs, cfg.clip_norm);
    let names = params.names().to_vec();
    optimizer_step(params.tensors_mut(), &names, &gs, state, Adam::from_config(cfg))?;
    Ok(StepLoss { loss, weighted: weight * loss, grad_norm })
}

/// Loss of `task` on `examples` without updating anything.
pub fn mean_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    examples: &[&Prepared],
    task: Task,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if examples.is_empty() {
        bail!(Usage, "no examples");
    }
    let mut sum = 0.0;
    for ex in examples {
        let mut g = Graph::new();
        let model = Model::bind(&mut g, params, false);
        let l = example_loss(&model, &mut g, ex, task, cfg, rng)?;
        sum += g.value(l).item();
    }
    Ok(sum / examples.len() as f64)
}

// ── loops ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub weighted: f64,
}

/// Epoch-mean loss of every task, in order of first appearance.
pub fn epoch_means(history: &[PretrainRecord]) -> Vec<(usize, Task, f64, f64)> {
    let mut out: Vec<(usize, Task, f64, f64, usize)> = Vec::new();
    for r in history {
        match out.iter_mut().find(|o| o.0 == r.epoch && o.1 == r.task) {
            Some(o) => {
                o.2 += r.loss;
                o.3 += r.weighted;
                o.4 += 1;
            }
            None => out.push((r.epoch, r.task, r.loss, r.weighted, 1)),
        }
    }
    out.into_iter().map(|(e, t, l, w, n)| (e, t, l / n as f64, w / n as f64)).collect()
}

fn check_supervision(examples: &[Prepared], tasks: &[Task]) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        for &t in tasks {
            ex.require(t).map_err(|e| at_example(i, e))?;
        }
    }
    Ok(())
}

fn check_model(params: &ModelParams, examples: &[Prepared], tasks: &[Task]) -> Result<()> {
    let cfg = params.config();
    for (i, ex) in examples.iter().enumerate() {
        if ex.regions.cols() != cfg.feature_dim && ex.regions.rows() > 0 {
            bail!(
                Dimension,
                "example {}: regions have {} features, model expects {}",
                i,
                ex.regions.cols(),
                cfg.feature_dim
            );
        }
        if let Some(&bad) = ex.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            bail!(Index, "example {}: token id {} outside the model vocabulary of {}", i, bad, cfg.vocab_size);
        }
        if tasks.contains(&Task::Mrm) {
            if let Some(q) = &ex.class_dists {
                if q.cols() != cfg.classes {
                    bail!(Dimension, "example {}: {} region classes, model predicts {}", i, q.cols(), cfg.classes);
                }
            }
        }
    }
    Ok(())
}

/// Alternating pre-training: every batch of every epoch is visited once per
/// enabled task, in the configured order, each visit one optimizer step.
/// `on_epoch` runs after each epoch (for checkpointing).
pub fn pretrain<F>(
    params: &mut ModelParams,
    examples: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<PretrainRecord>>
where
    F: FnMut(usize, &ModelParams, &OptimizerState) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        bail!(Config, "pre-training corpus is empty");
    }
    check_supervision(examples, &cfg.tasks)?;
    check_model(params, examples, &cfg.tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(params.tensors());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.pretrain_batch) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &examples[i]).collect();
            for &task in &cfg.tasks {
                step += 1;
                let s = train_step(params, &mut state, &batch, task, cfg.lambdas.get(task), cfg, &mut rng)?;
                history.push(PretrainRecord { epoch, step, task, loss: s.loss, weighted: s.weighted });
            }
        }
        on_epoch(epoch, params, &state)?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    /// Epoch-mean training loss.
    pub loss: f64,
    pub dev: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters of the epoch with the best dev score (the last epoch
    /// without a dev set).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<FinetuneRecord>,
}

/// The number a dev report is ranked by: accuracy for MASC, F1 otherwise.
pub fn selection_score(report: &MetricReport) -> f64 {
    report.accuracy.unwrap_or(report.f1)
}

/// Teacher-forced fine-tuning on a downstream task with per-epoch dev
/// evaluation and best-dev selection.
pub fn finetune<F>(
    task: Task,
    params: &mut ModelParams,
    train: &[Prepared],
    dev: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&FinetuneRecord, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if !Task::DOWNSTREAM.contains(&task) {
        bail!(Usage, "{} is not a downstream task", task);
    }
    if train.is_empty() {
        bail!(Config, "fine-tuning set is empty");
    }
    check_supervision(train, &[task])?;
    check_supervision(dev, &[task])?;
    check_model(params, train, &[task])?;
    check_model(params, dev, &[task])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(params.tensors());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.finetune_epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.finetune_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.finetune_batch) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let s = train_step(params, &mut state, &batch, task, 1.0, cfg, &mut rng)?;
            sum += s.loss;
            n += 1;
        }
        let dev_report =
            if dev.is_empty() { None } else { Some(evaluate_task(params, dev, task, cfg.masc_on_predicted)?) };
        let record = FinetuneRecord { epoch, loss: sum / n as f64, dev: dev_report };
        let score = record.dev.as_ref().map_or(0.0, selection_score);
        if best.as_ref().is_none_or(|b| score > b.0 || record.dev.is_none()) {
            best = Some((score, epoch, params.clone()));
        }
        on_epoch(&record, params)?;
        history.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(FinetuneOutcome { best, best_epoch, history })
}

/// Greedy grammar-constrained predictions, parsed.
pub fn predict(params: &ModelParams, examples: &[Prepared], task: Task) -> Result<Vec<Parsed>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let spans = ex.aspect_spans();
            if task == Task::Masc && spans.is_none() {
                bail!(Config, "example {}: MASC needs gold aspect spans", i);
            }
            let mut g = Graph::new();
            let model = Model::bind(&mut g, params, false);
            let out = generate(&model, &mut g, &ex.input(), task, spans.as_deref())?;
            match out.output {
                GenerationOutput::Pointer(y) => Ok(parse_target(task, &y.items, ex.text_len())),
                GenerationOutput::Tokens(_) => bail!(Usage, "{} does not produce tuples", task),
            }
        })
        .collect()
}

/// Generates on `examples` and scores against their gold aspects.
pub fn evaluate_task(
    params: &ModelParams,
    examples: &[Prepared],
    task: Task,
    masc_on_predicted: bool,
) -> Result<MetricReport> {
    check_supervision(examples, &[task])?;
    let preds = predict(params, examples, task)?;
    let golds: Vec<Vec<AspectLabel>> = examples.iter().map(|e| e.aspects.clone().unwrap_or_default()).collect();
    evaluate(task, &preds, &golds, masc_on_predicted)
}
