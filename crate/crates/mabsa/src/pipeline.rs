//! The lifecycle steps shared by the command line and the experiment
//! harness: vocabulary construction, pre-training, fine-tuning, evaluation.

use mabsa_core::codec::Task;
use mabsa_core::corpus::MultimodalExample;
use mabsa_core::metrics::MetricReport;
use mabsa_core::model::ModelParams;
use mabsa_core::trainer::{
    evaluate_task, finetune, prepare_all, pretrain, FinetuneRecord, OptimizerState, Prepared, PretrainRecord,
};
use mabsa_core::vocab::{split_words, Vocabulary};
use mabsa_core::weak_label::{annotate, AnpVocabulary, AspectGazetteer, OpinionLexicon};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{usage, Result};

/// Seeded random subset of `n` items, or everything when `n` is `None`.
pub fn subsample<T: Clone>(items: &[T], n: Option<usize>, seed: u64) -> Result<Vec<T>> {
    let Some(n) = n else { return Ok(items.to_vec()) };
    if n == 0 || n > items.len() {
        return Err(usage(format!("train size {n} must be between 1 and the {} available examples", items.len())));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

/// Tokens of `corpus` by frequency, then any ANP words not yet present so
/// every generation target is in vocabulary.
pub fn build_vocab(corpus: &[MultimodalExample], anps: Option<&AnpVocabulary>, min_freq: usize) -> Result<Vocabulary> {
    let sentences = corpus.iter().map(|ex| ex.tokens()).collect::<mabsa_core::Result<Vec<_>>>()?;
    let base = Vocabulary::build(&sentences, min_freq)?;
    let extra = anps.into_iter().flat_map(|a| a.entries()).flat_map(|e| split_words(e));
    let ordinary = base.tokens()[mabsa_core::vocab::Special::COUNT..].iter().cloned();
    Ok(Vocabulary::from_tokens(ordinary.chain(extra))?)
}

/// `(regions, classes, feature_dim)` of the first example.
pub fn data_shape(corpus: &[MultimodalExample]) -> Result<(usize, usize, usize)> {
    let first = corpus.first().ok_or_else(|| usage("corpus is empty"))?;
    let feats = first.regions.materialize();
    let dim = feats.first().map_or(0, |f| f.vector.len());
    let classes = first.region_class_dists.first().map_or(0, Vec::len);
    Ok((feats.len(), classes, dim))
}

/// Copies of `corpus` with missing aspects and opinions filled from the
/// resources. Gold fields are kept.
pub fn weak_label(
    corpus: &[MultimodalExample],
    lexicon: &OpinionLexicon,
    gazetteer: &AspectGazetteer,
) -> Result<Vec<MultimodalExample>> {
    corpus
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            annotate(&mut ex, lexicon, gazetteer)?;
            Ok(ex)
        })
        .collect()
}

/// Fresh parameters shaped by `cfg.model` with data-shaped fields taken
/// from `corpus`.
pub fn init_params(cfg: &RunConfig, vocab: &Vocabulary, corpus: &[MultimodalExample]) -> Result<ModelParams> {
    let (regions, classes, dim) = data_shape(corpus)?;
    let model = cfg.model_for(vocab.len(), regions, classes.max(1), dim);
    Ok(ModelParams::init(model, cfg.seed)?)
}

pub fn prepare(ckpt: &Checkpoint, corpus: &[MultimodalExample]) -> Result<Vec<Prepared>> {
    Ok(prepare_all(corpus, &ckpt.vocab, ckpt.anps.as_ref(), ckpt.params.config().feature_dim)?)
}

pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<PretrainRecord>,
}

/// Builds the vocabulary from `corpus` and the ANP list, initializes and
/// runs alternating pre-training. `on_epoch` receives a snapshot after
/// every epoch.
pub fn run_pretrain<F>(
    cfg: &RunConfig,
    corpus: &[MultimodalExample],
    anps: Option<AnpVocabulary>,
    mut on_epoch: F,
) -> Result<PretrainRun>
where
    F: FnMut(usize, &Checkpoint) -> Result<()>,
{
    if cfg.train.tasks.contains(&Task::Aog) && anps.is_none() {
        return Err(usage("the aog objective needs an ANP vocabulary (--anps)"));
    }
    let vocab = build_vocab(corpus, anps.as_ref(), cfg.data.vocab_min_freq)?;
    let params = init_params(cfg, &vocab, corpus)?;
    let mut ckpt = Checkpoint { params, vocab, anps };
    let examples = prepare(&ckpt, corpus)?;
    let (vocab, anps) = (ckpt.vocab.clone(), ckpt.anps.clone());
    let mut failure = None;
    let history =
        pretrain(&mut ckpt.params, &examples, &cfg.train, |epoch, params: &ModelParams, _: &OptimizerState| {
            let snap = Checkpoint { params: params.clone(), vocab: vocab.clone(), anps: anps.clone() };
            on_epoch(epoch, &snap).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                mabsa_core::Error::Training(msg)
            })
        });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PretrainRun { checkpoint: ckpt, history: history? })
}

/// Where fine-tuning starts.
#[allow(clippy::large_enum_variant)]
pub enum Start {
    Checkpoint(Checkpoint),
    /// Random initialization with the given tables.
    Scratch {
        vocab: Vocabulary,
        anps: Option<AnpVocabulary>,
    },
}

pub struct FinetuneRun {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<FinetuneRecord>,
}

pub fn run_finetune<F>(
    cfg: &RunConfig,
    task: Task,
    train: &[MultimodalExample],
    dev: &[MultimodalExample],
    start: Start,
    mut on_epoch: F,
) -> Result<FinetuneRun>
where
    F: FnMut(&FinetuneRecord) -> Result<()>,
{
    let mut ckpt = match start {
        Start::Checkpoint(c) => c,
        Start::Scratch { vocab, anps } => {
            let params = init_params(cfg, &vocab, train)?;
            Checkpoint { params, vocab, anps }
        }
    };
    let train_p = prepare(&ckpt, train)?;
    let dev_p = prepare(&ckpt, dev)?;
    let mut failure = None;
    let outcome = finetune(task, &mut ckpt.params, &train_p, &dev_p, &cfg.train, |record, _| {
        on_epoch(record).map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            mabsa_core::Error::Training(msg)
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = outcome?;
    let best = Checkpoint { params: outcome.best, vocab: ckpt.vocab.clone(), anps: ckpt.anps.clone() };
    Ok(FinetuneRun { best, last: ckpt, best_epoch: outcome.best_epoch, history: outcome.history })
}

pub fn run_eval(
    ckpt: &Checkpoint,
    task: Task,
    corpus: &[MultimodalExample],
    masc_on_predicted: bool,
) -> Result<MetricReport> {
    if !Task::DOWNSTREAM.contains(&task) {
        return Err(usage(format!("{task} is not a downstream task (jmasa, mate, masc)")));
    }
    let examples = prepare(ckpt, corpus)?;
    Ok(evaluate_task(&ckpt.params, &examples, task, masc_on_predicted)?)
}
