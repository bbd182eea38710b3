//! The `mabsa` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mabsa_core::codec::Task;
use mabsa_core::corpus::split;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{usage, Result};
use crate::harness::{ablation, sweep, sweep_means, write_ablation, write_sweep, Downstream, Splits};
use crate::history::{finetune_rows, pretrain_rows, write_history};
use crate::io::{
    load_anps, load_gazetteer, load_jsonl, load_lexicon, write_anps, write_gazetteer, write_jsonl, write_lexicon,
    write_vocab,
};
use crate::pipeline::{build_vocab, run_eval, run_finetune, run_pretrain, subsample, weak_label, Start};

#[derive(Debug, Parser)]
#[command(name = "mabsa", version, about = "Generative multimodal aspect-based sentiment: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with train/dev/test splits and its lexicon, gazetteer and ANP list.
    Synth(SynthArgs),
    /// Fill missing aspect and opinion labels from a lexicon and a gazetteer.
    Label(LabelArgs),
    /// Alternating multi-objective pre-training.
    Pretrain(PretrainArgs),
    /// Fine-tune on a downstream task with per-epoch dev evaluation.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a labelled corpus; prints a JSON report.
    Eval(EvalArgs),
    /// Cumulative pre-training objective ablation; writes ablation.csv.
    Ablate(AblateArgs),
    /// Pre-trained versus scratch fine-tuning across training-set sizes; writes sweep.csv.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config of flat dotted keys, e.g. {"train.learning_rate": 0.001}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. --set model.hidden=64.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<RunConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o.extend(extra.iter().map(|(k, v)| format!("{k}={v}")));
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Number of examples to generate (overrides synth.examples).
    #[arg(long)]
    pub examples: Option<usize>,
    /// Output directory for the splits, resources and config.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// JSONL corpus to label.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Opinion lexicon, one `phrase<TAB>POS|NEU|NEG` per line.
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Aspect gazetteer, one phrase per line.
    #[arg(long)]
    pub gazetteer: PathBuf,
    /// Output directory; the labelled corpus keeps the input file name.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// JSONL training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// ANP vocabulary, one pair per line; needed by the aog objective.
    #[arg(long)]
    pub anps: Option<PathBuf>,
    /// Weak-label missing opinions with this lexicon before training.
    #[arg(long, requires = "gazetteer")]
    pub lexicon: Option<PathBuf>,
    /// Weak-label missing aspects with this gazetteer before training.
    #[arg(long, requires = "lexicon")]
    pub gazetteer: Option<PathBuf>,
    /// Output directory for checkpoints, vocabulary, history and config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// jmasa, mate or masc.
    #[arg(long)]
    pub task: Task,
    /// JSONL training corpus; scratch runs build their vocabulary from all of it.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dev corpus for per-epoch evaluation and best-epoch selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Start from this checkpoint instead of random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Fine-tune on a seeded random subset of this many examples.
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Output directory for best.ckpt, last.ckpt, history and config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// jmasa, mate or masc.
    #[arg(long)]
    pub task: Task,
    /// Labelled JSONL corpus to score.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint written by pretrain or finetune.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// MASC accuracy over correctly extracted aspects only.
    #[arg(long)]
    pub masc_on_predicted: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training split; pre-training always uses all of it.
    #[arg(long)]
    pub train: PathBuf,
    /// Dev split for best-epoch selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Test split that every run is scored on.
    #[arg(long)]
    pub test: PathBuf,
    /// ANP vocabulary; needed when aog is among the objectives.
    #[arg(long)]
    pub anps: Option<PathBuf>,
    /// Downstream task.
    #[arg(long, default_value = "jmasa")]
    pub task: Task,
    /// Lower bound on fine-tuning optimizer steps; small subsets get more epochs.
    #[arg(long, default_value_t = 0)]
    pub min_steps: usize,
    /// Dev examples scored per fine-tuning epoch.
    #[arg(long, default_value_t = 40)]
    pub dev_limit: usize,
    /// Output directory for the CSV and config.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Fine-tune every stage on a seeded subset of this many examples.
    #[arg(long)]
    pub train_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Comma-separated training-set sizes; `full` is the whole split.
    #[arg(long, default_value = "32,full")]
    pub sizes: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Label(a) => label(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn file_name(path: &Path) -> Result<&std::ffi::OsStr> {
    path.file_name().ok_or_else(|| usage(format!("{} has no file name", path.display())))
}

fn synth(a: SynthArgs) -> Result<()> {
    let extra: Vec<(&str, String)> = a.examples.map(|n| ("synth.examples", n.to_string())).into_iter().collect();
    let cfg = a.cfg.resolve(&extra)?;
    let corpus = cfg.synth.generate()?;
    let (train, dev, test) = split(&corpus.examples, cfg.data.split, cfg.seed)?;
    write_jsonl(&a.out.join("train.jsonl"), &train)?;
    write_jsonl(&a.out.join("dev.jsonl"), &dev)?;
    write_jsonl(&a.out.join("test.jsonl"), &test)?;
    write_lexicon(&a.out.join("lexicon.tsv"), &corpus.lexicon)?;
    write_gazetteer(&a.out.join("gazetteer.txt"), &corpus.gazetteer)?;
    write_anps(&a.out.join("anps.txt"), &corpus.anps)?;
    cfg.persist(&a.out)?;
    eprintln!("wrote {}/{}/{} examples to {}", train.len(), dev.len(), test.len(), a.out.display());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let corpus = load_jsonl(&a.corpus)?;
    let lexicon = load_lexicon(&a.lexicon)?;
    let gazetteer = load_gazetteer(&a.gazetteer)?;
    let out = a.out.join(file_name(&a.corpus)?);
    if out == a.corpus {
        return Err(usage("--out would overwrite the input corpus"));
    }
    let labelled = weak_label(&corpus, &lexicon, &gazetteer)?;
    let filled = corpus.iter().zip(&labelled).filter(|(a, b)| a != b).count();
    write_jsonl(&out, &labelled)?;
    eprintln!("labelled {filled} of {} examples into {}", corpus.len(), out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve(&[])?;
    let mut corpus = load_jsonl(&a.corpus)?;
    if let (Some(l), Some(g)) = (&a.lexicon, &a.gazetteer) {
        corpus = weak_label(&corpus, &load_lexicon(l)?, &load_gazetteer(g)?)?;
    }
    let anps = a.anps.as_deref().map(load_anps).transpose()?;
    let out = a.out.clone();
    let run = run_pretrain(&cfg, &corpus, anps, |epoch, ckpt| {
        ckpt.save(&out.join("last.ckpt"))?;
        eprintln!("pretrain epoch {epoch}/{} done", cfg.train.pretrain_epochs);
        Ok(())
    })?;
    cfg.model = run.checkpoint.params.config().clone();
    run.checkpoint.save(&a.out.join("model.ckpt"))?;
    write_vocab(&a.out.join("vocab.txt"), &run.checkpoint.vocab)?;
    write_history(&a.out.join("history.csv"), &pretrain_rows(&run.history))?;
    cfg.persist(&a.out)?;
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let extra: Vec<(&str, String)> = a.train_size.map(|n| ("data.train_size", n.to_string())).into_iter().collect();
    let mut cfg = a.cfg.resolve(&extra)?;
    let full = load_jsonl(&a.corpus)?;
    let train = subsample(&full, cfg.data.train_size, cfg.seed)?;
    let dev = a.dev.as_deref().map(load_jsonl).transpose()?.unwrap_or_default();
    let start = match &a.init {
        Some(p) => Start::Checkpoint(Checkpoint::load(p)?),
        None => Start::Scratch { vocab: build_vocab(&full, None, cfg.data.vocab_min_freq)?, anps: None },
    };
    let task = a.task;
    let run = run_finetune(&cfg, task, &train, &dev, start, |r| {
        match &r.dev {
            Some(d) => eprintln!("epoch {} loss {:.4} dev F1 {:.4}", r.epoch, r.loss, d.f1),
            None => eprintln!("epoch {} loss {:.4}", r.epoch, r.loss),
        }
        Ok(())
    })?;
    cfg.model = run.last.params.config().clone();
    run.best.save(&a.out.join("best.ckpt"))?;
    run.last.save(&a.out.join("last.ckpt"))?;
    write_jsonl(&a.out.join("train_subset.jsonl"), &train)?;
    write_history(&a.out.join("history.csv"), &finetune_rows(task, &run.history))?;
    cfg.persist(&a.out)?;
    eprintln!("best epoch {}", run.best_epoch);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = load_jsonl(&a.corpus)?;
    let report = run_eval(&ckpt, a.task, &corpus, a.masc_on_predicted)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    train: Vec<mabsa_core::corpus::MultimodalExample>,
    dev: Vec<mabsa_core::corpus::MultimodalExample>,
    test: Vec<mabsa_core::corpus::MultimodalExample>,
    anps: Option<mabsa_core::weak_label::AnpVocabulary>,
}

fn load_experiment(e: &ExperimentArgs, extra: &[(&str, String)]) -> Result<Loaded> {
    Ok(Loaded {
        cfg: e.cfg.resolve(extra)?,
        train: load_jsonl(&e.train)?,
        dev: e.dev.as_deref().map(load_jsonl).transpose()?.unwrap_or_default(),
        test: load_jsonl(&e.test)?,
        anps: e.anps.as_deref().map(load_anps).transpose()?,
    })
}

fn ablate(a: AblateArgs) -> Result<()> {
    let extra: Vec<(&str, String)> = a.train_size.map(|n| ("data.train_size", n.to_string())).into_iter().collect();
    let l = load_experiment(&a.exp, &extra)?;
    let data = Splits { train: &l.train, dev: &l.dev, test: &l.test, anps: l.anps.as_ref() };
    let ds = Downstream {
        task: a.exp.task,
        train_size: l.cfg.data.train_size,
        min_steps: a.exp.min_steps,
        dev_limit: a.exp.dev_limit,
    };
    let rows = ablation(&l.cfg, &data, &ds, |r| eprintln!("{}: F1 {:.4}", r.stage, r.f1))?;
    write_ablation(&a.exp.out.join("ablation.csv"), &rows)?;
    l.cfg.persist(&a.exp.out)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr + Clone>(s: &str, what: &str, full: Option<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| match (&full, x) {
            (Some(f), "full") => Ok(f.clone()),
            _ => x.parse().map_err(|_| usage(format!("bad {what} {x:?}"))),
        })
        .collect()
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let l = load_experiment(&a.exp, &[])?;
    let sizes: Vec<Option<usize>> = parse_list::<usize>(&a.sizes, "size", Some(0))?
        .into_iter()
        .map(|n| if n == 0 { None } else { Some(n) })
        .collect();
    let seeds = parse_list::<u64>(&a.seeds, "seed", None)?;
    if sizes.is_empty() || seeds.is_empty() {
        return Err(usage("--sizes and --seeds need at least one entry"));
    }
    let data = Splits { train: &l.train, dev: &l.dev, test: &l.test, anps: l.anps.as_ref() };
    let ds = Downstream { task: a.exp.task, train_size: None, min_steps: a.exp.min_steps, dev_limit: a.exp.dev_limit };
    let rows = sweep(&l.cfg, &data, &ds, &sizes, &seeds, |r| {
        eprintln!(
            "seed {} size {}: pretrained F1 {:.4}, scratch F1 {:.4}",
            r.seed, r.train_size, r.pretrained_f1, r.scratch_f1
        )
    })?;
    for (n, p, s) in sweep_means(&rows) {
        eprintln!("size {n}: mean pretrained F1 {p:.4}, mean scratch F1 {s:.4}");
    }
    write_sweep(&a.exp.out.join("sweep.csv"), &rows)?;
    l.cfg.persist(&a.exp.out)?;
    Ok(())
}
