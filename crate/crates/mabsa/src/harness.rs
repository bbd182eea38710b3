//! Experiment drivers: the cumulative pre-training task ablation and the
//! downstream sample-size sweep comparing pre-trained and scratch starts.

use std::path::Path;

use mabsa_core::codec::Task;
use mabsa_core::corpus::MultimodalExample;
use mabsa_core::metrics::MetricReport;
use mabsa_core::weak_label::AnpVocabulary;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::history::{read_csv, write_csv};
use crate::pipeline::{build_vocab, run_eval, run_finetune, run_pretrain, subsample, Start};

/// Downstream settings shared by both experiments.
#[derive(Debug, Clone)]
pub struct Downstream {
    pub task: Task,
    /// Fine-tuning subset size; `None` uses the whole training split.
    pub train_size: Option<usize>,
    /// Fine-tuning runs at least this many optimizer steps, adding epochs
    /// on small subsets.
    pub min_steps: usize,
    /// Cap on dev examples scored each epoch.
    pub dev_limit: usize,
}

impl Default for Downstream {
    fn default() -> Self {
        Self { task: Task::Jmasa, train_size: None, min_steps: 0, dev_limit: 40 }
    }
}

/// The data an experiment runs on. Pre-training always sees the whole
/// training split.
pub struct Splits<'a> {
    pub train: &'a [MultimodalExample],
    pub dev: &'a [MultimodalExample],
    pub test: &'a [MultimodalExample],
    pub anps: Option<&'a AnpVocabulary>,
}

fn with_min_steps(cfg: &RunConfig, n: usize, min_steps: usize) -> RunConfig {
    let mut c = cfg.clone();
    let per_epoch = n.div_ceil(c.train.finetune_batch.max(1)).max(1);
    c.train.finetune_epochs = c.train.finetune_epochs.max(min_steps.div_ceil(per_epoch));
    c
}

/// Fine-tunes from `start` on a seeded subset and scores on the test split.
fn downstream(cfg: &RunConfig, data: &Splits, ds: &Downstream, start: Start) -> Result<MetricReport> {
    let train = subsample(data.train, ds.train_size, cfg.seed)?;
    let dev = &data.dev[..data.dev.len().min(ds.dev_limit)];
    let c = with_min_steps(cfg, train.len(), ds.min_steps);
    let run = run_finetune(&c, ds.task, &train, dev, start, |_| Ok(()))?;
    run_eval(&run.best, ds.task, data.test, c.train.masc_on_predicted)
}

fn scratch(cfg: &RunConfig, data: &Splits) -> Result<Start> {
    Ok(Start::Scratch { vocab: build_vocab(data.train, data.anps, cfg.data.vocab_min_freq)?, anps: data.anps.cloned() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `none`, then `mlm`, `mlm+aoe`, ... up to all five objectives.
    pub stage: String,
    pub train_size: usize,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "Acc")]
    pub accuracy: Option<f64>,
}

/// Pre-trains on growing prefixes of the objective list (starting from no
/// pre-training) and fine-tunes each result. `on_row` sees rows as they
/// finish.
pub fn ablation<F>(cfg: &RunConfig, data: &Splits, ds: &Downstream, mut on_row: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&AblationRow),
{
    let order = Task::PRETRAIN;
    let n = ds.train_size.unwrap_or(data.train.len());
    let mut rows = Vec::new();
    for k in 0..=order.len() {
        let tasks = &order[..k];
        let start = if k == 0 {
            scratch(cfg, data)?
        } else {
            let mut c = cfg.clone();
            c.train.tasks = tasks.to_vec();
            Start::Checkpoint(run_pretrain(&c, data.train, data.anps.cloned(), |_, _| Ok(()))?.checkpoint)
        };
        let report = downstream(cfg, data, ds, start)?;
        let stage =
            if k == 0 { "none".to_string() } else { tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join("+") };
        let row = AblationRow {
            stage,
            train_size: n,
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            accuracy: report.accuracy,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub train_size: usize,
    pub pretrained_f1: f64,
    pub scratch_f1: f64,
}

/// For every seed: pre-train once, then fine-tune from the pre-trained and
/// from a random start at every size in `sizes` (`None` = full split).
pub fn sweep<F>(
    cfg: &RunConfig,
    data: &Splits,
    ds: &Downstream,
    sizes: &[Option<usize>],
    seeds: &[u64],
    mut on_row: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(&SweepRow),
{
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        c.train.seed = seed;
        let pre = run_pretrain(&c, data.train, data.anps.cloned(), |_, _| Ok(()))?.checkpoint;
        for &size in sizes {
            let d = Downstream { train_size: size, ..ds.clone() };
            let p = downstream(&c, data, &d, Start::Checkpoint(pre.clone()))?;
            let s = downstream(&c, data, &d, scratch(&c, data)?)?;
            let row =
                SweepRow { seed, train_size: size.unwrap_or(data.train.len()), pretrained_f1: p.f1, scratch_f1: s.f1 };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Per size, `(train_size, mean pretrained F1, mean scratch F1)`.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(usize, f64, f64)> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.train_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.train_size == n).collect();
            let k = sel.len() as f64;
            (n, sel.iter().map(|r| r.pretrained_f1).sum::<f64>() / k, sel.iter().map(|r| r.scratch_f1).sum::<f64>() / k)
        })
        .collect()
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    read_csv(path)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}
