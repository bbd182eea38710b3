//! Training history as CSV: `epoch,task,loss,P,R,F1,Acc`, blank where a
//! column does not apply.

use std::path::Path;

use mabsa_core::codec::Task;
use mabsa_core::metrics::MetricReport;
use mabsa_core::trainer::{epoch_means, FinetuneRecord, PretrainRecord};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub task: Task,
    pub loss: f64,
    #[serde(rename = "P")]
    pub precision: Option<f64>,
    #[serde(rename = "R")]
    pub recall: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
    #[serde(rename = "Acc")]
    pub accuracy: Option<f64>,
}

impl HistoryRow {
    fn new(epoch: usize, task: Task, loss: f64, report: Option<&MetricReport>) -> Self {
        Self {
            epoch,
            task,
            loss,
            precision: report.map(|r| r.precision),
            recall: report.map(|r| r.recall),
            f1: report.map(|r| r.f1),
            accuracy: report.and_then(|r| r.accuracy),
        }
    }
}

/// One row per (epoch, task) with the epoch-mean unweighted loss.
pub fn pretrain_rows(history: &[PretrainRecord]) -> Vec<HistoryRow> {
    epoch_means(history).into_iter().map(|(e, t, loss, _)| HistoryRow::new(e, t, loss, None)).collect()
}

/// One row per epoch with the dev metrics when a dev set was given.
pub fn finetune_rows(task: Task, history: &[FinetuneRecord]) -> Vec<HistoryRow> {
    history.iter().map(|r| HistoryRow::new(r.epoch, task, r.loss, r.dev.as_ref())).collect()
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    read_csv(path)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| AppError::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| AppError::io(path, e))?;
    }
    crate::io::write_with(path, |w| std::io::Write::write_all(w, &buf))
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::format(path, format!("{other:?}")),
    })?;
    r.deserialize().map(|row| row.map_err(|e| AppError::format(path, e.to_string()))).collect()
}
