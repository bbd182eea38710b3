//! Exact-match tuple evaluation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::{Parsed, Task};
use crate::corpus::{AspectLabel, Sentiment, Span};
use crate::error::{bail, Result};

/// Deduplicated tuples of one example.
pub type TupleSet<T> = BTreeSet<T>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro precision, recall and F1 from corpus-level counts. Any empty
/// denominator yields 0.
pub fn micro_prf<T: Ord>(preds: &[TupleSet<T>], golds: &[TupleSet<T>]) -> Result<Prf> {
    if preds.len() != golds.len() {
        bail!(Usage, "{} predictions for {} gold examples", preds.len(), golds.len());
    }
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        tp += p.intersection(g).count();
        np += p.len();
        ng += g.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, np);
    let recall = ratio(tp, ng);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf { precision, recall, f1 })
}

/// Fraction of gold spans whose predicted sentiment matches. Every gold
/// span must have a prediction.
pub fn accuracy(preds: &[BTreeMap<Span, Sentiment>], golds: &[BTreeMap<Span, Sentiment>]) -> Result<f64> {
    if preds.len() != golds.len() {
        bail!(Usage, "{} predictions for {} gold examples", preds.len(), golds.len());
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (ex, (p, g)) in preds.iter().zip(golds).enumerate() {
        for (span, s) in g {
            let Some(ps) = p.get(span) else {
                bail!(Usage, "example {} has no prediction for span ({}, {})", ex, span.start, span.end);
            };
            total += 1;
            hit += usize::from(ps == s);
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Accuracy over only the gold spans that were also predicted, the
/// protocol of pipelines that classify extracted aspects.
pub fn accuracy_on_predicted(preds: &[BTreeMap<Span, Sentiment>], golds: &[BTreeMap<Span, Sentiment>]) -> Result<f64> {
    if preds.len() != golds.len() {
        bail!(Usage, "{} predictions for {} gold examples", preds.len(), golds.len());
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        for (span, s) in g {
            if let Some(ps) = p.get(span) {
                total += 1;
                hit += usize::from(ps == s);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Tuple as scored for a task: sentiment is dropped for MATE.
pub fn scored_tuples(task: Task, aspects: &[AspectLabel]) -> TupleSet<(Span, Option<Sentiment>)> {
    aspects.iter().map(|a| (a.span, if task == Task::Mate { None } else { a.sentiment })).collect()
}

pub fn sentiment_map(aspects: &[AspectLabel]) -> BTreeMap<Span, Sentiment> {
    aspects.iter().filter_map(|a| a.sentiment.map(|s| (a.span, s))).collect()
}

/// Serialized as `{task, P, R, F1, Acc, example_count}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "Acc")]
    pub accuracy: Option<f64>,
    pub example_count: usize,
    /// Generated sequences that did not parse cleanly.
    #[serde(default)]
    pub defective: usize,
}

/// Scores parsed generations against gold aspect labels. For MASC the
/// accuracy is over all gold aspects unless `masc_on_predicted` is set.
pub fn evaluate(
    task: Task,
    preds: &[Parsed],
    golds: &[Vec<AspectLabel>],
    masc_on_predicted: bool,
) -> Result<MetricReport> {
    if preds.len() != golds.len() {
        bail!(Usage, "{} predictions for {} gold examples", preds.len(), golds.len());
    }
    let p_sets: Vec<_> = preds.iter().map(|p| scored_tuples(task, &p.aspects)).collect();
    let g_sets: Vec<_> = golds.iter().map(|g| scored_tuples(task, g)).collect();
    let prf = micro_prf(&p_sets, &g_sets)?;
    let accuracy = if task == Task::Masc {
        let pm: Vec<_> = preds.iter().map(|p| sentiment_map(&p.aspects)).collect();
        let gm: Vec<_> = golds.iter().map(|g| sentiment_map(g)).collect();
        Some(if masc_on_predicted { accuracy_on_predicted(&pm, &gm)? } else { accuracy(&pm, &gm)? })
    } else {
        None
    };
    Ok(MetricReport {
        task,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy,
        example_count: preds.len(),
        defective: preds.iter().filter(|p| !p.is_valid()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    type T = (usize, usize, u8);

    fn set(xs: &[T]) -> TupleSet<T> {
        xs.iter().copied().collect()
    }

    #[test]
    fn prf_examples() {
        let g = vec![set(&[(1, 2, 0), (9, 9, 1)])];
        assert_eq!(micro_prf(&g, &g).unwrap(), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        let p = vec![set(&[(1, 2, 0), (5, 6, 0)])];
        let r = micro_prf(&p, &g).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        let empty = vec![set(&[])];
        assert_eq!(micro_prf(&empty, &g).unwrap(), Prf::default());
        assert!(micro_prf(&empty, &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let s = |v: &[(usize, Sentiment)]| -> BTreeMap<Span, Sentiment> {
            v.iter().map(|&(i, x)| (Span::new(i, i), x)).collect()
        };
        use Sentiment::*;
        let gold = vec![s(&[(1, Pos), (2, Neu), (3, Neg), (4, Pos)])];
        assert_eq!(accuracy(&gold, &gold).unwrap(), 1.0);
        let pred = vec![s(&[(1, Pos), (2, Neu), (3, Neg), (4, Neg)])];
        assert_eq!(accuracy(&pred, &gold).unwrap(), 0.75);
        let missing = vec![s(&[(1, Pos)])];
        assert!(accuracy(&missing, &gold).is_err());
        assert_eq!(accuracy_on_predicted(&missing, &gold).unwrap(), 1.0);
    }

    #[test]
    fn mate_ignores_sentiment() {
        let a = [AspectLabel { span: Span::new(1, 2), sentiment: Some(Sentiment::Pos) }];
        let b = [AspectLabel { span: Span::new(1, 2), sentiment: Some(Sentiment::Neg) }];
        assert_eq!(scored_tuples(Task::Mate, &a), scored_tuples(Task::Mate, &b));
        assert_ne!(scored_tuples(Task::Jmasa, &a), scored_tuples(Task::Jmasa, &b));
    }
}
