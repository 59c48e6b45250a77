use serde::{Deserialize, Serialize};

use crate::corpus::ClassLabel;
use crate::error::{Error, Result};

/// Per-class F1 and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
}

fn check_aligned(pred: &[usize], gold: &[usize], n_classes: usize) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::shape("f1", &[pred.len()], &[gold.len()]));
    }
    if let Some(&bad) = pred.iter().chain(gold).find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("label {bad} outside 0..{n_classes}")));
    }
    Ok(())
}

/// F1 per class over aligned label sequences. Class 0 is the out-of-class
/// label; `include_o = false` drops it from the macro average only.
pub fn f1_per_class(
    pred: &[usize],
    gold: &[usize],
    n_classes: usize,
    include_o: bool,
) -> Result<F1Report> {
    check_aligned(pred, gold, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let per_class: Vec<f64> = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let first = usize::from(!include_o);
    let kept = &per_class[first.min(n_classes)..];
    let macro_f1 = if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    Ok(F1Report {
        per_class,
        macro_f1,
    })
}

/// Rows are gold labels, columns predictions.
pub fn confusion_matrix(
    pred: &[usize],
    gold: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check_aligned(pred, gold, n_classes)?;
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        m[g][p] += 1;
    }
    Ok(m)
}

/// Collapses token predictions to one label per span: the gold label when
/// every token of the span is right, otherwise the first wrong prediction.
pub fn span_predictions(
    token_pred: &[usize],
    token_gold: &[usize],
    span_of: &[usize],
    n_spans: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if token_pred.len() != token_gold.len() || token_pred.len() != span_of.len() {
        return Err(Error::shape(
            "span_predictions",
            &[token_pred.len()],
            &[span_of.len()],
        ));
    }
    let mut gold = vec![usize::MAX; n_spans];
    let mut pred = vec![usize::MAX; n_spans];
    for ((&p, &g), &s) in token_pred.iter().zip(token_gold).zip(span_of) {
        if s >= n_spans {
            return Err(Error::Data(format!("span index {s} outside 0..{n_spans}")));
        }
        gold[s] = g;
        if pred[s] == usize::MAX || pred[s] == g {
            pred[s] = p;
        }
    }
    if gold.contains(&usize::MAX) {
        return Err(Error::Data("a span has no tokens".into()));
    }
    Ok((pred, gold))
}

/// Evaluation of one trained model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    /// Span-level, gold × predicted.
    pub confusion: Vec<Vec<usize>>,
    /// Counted at every `[NUM]` token.
    pub token_confusion: Vec<Vec<usize>>,
    pub n_spans: usize,
    pub n_tokens: usize,
}

impl RunMetrics {
    /// Off-diagonal mass of one gold row, as a fraction of that row.
    pub fn row_error(&self, class: ClassLabel) -> f64 {
        let row = &self.confusion[class.index()];
        let total: usize = row.iter().sum();
        if total == 0 {
            return 0.0;
        }
        (total - row[class.index()]) as f64 / total as f64
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub seeds: Vec<u64>,
    pub mean_per_class: Vec<f64>,
    pub std_per_class: Vec<f64>,
    pub mean_macro: f64,
    pub std_macro: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Data("no runs to aggregate".into()))?;
    let k = first.per_class_f1.len();
    if runs.iter().any(|r| r.per_class_f1.len() != k) {
        return Err(Error::Data("runs disagree on the number of classes".into()));
    }
    let (mut mean_per_class, mut std_per_class) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for c in 0..k {
        let col: Vec<f64> = runs.iter().map(|r| r.per_class_f1[c]).collect();
        let (m, s) = mean_std(&col);
        mean_per_class.push(m);
        std_per_class.push(s);
    }
    let macros: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
    let (mean_macro, std_macro) = mean_std(&macros);
    Ok(AggregateMetrics {
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_per_class,
        std_per_class,
        mean_macro,
        std_macro,
    })
}
