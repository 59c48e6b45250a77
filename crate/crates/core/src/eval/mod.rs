//! Metrics and diagnostic probes over trained models.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{
    aggregate, confusion_matrix, f1_per_class, mean_std, span_predictions, AggregateMetrics,
    F1Report, RunMetrics,
};

use crate::corpus::ClassLabel;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Graph;
use crate::numtok::{encode, mask_positions, tokenize, Piece, TokenSequence, MASK_ID, UNK_ID};
use crate::train::LabeledExample;

const EVAL_BATCH: usize = 32;

/// The probe sentence used for completion diagnostics.
pub const GRADIENT_TEMPLATE: &str =
    "Patient en détresse respiratoire, gradient VG-VD ad [MASK] mmgh.";

static DEFAULT_TERMS: &str = include_str!("../../data/terms.txt");

/// Argmax class of every `[NUM]` token, per example.
pub fn predict(model: &Model, examples: &[LabeledExample]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let live: Vec<&LabeledExample> = chunk
            .iter()
            .filter(|e| !e.num_positions.is_empty())
            .collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let seqs: Vec<&TokenSequence> = live.iter().map(|e| &e.seq).collect();
        let logits = if seqs.is_empty() {
            None
        } else {
            let enc = model.encode(&mut g, &p, &seqs)?;
            let rows = live
                .iter()
                .enumerate()
                .flat_map(|(b, e)| e.num_positions.iter().map(move |&pos| (b, pos)))
                .map(|(b, pos)| enc.row(b, pos))
                .collect();
            let h = g.gather_rows(enc.hidden, rows)?;
            Some(model.head_classify(&mut g, &p, h)?)
        };
        let mut r = 0;
        for e in chunk {
            let preds = e
                .num_positions
                .iter()
                .map(|_| {
                    let row = g.value(logits.expect("non-empty batch")).row(r);
                    r += 1;
                    argmax(row)
                })
                .collect();
            out.push(preds);
        }
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Span-level F1 and confusion plus the token-level confusion.
pub fn evaluate(
    model: &Model,
    examples: &[LabeledExample],
    seed: u64,
    include_o: bool,
) -> Result<RunMetrics> {
    let n = model.config.n_classes;
    let preds = predict(model, examples)?;
    let (mut sp, mut sg, mut tp, mut tg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (e, p) in examples.iter().zip(&preds) {
        let (p_span, g_span) = span_predictions(p, &e.labels, &e.span_of, e.span_labels.len())?;
        sp.extend(p_span);
        sg.extend(g_span);
        tp.extend_from_slice(p);
        tg.extend_from_slice(&e.labels);
    }
    let f1 = f1_per_class(&sp, &sg, n, include_o)?;
    Ok(RunMetrics {
        seed,
        per_class_f1: f1.per_class,
        macro_f1: f1.macro_f1,
        confusion: confusion_matrix(&sp, &sg, n)?,
        token_confusion: confusion_matrix(&tp, &tg, n)?,
        n_spans: sg.len(),
        n_tokens: tg.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub position: usize,
    /// Top-k tokens and their probabilities, most likely first.
    pub top: Vec<(String, f64)>,
    /// Number-head output at the mask, present for value-scaled models.
    pub value: Option<f64>,
}

/// LM-head top-k and number-head value at the single `[MASK]` in `text`.
pub fn completion_probe(model: &Model, text: &str, k: usize) -> Result<ProbeResult> {
    let seq = encode(text, &model.vocab);
    let masks: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] == MASK_ID).collect();
    let position = match masks.as_slice() {
        [p] => *p,
        [] => return Err(Error::Data("probe text has no [MASK]".into())),
        _ => {
            return Err(Error::Data(format!(
                "probe text has {} masks; exactly one is allowed",
                masks.len()
            )))
        }
    };
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let enc = model.encode(&mut g, &p, &[&seq])?;
    let h = g.gather_rows(enc.hidden, vec![position])?;
    let logits = model.head_lm(&mut g, &p, h)?;
    let probs = g.value(logits).row_softmax();
    let mut ranked: Vec<(usize, f64)> = probs.row(0).iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = ranked
        .into_iter()
        .take(k.max(1))
        .map(|(i, pr)| {
            (
                model.vocab.token(i as u32).unwrap_or("[UNK]").to_string(),
                pr,
            )
        })
        .collect();
    let value = if model.config.xval_enabled {
        let f2 = model.head_num(&mut g, &p, h)?;
        Some(g.value(f2).item())
    } else {
        None
    };
    Ok(ProbeResult {
        position,
        top,
        value,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPair {
    pub truth: f64,
    pub predicted: f64,
    pub label: ClassLabel,
}

/// Masks each gold `[NUM]` on its own and reads the number head there.
pub fn export_scatter(model: &Model, examples: &[LabeledExample]) -> Result<Vec<ScatterPair>> {
    let mut jobs = Vec::new();
    for e in examples {
        for (k, &pos) in e.num_positions.iter().enumerate() {
            let label = ClassLabel::from_index(e.labels[k]).ok_or_else(|| {
                Error::Data(format!("label {} outside the class set", e.labels[k]))
            })?;
            jobs.push((mask_positions(&e.seq, &[pos])?, pos, label));
        }
    }
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let seqs: Vec<&TokenSequence> = chunk.iter().map(|j| &j.0).collect();
        let enc = model.encode(&mut g, &p, &seqs)?;
        let rows = chunk
            .iter()
            .enumerate()
            .map(|(b, j)| enc.row(b, j.1))
            .collect();
        let h = g.gather_rows(enc.hidden, rows)?;
        let f2 = model.head_num(&mut g, &p, h)?;
        for (i, j) in chunk.iter().enumerate() {
            out.push(ScatterPair {
                truth: j.0.y2[0],
                predicted: g.value(f2).get(i, 0),
                label: j.2,
            });
        }
    }
    Ok(out)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let d = (sxx * syy).sqrt();
    (d > 0.0).then(|| sxy / d)
}

/// Pearson correlation of log truth against log prediction.
pub fn log_pearson(pairs: &[ScatterPair]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs
        .iter()
        .map(|p| (p.truth.ln(), p.predicted.ln()))
        .unzip();
    pearson(&x, &y)
}

pub fn write_scatter(path: &Path, pairs: &[ScatterPair]) -> Result<()> {
    let mut s = String::from("truth,predicted,label\n");
    for p in pairs {
        writeln!(s, "{},{},{}", p.truth, p.predicted, p.label.name()).expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Cosines between reference and candidate term embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub terms: Vec<String>,
    /// `entries[i][j]` compares reference term `i` with candidate term `j`.
    pub entries: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn mean_diagonal(&self) -> f64 {
        let n = self.terms.len();
        if n == 0 {
            return f64::NAN;
        }
        (0..n).map(|i| self.entries[i][i]).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term");
        for t in &self.terms {
            s.push(',');
            s.push_str(t);
        }
        s.push('\n');
        for (t, row) in self.terms.iter().zip(&self.entries) {
            s.push_str(t);
            for v in row {
                write!(s, ",{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }
}

/// The pinned term list.
pub fn default_terms() -> Vec<String> {
    parse_terms(DEFAULT_TERMS)
}

pub fn load_terms(path: &Path) -> Result<Vec<String>> {
    Ok(parse_terms(&fs::read_to_string(path)?))
}

fn parse_terms(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

fn term_embedding(model: &Model, term: &str) -> Option<Vec<f64>> {
    let table = model.params.get("embed.tokens")?;
    let ids: Vec<u32> = tokenize(term)
        .iter()
        .map(|p| match p {
            Piece::Word { text, .. } => model.vocab.id(text),
            _ => None,
        })
        .collect::<Option<_>>()?;
    if ids.is_empty() || ids.contains(&UNK_ID) {
        return None;
    }
    let mut v = vec![0.0; table.cols()];
    for &id in &ids {
        for (a, b) in v.iter_mut().zip(table.row(id as usize)) {
            *a += b / ids.len() as f64;
        }
    }
    Some(v)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Each term is the mean of its tokens' embedding rows.
pub fn compare_embeddings(
    reference: &Model,
    candidate: &Model,
    terms: &[String],
) -> Result<SimilarityMatrix> {
    let mut missing = Vec::new();
    let mut refs = Vec::with_capacity(terms.len());
    let mut cands = Vec::with_capacity(terms.len());
    for t in terms {
        match (term_embedding(reference, t), term_embedding(candidate, t)) {
            (Some(r), Some(c)) => {
                refs.push(r);
                cands.push(c);
            }
            _ => missing.push(t.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Vocab(format!(
            "terms not in vocabulary: {}",
            missing.join(", ")
        )));
    }
    let entries = refs
        .iter()
        .map(|r| cands.iter().map(|c| cosine(r, c)).collect())
        .collect();
    Ok(SimilarityMatrix {
        terms: terms.to_vec(),
        entries,
    })
}

/// Pretty-printed JSON of any metrics value.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Per-class F1 as a header row plus one row per run.
pub fn metrics_csv(runs: &[RunMetrics]) -> String {
    let mut s = String::from("seed");
    for c in ClassLabel::ALL {
        write!(s, ",{}", c.name()).expect("write to string");
    }
    s.push_str(",macro\n");
    for r in runs {
        write!(s, "{}", r.seed).expect("write to string");
        for f in &r.per_class_f1 {
            write!(s, ",{f:.4}").expect("write to string");
        }
        writeln!(s, ",{:.4}", r.macro_f1).expect("write to string");
    }
    s
}
