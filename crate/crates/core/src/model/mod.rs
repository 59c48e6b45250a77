//! Transformer encoder with label-embedding attention (LESA) and
//! value-scaled number embeddings.

mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::ParamSet;

use crate::corpus::ClassLabel;
use crate::error::{Error, Result};
use crate::numerics::{BiasTarget, Graph, Tensor, Var};
use crate::numtok::{tokenize, Piece, TokenSequence, Vocab, UNK_ID};

/// Softplus inverse of 1: the number head starts out predicting 1.
const NUM_HEAD_BIAS_INIT: f64 = 0.541_324_854_612_918_1;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub lesa_enabled: bool,
    pub xval_enabled: bool,
    pub lesa_layers: Vec<usize>,
    pub bias_target: BiasTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 128,
            vocab_size: 4096,
            n_classes: ClassLabel::COUNT,
            lesa_enabled: false,
            xval_enabled: false,
            lesa_layers: vec![0],
            bias_target: BiasTarget::Scores,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(
                "n_heads",
                format!(
                    "d_model {} is not divisible by {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.vocab_size < crate::numtok::RESERVED.len() {
            return Err(Error::validation(
                "vocab_size",
                "smaller than the reserved tokens",
            ));
        }
        if let Some(l) = self.lesa_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::validation(
                "lesa_layers",
                format!("layer {l} outside 0..{}", self.n_layers),
            ));
        }
        Ok(())
    }

    fn uses_lesa(&self, layer: usize) -> bool {
        self.lesa_enabled && self.lesa_layers.contains(&layer)
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    tokens: usize,
    positions: usize,
    layers: Vec<LayerIdx>,
    lm_w: usize,
    lm_b: usize,
    num_w: usize,
    num_b: usize,
    cls_w: usize,
    cls_b: usize,
}

impl Layout {
    fn resolve(params: &ParamSet, n_layers: usize) -> Result<Layout> {
        let at = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = |s: &str| at(&format!("layer{l}.{s}"));
            layers.push(LayerIdx {
                wq: p("wq")?,
                bq: p("bq")?,
                wk: p("wk")?,
                bk: p("bk")?,
                wv: p("wv")?,
                bv: p("bv")?,
                wo: p("wo")?,
                bo: p("bo")?,
                ln1_g: p("ln1.gamma")?,
                ln1_b: p("ln1.beta")?,
                w1: p("ffn.w1")?,
                b1: p("ffn.b1")?,
                w2: p("ffn.w2")?,
                b2: p("ffn.b2")?,
                ln2_g: p("ln2.gamma")?,
                ln2_b: p("ln2.beta")?,
            });
        }
        Ok(Layout {
            tokens: at("embed.tokens")?,
            positions: at("embed.positions")?,
            layers,
            lm_w: at("head.lm.w")?,
            lm_b: at("head.lm.b")?,
            num_w: at("head.num.w")?,
            num_b: at("head.num.b")?,
            cls_w: at("head.cls.w")?,
            cls_b: at("head.cls.b")?,
        })
    }
}

/// Seeded initial parameters for `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamSet::new();
    for (name, [r, c]) in parameter_shapes(config) {
        let t = if name.ends_with(".gamma") {
            Tensor::filled(r, c, 1.0)
        } else if name == "head.num.b" {
            Tensor::filled(r, c, NUM_HEAD_BIAS_INIT)
        } else if r == 1 {
            Tensor::zeros(r, c)
        } else {
            Tensor::from_rows(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())?
        };
        params.push(name, t)?;
    }
    Ok(params)
}

/// Expected name and shape of every parameter, in storage order.
pub fn parameter_shapes(c: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let mut out = vec![
        ("embed.tokens".to_string(), [v, d]),
        ("embed.positions".to_string(), [c.max_len, d]),
    ];
    for l in 0..c.n_layers {
        for (s, shape) in [
            ("wq", [d, d]),
            ("bq", [1, d]),
            ("wk", [d, d]),
            ("bk", [1, d]),
            ("wv", [d, d]),
            ("bv", [1, d]),
            ("wo", [d, d]),
            ("bo", [1, d]),
            ("ln1.gamma", [1, d]),
            ("ln1.beta", [1, d]),
            ("ffn.w1", [d, f]),
            ("ffn.b1", [1, f]),
            ("ffn.w2", [f, d]),
            ("ffn.b2", [1, d]),
            ("ln2.gamma", [1, d]),
            ("ln2.beta", [1, d]),
        ] {
            out.push((format!("layer{l}.{s}"), shape));
        }
    }
    out.extend([
        ("head.lm.w".to_string(), [d, v]),
        ("head.lm.b".to_string(), [1, v]),
        ("head.num.w".to_string(), [d, 1]),
        ("head.num.b".to_string(), [1, 1]),
        ("head.cls.w".to_string(), [d, c.n_classes]),
        ("head.cls.b".to_string(), [1, c.n_classes]),
    ]);
    out
}

/// Token ids of each class's keywords. Out-of-vocabulary words inside a
/// keyword are skipped; a keyword with no known word is an error.
pub fn label_token_ids(vocab: &Vocab, keywords: &[Vec<String>]) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(keywords.len());
    for (c, kws) in keywords.iter().enumerate() {
        let name = ClassLabel::from_index(c).map_or_else(|| c.to_string(), |l| l.to_string());
        if kws.is_empty() {
            return Err(Error::Vocab(format!("class {name} has no keywords")));
        }
        let mut ids = Vec::new();
        for kw in kws {
            let found: Vec<u32> = tokenize(kw)
                .into_iter()
                .filter_map(|p| match p {
                    Piece::Word { text, .. } => vocab.id(text),
                    _ => None,
                })
                .filter(|&id| id != UNK_ID)
                .collect();
            if found.is_empty() {
                return Err(Error::Vocab(format!(
                    "keyword {kw:?} of class {name} is entirely out of vocabulary"
                )));
            }
            ids.extend(found);
        }
        out.push(ids);
    }
    Ok(out)
}

/// Row `c` is the mean embedding of class `c`'s keyword tokens.
pub fn build_label_embeddings(embedding: &Tensor, label_ids: &[Vec<u32>]) -> Tensor {
    let d = embedding.cols();
    let mut out = Tensor::zeros(label_ids.len(), d);
    for (c, ids) in label_ids.iter().enumerate() {
        let row = out.row_mut(c);
        for &id in ids {
            for (o, e) in row.iter_mut().zip(embedding.row(id as usize)) {
                *o += e;
            }
        }
        let n = ids.len() as f64;
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Per-layer attention snapshots of one sequence.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    /// Row-stochastic attention of each head.
    pub probs: Vec<Tensor>,
    /// `n × L` attention of the label embeddings over tokens.
    pub label_attention: Option<Tensor>,
    /// `L × L` cosine similarity of the tokens' label-attention columns.
    pub cosim: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

/// Nodes recorded while encoding one batch.
#[derive(Debug)]
pub struct Encoded {
    /// All sequences' hidden states stacked row-wise.
    pub hidden: Var,
    /// Row offset of each sequence in `hidden`.
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    /// `(layer, sequence, attention output)` for trace extraction.
    attention: Vec<(usize, usize, Var)>,
    /// `(layer, sequence, label attention, cosim)`.
    lesa: Vec<(usize, usize, Var, Var)>,
}

impl Encoded {
    /// Global row of position `pos` in sequence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        self.offsets[b] + pos
    }

    pub fn trace(&self, g: &Graph, seq: usize) -> AttentionTrace {
        let n_layers = self
            .attention
            .iter()
            .map(|(l, _, _)| l + 1)
            .max()
            .unwrap_or(0);
        let mut layers = vec![LayerTrace::default(); n_layers];
        for &(l, b, v) in &self.attention {
            if b == seq {
                layers[l].probs = g
                    .attention_probs(v)
                    .map(<[Tensor]>::to_vec)
                    .unwrap_or_default();
            }
        }
        for &(l, b, a, c) in &self.lesa {
            if b == seq {
                layers[l].label_attention = Some(g.value(a).clone());
                layers[l].cosim = Some(g.value(c).clone());
            }
        }
        AttentionTrace { layers }
    }
}

/// Output of [`lesa_attention`].
#[derive(Clone, Debug)]
pub struct LesaScores {
    /// Pre-softmax scores of each head with CoSim added.
    pub scores: Vec<Tensor>,
    pub label_attention: Tensor,
    pub cosim: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
    keywords: Vec<Vec<String>>,
    label_ids: Vec<Vec<u32>>,
    /// Flattened keyword ids and the `n × K` averaging matrix over them.
    label_flat: Vec<usize>,
    label_avg: Tensor,
    layout: Layout,
}

impl Model {
    /// Fresh model with N(0, 0.02²) weights, unit LayerNorm gains and zero
    /// biases. Keywords come from the default template bank.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        let params = init_params(&config, seed)?;
        Model::from_parts(config, vocab, params)
    }

    /// Assembles a model from existing parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamSet) -> Result<Model> {
        let keywords: Vec<Vec<String>> = ClassLabel::ALL
            .iter()
            .map(|c| c.keywords().to_vec())
            .collect();
        Model::with_keywords(config, vocab, params, &keywords)
    }

    pub fn with_keywords(
        config: ModelConfig,
        vocab: Vocab,
        params: ParamSet,
        keywords: &[Vec<String>],
    ) -> Result<Model> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::validation(
                "vocab_size",
                format!(
                    "config says {} but the vocabulary has {} tokens",
                    config.vocab_size,
                    vocab.len()
                ),
            ));
        }
        if keywords.len() != config.n_classes {
            return Err(Error::validation(
                "n_classes",
                format!("{} keyword lists given", keywords.len()),
            ));
        }
        for (name, shape) in parameter_shapes(&config) {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape("parameter", &shape, t.shape()));
            }
        }
        let layout = Layout::resolve(&params, config.n_layers)?;
        let label_ids = label_token_ids(&vocab, keywords)?;
        let label_flat: Vec<usize> = label_ids.iter().flatten().map(|&i| i as usize).collect();
        let mut label_avg = Tensor::zeros(label_ids.len(), label_flat.len());
        let mut col = 0;
        for (c, ids) in label_ids.iter().enumerate() {
            for _ in ids {
                label_avg.set(c, col, 1.0 / ids.len() as f64);
                col += 1;
            }
        }
        Ok(Model {
            config,
            vocab,
            params,
            keywords: keywords.to_vec(),
            label_ids,
            label_flat,
            label_avg,
            layout,
        })
    }

    /// Same vocabulary and keywords with a new config and parameters.
    pub fn rebuild(&self, config: ModelConfig, params: ParamSet) -> Result<Model> {
        Model::with_keywords(config, self.vocab.clone(), params, &self.keywords)
    }

    pub fn keywords(&self) -> &[Vec<String>] {
        &self.keywords
    }

    pub fn label_ids(&self) -> &[Vec<u32>] {
        &self.label_ids
    }

    /// X^l from the current embedding table.
    pub fn label_embeddings(&self) -> Tensor {
        build_label_embeddings(&self.params.tensors()[self.layout.tokens], &self.label_ids)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// X^l on the tape, so gradients reach the embedding table.
    pub fn label_embeddings_node(&self, g: &mut Graph, p: &[Var]) -> Result<Var> {
        let rows = g.gather_rows(p[self.layout.tokens], self.label_flat.clone())?;
        let avg = g.constant(self.label_avg.clone());
        g.matmul(avg, rows)
    }

    /// Token plus position embeddings, each row multiplied by its value when
    /// value scaling is on.
    pub fn embed(&self, g: &mut Graph, p: &[Var], batch: &[&TokenSequence]) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut values = Vec::new();
        for seq in batch {
            if seq.len() > self.config.max_len {
                return Err(Error::Data(format!(
                    "sequence of {} tokens exceeds max_len {}",
                    seq.len(),
                    self.config.max_len
                )));
            }
            if seq.values.len() != seq.len() {
                return Err(Error::shape(
                    "embed values",
                    &[seq.len()],
                    &[seq.values.len()],
                ));
            }
            if let Some(&bad) = seq
                .ids
                .iter()
                .find(|&&i| i as usize >= self.config.vocab_size)
            {
                return Err(Error::Vocab(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            ids.extend(seq.ids.iter().map(|&i| i as usize));
            pos.extend(0..seq.len());
            values.extend_from_slice(&seq.values);
        }
        let tok = g.gather_rows(p[self.layout.tokens], ids)?;
        let posv = g.gather_rows(p[self.layout.positions], pos)?;
        let h = g.add(tok, posv)?;
        if self.config.xval_enabled {
            g.scale_rows(h, values)
        } else {
            Ok(h)
        }
    }

    /// CoSim bias for one sequence: `k` is that sequence's key rows and
    /// `lq` the label queries `X^l·W_q + b_q`.
    fn cosim_bias(&self, g: &mut Graph, lq: Var, k: Var) -> Result<(Var, Var)> {
        let dh = self.config.d_model / self.config.n_heads;
        let s = g.matmul_t(lq, false, k, true)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.row_softmax(s);
        let n = g.l2_normalize(a, 0);
        let cosim = g.matmul_t(n, true, n, false)?;
        Ok((a, cosim))
    }

    /// Runs the encoder over a ragged batch.
    pub fn encode(&self, g: &mut Graph, p: &[Var], batch: &[&TokenSequence]) -> Result<Encoded> {
        let cfg = &self.config;
        let lengths: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let mut offsets = Vec::with_capacity(batch.len());
        let mut acc = 0;
        for &l in &lengths {
            offsets.push(acc);
            acc += l;
        }
        let mut h = self.embed(g, p, batch)?;
        let xl = if cfg.lesa_enabled && !cfg.lesa_layers.is_empty() {
            Some(self.label_embeddings_node(g, p)?)
        } else {
            None
        };
        let mut attention = Vec::new();
        let mut lesa = Vec::new();
        for (li, w) in self.layout.layers.iter().enumerate() {
            let q = linear(g, h, p[w.wq], p[w.bq])?;
            let k = linear(g, h, p[w.wk], p[w.bk])?;
            let v = linear(g, h, p[w.wv], p[w.bv])?;
            let lq = match xl {
                Some(xl) if cfg.uses_lesa(li) => Some(linear(g, xl, p[w.wq], p[w.bq])?),
                _ => None,
            };
            let mut outs = Vec::with_capacity(batch.len());
            for (b, (&off, &len)) in offsets.iter().zip(&lengths).enumerate() {
                let (qs, ks, vs) = if batch.len() == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_rows(q, off, len)?,
                        g.slice_rows(k, off, len)?,
                        g.slice_rows(v, off, len)?,
                    )
                };
                let bias = match lq {
                    Some(lq) => {
                        let (a, c) = self.cosim_bias(g, lq, ks)?;
                        lesa.push((li, b, a, c));
                        Some(c)
                    }
                    None => None,
                };
                let o = g.attention(qs, ks, vs, bias, cfg.n_heads, cfg.bias_target)?;
                attention.push((li, b, o));
                outs.push(o);
            }
            let att = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_rows(&outs)?
            };
            let att = linear(g, att, p[w.wo], p[w.bo])?;
            let r = g.add(h, att)?;
            let h1 = g.layer_norm(r, p[w.ln1_g], p[w.ln1_b])?;
            let f = linear(g, h1, p[w.w1], p[w.b1])?;
            let f = g.gelu(f);
            let f = linear(g, f, p[w.w2], p[w.b2])?;
            let r = g.add(h1, f)?;
            h = g.layer_norm(r, p[w.ln2_g], p[w.ln2_b])?;
        }
        Ok(Encoded {
            hidden: h,
            offsets,
            lengths,
            attention,
            lesa,
        })
    }

    /// Language-model logits for the given hidden rows.
    pub fn head_lm(&self, g: &mut Graph, p: &[Var], rows: Var) -> Result<Var> {
        linear(g, rows, p[self.layout.lm_w], p[self.layout.lm_b])
    }

    /// Positive number predictions (one column) via softplus.
    pub fn head_num(&self, g: &mut Graph, p: &[Var], rows: Var) -> Result<Var> {
        let z = linear(g, rows, p[self.layout.num_w], p[self.layout.num_b])?;
        Ok(g.softplus(z))
    }

    pub fn head_classify(&self, g: &mut Graph, p: &[Var], rows: Var) -> Result<Var> {
        linear(g, rows, p[self.layout.cls_w], p[self.layout.cls_b])
    }

    /// Inference over one sequence: hidden states and attention trace.
    pub fn forward(&self, seq: &TokenSequence) -> Result<(Tensor, AttentionTrace)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &p, &[seq])?;
        let trace = enc.trace(&g, 0);
        Ok((g.value(enc.hidden).clone(), trace))
    }

    /// Raw LESA scores for a standalone `X` (`L × D`) through layer `layer`'s
    /// projections, with this model's label embeddings.
    pub fn lesa_attention(&self, x: &Tensor, layer: usize) -> Result<LesaScores> {
        let w = *self.layout.layers.get(layer).ok_or_else(|| {
            Error::validation(
                "layer",
                format!("{layer} outside 0..{}", self.config.n_layers),
            )
        })?;
        let xl = self.label_embeddings();
        let t = |i: usize| self.params.tensors()[i].clone();
        lesa_attention(
            x,
            &xl,
            [&t(w.wq), &t(w.bq), &t(w.wk), &t(w.bk)],
            self.config.n_heads,
        )
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// LESA on plain tensors: `X` is `L × D`, `X^l` is `n × D`, and `proj`
/// holds `[W_q, b_q, W_k, b_k]`. Returns per-head pre-softmax scores with
/// CoSim added.
pub fn lesa_attention(
    x: &Tensor,
    xl: &Tensor,
    proj: [&Tensor; 4],
    n_heads: usize,
) -> Result<LesaScores> {
    let d = x.cols();
    if xl.cols() != d {
        return Err(Error::shape("lesa_attention", x.shape(), xl.shape()));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::shape("lesa_attention heads", &[d], &[n_heads]));
    }
    let [wq, bq, wk, bk] = proj;
    let mut g = Graph::new();
    let (xv, xlv) = (g.constant(x.clone()), g.constant(xl.clone()));
    let (wq, bq, wk, bk) = (
        g.constant(wq.clone()),
        g.constant(bq.clone()),
        g.constant(wk.clone()),
        g.constant(bk.clone()),
    );
    let q = linear(&mut g, xv, wq, bq)?;
    let k = linear(&mut g, xv, wk, bk)?;
    let lq = linear(&mut g, xlv, wq, bq)?;
    let dh = d / n_heads;
    let s = g.matmul_t(lq, false, k, true)?;
    let s = g.scale(s, 1.0 / (dh as f64).sqrt());
    let a = g.row_softmax(s);
    let n = g.l2_normalize(a, 0);
    let cosim = g.matmul_t(n, true, n, false)?;
    let (qv, kv, cv) = (g.value(q), g.value(k), g.value(cosim));
    let l = x.rows();
    let mut scores = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut s = Tensor::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                let dot: f64 = (h * dh..(h + 1) * dh)
                    .map(|c| qv.get(i, c) * kv.get(j, c))
                    .sum();
                s.set(i, j, dot / (dh as f64).sqrt() + cv.get(i, j));
            }
        }
        scores.push(s);
    }
    Ok(LesaScores {
        scores,
        label_attention: g.value(a).clone(),
        cosim: cv.clone(),
    })
}
