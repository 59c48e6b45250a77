use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, cosine_schedule, AdamState};
use super::{config_hash, LabeledExample, TrainConfig};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossMode};
use crate::model::{Checkpoint, Model, ParamSet};
use crate::numerics::{Graph, Tensor, Var};
use crate::numtok::{mask_with_rng, TokenSequence};

const TAG_MLM: u64 = 1;
const TAG_CLASSIFY: u64 = 2;
const TAG_VAL: u64 = 0xFFFF;

/// What a [`Trainer`] optimizes.
#[derive(Clone, Copy, Debug)]
pub enum Task<'a> {
    /// Masked-token prediction (plus number regression when value scaling is
    /// on) over unmasked sequences; masks are drawn per epoch.
    Mlm {
        train: &'a [TokenSequence],
        val: &'a [TokenSequence],
    },
    /// Classification of every `[NUM]` token.
    Classify {
        train: &'a [LabeledExample],
        val: &'a [LabeledExample],
        class_weights: Option<&'a [f64]>,
    },
}

impl Task<'_> {
    fn tag(&self) -> u64 {
        match self {
            Task::Mlm { .. } => TAG_MLM,
            Task::Classify { .. } => TAG_CLASSIFY,
        }
    }

    fn train_len(&self) -> usize {
        match self {
            Task::Mlm { train, .. } => train.len(),
            Task::Classify { train, .. } => train.len(),
        }
    }
}

/// One optimizer step in the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation cross-entropy alone (equal to `val_loss` unless a number
    /// loss is mixed in).
    pub val_l1: f64,
}

/// Progress that must survive a checkpoint to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub initial_val: f64,
    pub initial_val_l1: f64,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Model,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    seed: u64,
    tag: u64,
    config_hash: String,
    train_config: TrainConfig,
    state: TrainState,
    log: Vec<LogRecord>,
}

struct Batch {
    seqs: Vec<TokenSequence>,
    targets: Vec<(usize, usize)>,
    labels: Vec<usize>,
    values: Vec<f64>,
}

pub struct Trainer<'a> {
    model: Model,
    /// Log noise scales for the uncertainty objective.
    extra: ParamSet,
    opt: AdamState,
    cfg: TrainConfig,
    task: Task<'a>,
    seed: u64,
    state: TrainState,
    log: Vec<LogRecord>,
    best_params: ParamSet,
    best_extra: ParamSet,
    val_masks: Vec<TokenSequence>,
    sink: Option<BufWriter<File>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, cfg: TrainConfig, task: Task<'a>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if task.train_len() == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        let mut extra = ParamSet::new();
        if cfg.loss_mode == LossMode::Uncertainty {
            extra.push("loss.log_sigma1", Tensor::scalar(0.0))?;
            extra.push("loss.log_sigma2", Tensor::scalar(0.0))?;
        }
        let all: Vec<Tensor> = model
            .params
            .tensors()
            .iter()
            .chain(extra.tensors())
            .cloned()
            .collect();
        let decay = model
            .params
            .tensors()
            .iter()
            .map(|t| t.rows() > 1)
            .chain(extra.tensors().iter().map(|_| false))
            .collect();
        let opt = AdamState::new(&all, decay);
        let val_masks = match task {
            Task::Mlm { val, .. } => val
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        seed,
                        &[task.tag(), TAG_VAL, i as u64],
                    ));
                    mask_with_rng(s, cfg.mask_rate, &mut rng)
                })
                .collect(),
            Task::Classify { .. } => Vec::new(),
        };
        let mut t = Trainer {
            best_params: model.params.clone(),
            best_extra: extra.clone(),
            model,
            extra,
            opt,
            cfg,
            task,
            seed,
            state: TrainState {
                epoch: 0,
                step: 0,
                best_val: f64::INFINITY,
                best_epoch: 0,
                bad_epochs: 0,
                initial_val: f64::NAN,
                initial_val_l1: f64::NAN,
                stopped: false,
                history: Vec::new(),
            },
            log: Vec::new(),
            val_masks,
            sink: None,
        };
        let (v, v1) = t.validate()?;
        t.state.initial_val = v;
        t.state.initial_val_l1 = v1;
        t.state.best_val = v;
        Ok(t)
    }

    /// Appends every logged step to a JSON-lines file.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        self.sink = Some(BufWriter::new(f));
        Ok(())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn finished(&self) -> bool {
        self.state.stopped
    }

    fn batches_per_epoch(&self) -> usize {
        self.task.train_len().div_ceil(self.cfg.batch_size)
    }

    fn planned_steps(&self) -> usize {
        self.batches_per_epoch() * self.cfg.max_epochs
    }

    fn warmup_steps(&self) -> usize {
        match self.cfg.warmup_epochs {
            Some(e) => (e * self.batches_per_epoch() as f64).round() as usize,
            None => (0.1 * self.planned_steps() as f64).round() as usize,
        }
    }

    fn hash(&self) -> String {
        config_hash(&(&self.model.config, &self.cfg, self.seed, self.task.tag()))
    }

    fn make_batch(&self, idx: &[usize], epoch: Option<usize>) -> Batch {
        let mut b = Batch {
            seqs: Vec::with_capacity(idx.len()),
            targets: Vec::new(),
            labels: Vec::new(),
            values: Vec::new(),
        };
        match self.task {
            Task::Mlm { train, .. } => {
                for &i in idx {
                    let seq = match epoch {
                        Some(e) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                                self.seed,
                                &[TAG_MLM, e as u64, i as u64],
                            ));
                            mask_with_rng(&train[i], self.cfg.mask_rate, &mut rng)
                        }
                        None => self.val_masks[i].clone(),
                    };
                    if seq.mask_positions.is_empty() {
                        continue;
                    }
                    let bi = b.seqs.len();
                    for (k, &p) in seq.mask_positions.iter().enumerate() {
                        b.targets.push((bi, p));
                        b.labels.push(seq.y1[k] as usize);
                        b.values.push(seq.y2[k]);
                    }
                    b.seqs.push(seq);
                }
            }
            Task::Classify { train, val, .. } => {
                let src = if epoch.is_some() { train } else { val };
                for &i in idx {
                    let ex = &src[i];
                    if ex.num_positions.is_empty() {
                        continue;
                    }
                    let bi = b.seqs.len();
                    b.targets.extend(ex.num_positions.iter().map(|&p| (bi, p)));
                    b.labels.extend_from_slice(&ex.labels);
                    b.seqs.push(ex.seq.clone());
                }
            }
        }
        b
    }

    /// Builds the batch objective; returns it with its breakdown and the
    /// number of scored targets.
    fn batch_loss(
        &self,
        g: &mut Graph,
        p: &[Var],
        extra: &[Var],
        b: &Batch,
    ) -> Result<(Var, LossBreakdown)> {
        let refs: Vec<&TokenSequence> = b.seqs.iter().collect();
        let enc = self.model.encode(g, p, &refs)?;
        let rows: Vec<usize> = b
            .targets
            .iter()
            .map(|&(bi, pos)| enc.row(bi, pos))
            .collect();
        let h = g.gather_rows(enc.hidden, rows)?;
        let mut br = LossBreakdown {
            sigma1: 1.0,
            sigma2: 1.0,
            w1: 1.0,
            ..Default::default()
        };
        match self.task {
            Task::Classify { class_weights, .. } => {
                let logits = self.model.head_classify(g, p, h)?;
                let w = if self.cfg.class_weighted {
                    class_weights
                } else {
                    None
                };
                let l = loss::mlm_loss(g, logits, &b.labels, w)?;
                br.l1 = g.value(l).item();
                br.combined = br.l1;
                Ok((l, br))
            }
            Task::Mlm { .. } => {
                let logits = self.model.head_lm(g, p, h)?;
                let l1 = loss::mlm_loss(g, logits, &b.labels, None)?;
                br.l1 = g.value(l1).item();
                if !self.model.config.xval_enabled {
                    br.combined = br.l1;
                    return Ok((l1, br));
                }
                let f2 = self.model.head_num(g, p, h)?;
                if !g.value(f2).is_finite() {
                    return Err(Error::Divergence {
                        epoch: self.state.epoch,
                        step: self.state.step,
                        detail: format!("non-finite number prediction; L1 {}", br.l1),
                    });
                }
                let lt2 = loss::number_loss_logscaled(g, f2, &b.values)?;
                let l2 = loss::number_loss_mse(g, f2, &b.values)?;
                br.l_tilde2 = g.value(lt2).item();
                br.l2 = g.value(l2).item();
                let obj = match self.cfg.loss_mode {
                    LossMode::Fixed => {
                        br.w1 = 0.5;
                        br.w2 = 0.5;
                        loss::combined_fixed_node(g, l1, lt2)?
                    }
                    LossMode::Uncertainty => {
                        let (s1, s2) = (g.value(extra[0]).item(), g.value(extra[1]).item());
                        br.sigma1 = s1.exp();
                        br.sigma2 = s2.exp();
                        br.w1 = (-2.0 * s1).exp();
                        br.w2 = 0.5 * (-2.0 * s2).exp();
                        loss::combined_uncertainty_node(g, l1, l2, extra[0], extra[1])?
                    }
                };
                br.combined = g.value(obj).item();
                Ok((obj, br))
            }
        }
    }

    /// Mean validation objective and cross-entropy, weighted by targets.
    fn validate(&self) -> Result<(f64, f64)> {
        let n = match self.task {
            Task::Mlm { val, .. } => val.len(),
            Task::Classify { val, .. } => val.len(),
        };
        let (mut tot, mut tot1, mut count) = (0.0, 0.0, 0usize);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let b = self.make_batch(chunk, None);
            if b.targets.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let p = self.model.bind(&mut g, false);
            let extra = self.extra.bind(&mut g, false);
            let (_, br) = self.batch_loss(&mut g, &p, &extra, &b)?;
            tot += br.combined * b.targets.len() as f64;
            tot1 += br.l1 * b.targets.len() as f64;
            count += b.targets.len();
        }
        if count == 0 {
            return Err(Error::Data("validation set has nothing to score".into()));
        }
        Ok((tot / count as f64, tot1 / count as f64))
    }

    /// Trains one epoch, validates, and updates early-stopping state.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.state.stopped {
            return Err(Error::Data("training already finished".into()));
        }
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..self.task.train_len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed,
            &[self.task.tag(), epoch as u64],
        )));
        let (warmup, total) = (self.warmup_steps(), self.planned_steps());
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let b = self.make_batch(chunk, Some(epoch));
            if b.targets.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let p = self.model.bind(&mut g, true);
            let extra = self.extra.bind(&mut g, true);
            let (obj, br) = self.batch_loss(&mut g, &p, &extra, &b)?;
            if !br.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: self.state.step,
                    detail: format!("non-finite loss {br:?}"),
                });
            }
            let grads = g.backward(obj)?;
            let mut gs: Vec<Tensor> = p
                .iter()
                .chain(&extra)
                .map(|&v| {
                    grads.get(v).cloned().unwrap_or_else(|| {
                        let t = g.value(v);
                        Tensor::zeros(t.rows(), t.cols())
                    })
                })
                .collect();
            if let Some(c) = self.cfg.max_grad_norm {
                let norm = clip_grad_norm(&mut gs, c);
                if !norm.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step: self.state.step,
                        detail: format!("non-finite gradient norm; last loss {br:?}"),
                    });
                }
            }
            let lr = cosine_schedule(self.state.step, warmup, total, self.cfg.lr);
            let mut all: Vec<Tensor> = self
                .model
                .params
                .tensors()
                .iter()
                .chain(self.extra.tensors())
                .cloned()
                .collect();
            adamw_step(&mut all, &gs, &mut self.opt, lr, self.cfg.weight_decay)?;
            let n_model = self.model.params.len();
            for (dst, src) in self
                .model
                .params
                .tensors_mut()
                .iter_mut()
                .zip(&all[..n_model])
            {
                *dst = src.clone();
            }
            for (dst, src) in self.extra.tensors_mut().iter_mut().zip(&all[n_model..]) {
                *dst = src.clone();
            }
            let rec = LogRecord {
                epoch,
                step: self.state.step,
                lr,
                loss: br,
            };
            if let Some(s) = self.sink.as_mut() {
                serde_json::to_writer(&mut *s, &rec)?;
                s.write_all(b"\n")?;
            }
            self.log.push(rec);
            self.state.step += 1;
            sum += br.combined;
            count += 1;
        }
        if let Some(s) = self.sink.as_mut() {
            s.flush()?;
        }
        let (val, val1) = self.validate()?;
        if !val.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: self.state.step,
                detail: format!(
                    "non-finite validation loss; last step {:?}",
                    self.log.last().map(|r| r.loss)
                ),
            });
        }
        if val < self.state.best_val {
            self.state.best_val = val;
            self.state.best_epoch = epoch + 1;
            self.state.bad_epochs = 0;
            self.best_params = self.model.params.clone();
            self.best_extra = self.extra.clone();
        } else {
            self.state.bad_epochs += 1;
        }
        self.state.epoch += 1;
        if self.state.bad_epochs >= self.cfg.patience || self.state.epoch >= self.cfg.max_epochs {
            self.state.stopped = true;
        }
        log::debug!(
            "epoch {epoch}: train {:.4} val {val:.4} (best {:.4})",
            sum / count.max(1) as f64,
            self.state.best_val
        );
        self.state.history.push(EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss: val,
            val_l1: val1,
        });
        Ok(self.state.history.last().unwrap())
    }

    /// Runs until early stopping or the epoch cap.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.state.stopped {
            self.run_epoch()?;
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let best = self
            .model
            .rebuild(self.model.config.clone(), self.best_params)
            .expect("best parameters share the model layout");
        TrainOutcome {
            best,
            state: self.state,
            log: self.log,
        }
    }

    /// Everything needed to continue this run later.
    pub fn checkpoint(&self) -> Checkpoint {
        let names: Vec<String> = self
            .model
            .params
            .names()
            .iter()
            .chain(self.extra.names())
            .cloned()
            .collect();
        let moments = |ts: &[Tensor]| {
            let mut set = ParamSet::new();
            for (n, t) in names.iter().zip(ts) {
                set.push(n.clone(), t.clone()).expect("unique names");
            }
            set
        };
        let mut state = BTreeMap::new();
        state.insert("adam.m".to_string(), moments(&self.opt.m));
        state.insert("adam.v".to_string(), moments(&self.opt.v));
        state.insert("extra".to_string(), self.extra.clone());
        state.insert("best".to_string(), self.best_params.clone());
        state.insert("best_extra".to_string(), self.best_extra.clone());
        let meta = Meta {
            kind: "train".into(),
            seed: self.seed,
            tag: self.task.tag(),
            config_hash: self.hash(),
            train_config: self.cfg.clone(),
            state: self.state.clone(),
            log: self.log.clone(),
        };
        let mut ckpt = Checkpoint::new(self.model.clone());
        ckpt.state = state;
        ckpt.meta = serde_json::json!({
            "train": serde_json::to_value(&meta).expect("meta serializes"),
            "adam_step": self.opt.step,
        });
        ckpt
    }

    /// Continues a run saved with [`Trainer::checkpoint`]. The task data and
    /// config must be the ones the run started with.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig, task: Task<'a>, seed: u64) -> Result<Self> {
        let meta: Meta =
            serde_json::from_value(ckpt.meta.get("train").cloned().ok_or_else(|| {
                Error::Checkpoint("checkpoint carries no training state".into())
            })?)?;
        let adam_step = ckpt
            .meta
            .get("adam_step")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let mut t = Trainer::new(ckpt.model.clone(), cfg, task, seed)?;
        if meta.config_hash != t.hash() {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let mut state = ckpt.state;
        let take = |state: &mut BTreeMap<String, ParamSet>, k: &str| {
            state
                .remove(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {k}")))
        };
        let m = take(&mut state, "adam.m")?;
        let v = take(&mut state, "adam.v")?;
        t.extra = state.remove("extra").unwrap_or_default();
        t.best_params = take(&mut state, "best")?;
        t.best_extra = state.remove("best_extra").unwrap_or_default();
        t.opt.m = m.tensors().to_vec();
        t.opt.v = v.tensors().to_vec();
        t.opt.step = adam_step;
        t.state = meta.state;
        t.log = meta.log;
        Ok(t)
    }
}
