//! The multi-seed two-stage protocol and the prefinetuning ablation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::trainer::{Task, TrainState, Trainer};
use super::{encode_annotated, LabeledExample, Mode, TrainConfig};
use crate::corpus::{class_weights, generate_corpus, split_corpus, AnnotatedNote, CorpusSpec};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, mean_std, AggregateMetrics, RunMetrics};
use crate::model::{Model, ModelConfig};
use crate::numtok::{build_vocab, encode, TokenSequence, Vocab};

const STAGE_BASE: u64 = 10;
const STAGE_A: u64 = 11;
const STAGE_B: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// The annotated corpus.
    pub corpus: CorpusSpec,
    /// Size and seed of the unannotated corpus used for MLM.
    pub unannotated_notes: usize,
    pub unannotated_seed: u64,
    pub split_seed: u64,
    pub vocab_cap: usize,
    pub model: ModelConfig,
    /// Plain MLM producing the shared starting model.
    pub base: TrainConfig,
    pub base_seed: u64,
    pub prefinetune: TrainConfig,
    pub finetune: TrainConfig,
    pub seeds: Vec<u64>,
    /// Modes fine-tuned with inverse-frequency class weights.
    pub class_weighted_modes: Vec<Mode>,
    /// Count class O in the macro average.
    pub include_o: bool,
    /// Worker threads for independent runs.
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let mlm = TrainConfig {
            lr: 1e-3,
            max_epochs: 40,
            batch_size: 16,
            ..TrainConfig::default()
        };
        ProtocolConfig {
            corpus: CorpusSpec::default(),
            unannotated_notes: 2000,
            unannotated_seed: 1001,
            split_seed: 7,
            vocab_cap: 4096,
            model: ModelConfig::default(),
            base: mlm.clone(),
            base_seed: 0,
            prefinetune: mlm,
            finetune: TrainConfig {
                lr: 1e-3,
                max_epochs: 10,
                ..TrainConfig::default()
            },
            seeds: (0..10).collect(),
            class_weighted_modes: vec![Mode::Plain, Mode::Lesa],
            include_o: true,
            jobs: 1,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        for (name, c) in [
            ("base", &self.base),
            ("prefinetune", &self.prefinetune),
            ("finetune", &self.finetune),
        ] {
            c.validate().map_err(|e| match e {
                Error::Validation { field, reason } => {
                    Error::validation(format!("{name}.{field}"), reason)
                }
                other => other,
            })?;
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "must not be empty"));
        }
        if self.unannotated_notes == 0 {
            return Err(Error::validation("unannotated_notes", "must be positive"));
        }
        if self.jobs == 0 {
            return Err(Error::validation("jobs", "must be at least 1"));
        }
        Ok(())
    }

    fn class_weighted(&self, mode: Mode) -> bool {
        self.class_weighted_modes.contains(&mode)
    }
}

/// Everything derived from the corpora once, shared by every seed.
#[derive(Clone, Debug)]
pub struct ProtocolData {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub mlm_train: Vec<TokenSequence>,
    pub mlm_val: Vec<TokenSequence>,
    pub train: Vec<LabeledExample>,
    pub val: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub class_weights: Vec<f64>,
}

pub fn prepare_data(cfg: &ProtocolConfig) -> Result<ProtocolData> {
    cfg.validate()?;
    let annotated = generate_corpus(&cfg.corpus)?;
    let unannotated = generate_corpus(&CorpusSpec {
        n_notes: cfg.unannotated_notes,
        seed: cfg.unannotated_seed,
        ..cfg.corpus.clone()
    })?;
    let split = split_corpus(&annotated, [0.70, 0.15, 0.15], cfg.split_seed)?;
    let texts = unannotated
        .iter()
        .chain(&split.train)
        .map(|n| n.text.as_str());
    let vocab = build_vocab(texts, cfg.vocab_cap)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let seqs: Vec<TokenSequence> = unannotated
        .iter()
        .map(|n| encode(&n.text, &vocab))
        .collect();
    let cut = (seqs.len() as f64 * 0.9).round() as usize;
    let (mlm_train, mlm_val) = (seqs[..cut].to_vec(), seqs[cut..].to_vec());
    let enc = |notes: &[AnnotatedNote]| {
        notes
            .iter()
            .map(|n| encode_annotated(n, &vocab))
            .collect::<Result<Vec<_>>>()
    };
    Ok(ProtocolData {
        class_weights: class_weights(&split.train)?,
        train: enc(&split.train)?,
        val: enc(&split.val)?,
        test: enc(&split.test)?,
        vocab,
        model,
        mlm_train,
        mlm_val,
    })
}

fn with_mode(model: &Model, mode: Mode) -> Result<Model> {
    let mut config = model.config.clone();
    mode.apply(&mut config);
    model.rebuild(config, model.params.clone())
}

/// Plain MLM from a random initialization: the shared reference model.
pub fn pretrain_base(data: &ProtocolData, cfg: &ProtocolConfig) -> Result<Model> {
    let mut config = data.model.clone();
    Mode::Plain.apply(&mut config);
    let init = Model::new(
        config,
        data.vocab.clone(),
        derive_seed(cfg.base_seed, &[STAGE_BASE]),
    )?;
    let task = Task::Mlm {
        train: &data.mlm_train,
        val: &data.mlm_val,
    };
    let out = Trainer::new(
        init,
        cfg.base.clone(),
        task,
        derive_seed(cfg.base_seed, &[STAGE_BASE, 1]),
    )?
    .run()?;
    log::info!(
        "base model: val loss {:.4} -> {:.4} after {} epochs",
        out.state.initial_val,
        out.state.best_val,
        out.state.epoch
    );
    Ok(out.best)
}

/// MLM prefinetuning of the base model in `mode`.
pub fn prefinetune(
    data: &ProtocolData,
    cfg: &ProtocolConfig,
    base: &Model,
    mode: Mode,
    seed: u64,
) -> Result<(Model, TrainState)> {
    let model = with_mode(base, mode)?;
    let train_cfg = TrainConfig {
        mode,
        ..cfg.prefinetune.clone()
    };
    let task = Task::Mlm {
        train: &data.mlm_train,
        val: &data.mlm_val,
    };
    let out = Trainer::new(
        model,
        train_cfg,
        task,
        derive_seed(seed, &[STAGE_A, mode as u64]),
    )?
    .run()?;
    Ok((out.best, out.state))
}

/// Classification fine-tuning, evaluated on the test split.
pub fn finetune(
    data: &ProtocolData,
    cfg: &ProtocolConfig,
    start: &Model,
    mode: Mode,
    prefinetuned: bool,
    seed: u64,
) -> Result<(Model, RunRecord)> {
    let model = with_mode(start, mode)?;
    let train_cfg = TrainConfig {
        mode,
        class_weighted: cfg.class_weighted(mode),
        ..cfg.finetune.clone()
    };
    let task = Task::Classify {
        train: &data.train,
        val: &data.val,
        class_weights: Some(&data.class_weights),
    };
    let t0 = Instant::now();
    let out = Trainer::new(
        model,
        train_cfg,
        task,
        derive_seed(seed, &[STAGE_B, mode as u64, prefinetuned as u64]),
    )?
    .run()?;
    let metrics = evaluate(&out.best, &data.test, seed, cfg.include_o)?;
    log::info!(
        "seed {seed} {} prefinetuned={prefinetuned}: macro F1 {:.4} ({} epochs, {:.1}s)",
        mode.name(),
        metrics.macro_f1,
        out.state.epoch,
        t0.elapsed().as_secs_f64()
    );
    Ok((
        out.best,
        RunRecord {
            mode,
            prefinetuned,
            metrics,
            epochs: out.state.epoch,
            best_val: out.state.best_val,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub prefinetuned: bool,
    pub metrics: RunMetrics,
    pub epochs: usize,
    pub best_val: f64,
}

/// One seed's full pipeline.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    /// Stage-A checkpoints in [`Mode::ALL`] order.
    pub prefinetuned: Vec<Model>,
    pub stage_a: Vec<TrainState>,
    /// Fine-tuned from the stage-A checkpoints, same order.
    pub finetuned: Vec<Model>,
    /// Fine-tuned runs, mode-major with prefinetuning off then on.
    pub runs: Vec<RunRecord>,
}

impl SeedResult {
    pub fn run(&self, mode: Mode, prefinetuned: bool) -> Option<&RunRecord> {
        self.runs
            .iter()
            .find(|r| r.mode == mode && r.prefinetuned == prefinetuned)
    }

    pub fn prefinetuned_model(&self, mode: Mode) -> &Model {
        &self.prefinetuned[mode_index(mode)]
    }

    pub fn finetuned_model(&self, mode: Mode) -> &Model {
        &self.finetuned[mode_index(mode)]
    }
}

fn mode_index(mode: Mode) -> usize {
    Mode::ALL
        .iter()
        .position(|&m| m == mode)
        .expect("mode listed")
}

pub fn run_seed(
    data: &ProtocolData,
    cfg: &ProtocolConfig,
    base: &Model,
    seed: u64,
) -> Result<SeedResult> {
    let mut prefinetuned = Vec::new();
    let mut stage_a = Vec::new();
    let mut finetuned = Vec::new();
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let (m, state) = prefinetune(data, cfg, base, mode, seed)?;
        log::info!(
            "seed {seed} {} prefinetune: val {:.4} -> {:.4} ({} epochs)",
            mode.name(),
            state.initial_val,
            state.best_val,
            state.epoch
        );
        runs.push(finetune(data, cfg, base, mode, false, seed)?.1);
        let (tuned, run) = finetune(data, cfg, &m, mode, true, seed)?;
        runs.push(run);
        finetuned.push(tuned);
        prefinetuned.push(m);
        stage_a.push(state);
    }
    Ok(SeedResult {
        seed,
        prefinetuned,
        stage_a,
        finetuned,
        runs,
    })
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Vec<Result<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// One row of the prefinetuning ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub prefinetuned: bool,
    /// Macro F1 per seed, in seed order.
    pub macro_f1: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: Mode, prefinetuned: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.prefinetuned == prefinetuned)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("mode       prefinetune  macro_f1_mean  macro_f1_std\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:<12} {:>13.4} {:>13.4}\n",
                r.mode.name(),
                if r.prefinetuned { "after" } else { "before" },
                r.mean,
                r.std
            ));
        }
        s
    }
}

pub fn ablation_report(results: &[SeedResult]) -> AblationReport {
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        for pf in [false, true] {
            let macro_f1: Vec<f64> = results
                .iter()
                .filter_map(|r| r.run(mode, pf).map(|x| x.metrics.macro_f1))
                .collect();
            let (mean, std) = mean_std(&macro_f1);
            rows.push(AblationRow {
                mode,
                prefinetuned: pf,
                macro_f1,
                mean,
                std,
            });
        }
    }
    AblationReport {
        seeds: results.iter().map(|r| r.seed).collect(),
        rows,
    }
}

/// Base model, then every seed of the two-stage pipeline.
pub fn run_ablation(
    cfg: &ProtocolConfig,
) -> Result<(ProtocolData, Model, Vec<SeedResult>, AblationReport)> {
    let data = prepare_data(cfg)?;
    let base = pretrain_base(&data, cfg)?;
    let results = par_map(&cfg.seeds, cfg.jobs, |&s| run_seed(&data, cfg, &base, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let report = ablation_report(&results);
    Ok((data, base, results, report))
}

/// Aggregated metrics of one configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub mode: Mode,
    pub prefinetuned: bool,
    pub runs: Vec<RunMetrics>,
    pub aggregate: AggregateMetrics,
}

/// The full pipeline for a single mode (prefinetuned) over every seed.
pub fn run_protocol(cfg: &ProtocolConfig, mode: Mode) -> Result<ProtocolReport> {
    if cfg.seeds.len() < 2 {
        return Err(Error::validation(
            "seeds",
            "the protocol needs at least two seeds",
        ));
    }
    let data = prepare_data(cfg)?;
    let base = pretrain_base(&data, cfg)?;
    let runs = par_map(&cfg.seeds, cfg.jobs, |&s| {
        let (m, _) = prefinetune(&data, cfg, &base, mode, s)?;
        Ok(finetune(&data, cfg, &m, mode, true, s)?.1.metrics)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolReport {
        mode,
        prefinetuned: true,
        aggregate: aggregate(&runs)?,
        runs,
    })
}
