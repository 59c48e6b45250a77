use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde::Serialize;

use numlesa::corpus::{
    class_weights, generate_corpus, load_corpus, save_corpus, split_corpus, AnnotatedNote,
    CorpusSpec,
};
use numlesa::derive_seed;
use numlesa::eval::{
    compare_embeddings, completion_probe, default_terms, evaluate, export_scatter, load_terms,
    log_pearson, metrics_csv, write_scatter, GRADIENT_TEMPLATE,
};
use numlesa::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use numlesa::numtok::{build_vocab, encode, TokenSequence};
use numlesa::train::{
    encode_annotated, run_ablation, LabeledExample, Mode, ProtocolConfig, Task, TrainConfig,
    TrainOutcome, Trainer,
};

use crate::config;
use crate::error::CliError;
use crate::run::{resolve_out, RunDir};

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory [default: $NUMLESA_OUT/<command>, else runs/<command>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing run directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config; omitted keys take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set finetune.lr=3e-4`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        notes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Masked-language-model training, from scratch or from a checkpoint
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Notes whose text is the training material (last 10% held out)
        #[arg(long)]
        corpus: PathBuf,
        /// Extra corpora contributing only to the vocabulary
        #[arg(long)]
        vocab_corpus: Vec<PathBuf>,
        /// Start from this model instead of a random one, on the
        /// prefinetuning schedule
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its trainer.ckpt
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Halt after this many epochs, leaving trainer.ckpt for --resume
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, value_parser = parse_mode, default_value = "plain")]
        mode: Mode,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fine-tune a checkpoint for number classification
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotated corpus, split with `split_seed`
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the checkpoint's own mode
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score a classifier on an annotated corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitName,
        #[arg(long, default_value_t = 7)]
        split_seed: u64,
        /// Leave class O out of the macro average
        #[arg(long)]
        exclude_o: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Top-k completions and number estimate at a single [MASK]
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = GRADIENT_TEMPLATE)]
        text: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Cosine similarity of term embeddings between two checkpoints
    Compare {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// One term per line; `#` starts a comment
        #[arg(long)]
        terms: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Base model, then every mode with and without prefinetuning per seed
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    All,
    Train,
    Val,
    Test,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>()
        .map_err(|_| format!("expected one of plain, lesa, lesa_xval; got {s:?}"))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Probe { .. } => "probe",
            Command::Compare { .. } => "compare",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn out(&self) -> &OutArgs {
        match self {
            Command::Generate { out, .. }
            | Command::Pretrain { out, .. }
            | Command::Finetune { out, .. }
            | Command::Eval { out, .. }
            | Command::Probe { out, .. }
            | Command::Compare { out, .. }
            | Command::Ablate { out, .. } => out,
        }
    }
}

/// Claims the output directory, runs the command and always leaves a manifest.
pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    let name = cmd.name();
    let out = cmd.out();
    let mut run = RunDir::create(resolve_out(out.out.as_deref(), name), name, out.force)?;
    let result = execute(&cmd, &mut run);
    run.finish(&result)?;
    result
}

fn execute(cmd: &Command, run: &mut RunDir) -> Result<(), CliError> {
    match cmd {
        Command::Generate {
            config,
            notes,
            seed,
            ..
        } => {
            let mut spec: CorpusSpec = load_config(config, run)?;
            spec.n_notes = notes.unwrap_or(spec.n_notes);
            spec.seed = seed.unwrap_or(spec.seed);
            spec.validate()?;
            run.set_params(&spec);
            run.write("config.toml", config::to_toml(&spec))?;
            let notes = generate_corpus(&spec)?;
            save_corpus(&notes, &run.path("corpus.jsonl"))?;
            log::info!(
                "wrote {} notes to {}",
                notes.len(),
                run.path("corpus.jsonl").display()
            );
            Ok(())
        }
        Command::Pretrain {
            config,
            corpus,
            vocab_corpus,
            init,
            resume,
            stop_after,
            mode,
            seed,
            ..
        } => pretrain(
            run,
            config,
            corpus,
            vocab_corpus,
            init.as_deref(),
            Resume {
                from: resume.as_deref(),
                stop_after: *stop_after,
            },
            *mode,
            *seed,
        ),
        Command::Finetune {
            config,
            checkpoint,
            corpus,
            mode,
            seed,
            resume,
            stop_after,
            ..
        } => finetune(
            run,
            config,
            checkpoint,
            corpus,
            *mode,
            *seed,
            Resume {
                from: resume.as_deref(),
                stop_after: *stop_after,
            },
        ),
        Command::Eval {
            checkpoint,
            corpus,
            split,
            split_seed,
            exclude_o,
            seed,
            ..
        } => {
            run.set_params(&serde_json::json!({
                "split": split, "split_seed": split_seed, "include_o": !exclude_o, "seed": seed,
            }));
            let model = read_model(run, checkpoint)?;
            let notes = select_split(read_corpus(run, corpus)?, *split, *split_seed)?;
            let examples = encode_notes(&notes, &model)?;
            let metrics = evaluate(&model, &examples, *seed, !exclude_o)?;
            run.write_json("metrics.json", &metrics)?;
            run.write("metrics.csv", metrics_csv(std::slice::from_ref(&metrics)))?;
            if model.config.xval_enabled {
                let pairs = export_scatter(&model, &examples)?;
                write_scatter(&run.path("scatter.csv"), &pairs)?;
                run.write_json(
                    "scatter_summary.json",
                    &serde_json::json!({ "pairs": pairs.len(), "log_pearson": log_pearson(&pairs) }),
                )?;
            }
            println!(
                "macro F1 {:.4} over {} spans",
                metrics.macro_f1, metrics.n_spans
            );
            Ok(())
        }
        Command::Probe {
            checkpoint,
            text,
            k,
            ..
        } => {
            run.set_params(&serde_json::json!({ "text": text, "k": k }));
            let model = read_model(run, checkpoint)?;
            let result = completion_probe(&model, text, *k)?;
            run.write_json("probe.json", &result)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&result).map_err(numlesa::Error::from)?
            );
            Ok(())
        }
        Command::Compare {
            reference,
            candidate,
            terms,
            ..
        } => {
            let terms = match terms {
                Some(p) => {
                    run.add_input(p)?;
                    load_terms(p)?
                }
                None => default_terms(),
            };
            run.set_params(&terms);
            let reference = read_model(run, reference)?;
            let candidate = read_model(run, candidate)?;
            let sim = compare_embeddings(&reference, &candidate, &terms)?;
            run.write("similarity.csv", sim.to_csv())?;
            run.write_json("similarity.json", &sim)?;
            println!("mean diagonal similarity {:.4}", sim.mean_diagonal());
            Ok(())
        }
        Command::Ablate {
            config,
            seeds,
            jobs,
            ..
        } => {
            let mut cfg: ProtocolConfig = load_config(config, run)?;
            if let Some(s) = seeds {
                cfg.seeds = s.clone();
            }
            cfg.jobs = jobs.unwrap_or(cfg.jobs);
            cfg.validate()?;
            run.set_params(&cfg);
            run.write("config.toml", config::to_toml(&cfg))?;
            let (_, base, results, report) = run_ablation(&cfg)?;
            save_checkpoint(&Checkpoint::new(base), &run.path("base.ckpt"))?;
            let records: Vec<_> = results.iter().flat_map(|r| r.runs.iter()).collect();
            run.write_json("runs.json", &records)?;
            for mode in Mode::ALL {
                for pf in [false, true] {
                    let metrics: Vec<_> = records
                        .iter()
                        .filter(|r| r.mode == mode && r.prefinetuned == pf)
                        .map(|r| r.metrics.clone())
                        .collect();
                    let name = format!(
                        "metrics_{}_{}.csv",
                        mode.name(),
                        if pf { "pf" } else { "nopf" }
                    );
                    run.write(&name, metrics_csv(&metrics))?;
                }
            }
            let table = report.to_table();
            run.write("ablation.txt", &table)?;
            run.write_json("ablation.json", &report)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn load_config<T: serde::de::DeserializeOwned>(
    args: &ConfigArgs,
    run: &mut RunDir,
) -> Result<T, CliError> {
    if let Some(p) = &args.config {
        run.add_input(p)?;
    }
    run.set_config_path(args.config.as_deref());
    config::load(args.config.as_deref(), &args.sets)
}

fn read_model(run: &mut RunDir, path: &Path) -> Result<Model, CliError> {
    run.add_input(path)?;
    Ok(load_checkpoint(path)?.model)
}

fn read_corpus(run: &mut RunDir, path: &Path) -> Result<Vec<AnnotatedNote>, CliError> {
    run.add_input(path)?;
    Ok(load_corpus(path)?)
}

fn select_split(
    notes: Vec<AnnotatedNote>,
    which: SplitName,
    seed: u64,
) -> Result<Vec<AnnotatedNote>, CliError> {
    if which == SplitName::All {
        return Ok(notes);
    }
    let split = split_corpus(&notes, [0.70, 0.15, 0.15], seed)?;
    Ok(match which {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        _ => split.test,
    })
}

fn encode_notes(notes: &[AnnotatedNote], model: &Model) -> Result<Vec<LabeledExample>, CliError> {
    Ok(notes
        .iter()
        .map(|n| encode_annotated(n, &model.vocab))
        .collect::<numlesa::Result<Vec<_>>>()?)
}

fn mode_of(config: &ModelConfig) -> Mode {
    match (config.lesa_enabled, config.xval_enabled) {
        (_, true) => Mode::LesaXval,
        (true, false) => Mode::Lesa,
        (false, false) => Mode::Plain,
    }
}

fn with_mode(model: &Model, mode: Mode) -> Result<Model, CliError> {
    let mut config = model.config.clone();
    mode.apply(&mut config);
    Ok(model.rebuild(config, model.params.clone())?)
}

#[derive(Clone, Copy)]
struct Resume<'a> {
    from: Option<&'a Path>,
    stop_after: Option<usize>,
}

/// Trains, saving a resumable checkpoint after every epoch. Returns `None`
/// when halted by `stop_after` before the run finished.
fn train_with_checkpoints(
    run: &RunDir,
    mut trainer: Trainer<'_>,
    stop_after: Option<usize>,
) -> Result<Option<TrainOutcome>, CliError> {
    trainer.log_to(&run.path("loss.jsonl"))?;
    let mut epochs = 0;
    while !trainer.finished() {
        if stop_after.is_some_and(|n| epochs >= n) {
            run.write_json("state.json", trainer.state())?;
            log::info!(
                "halted after {epochs} epochs; continue with --resume {}",
                run.path("trainer.ckpt").display()
            );
            return Ok(None);
        }
        let rec = trainer.run_epoch()?;
        log::info!(
            "epoch {}: train {:.4} val {:.4}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss
        );
        save_checkpoint(&trainer.checkpoint(), &run.path("trainer.ckpt"))?;
        epochs += 1;
    }
    Ok(Some(trainer.into_outcome()))
}

fn save_outcome(run: &RunDir, out: TrainOutcome) -> Result<(), CliError> {
    run.write_json("state.json", &out.state)?;
    save_checkpoint(&Checkpoint::new(out.best), &run.path("model.ckpt"))?;
    log::info!(
        "val loss {:.4} -> {:.4} (best epoch {} of {})",
        out.state.initial_val,
        out.state.best_val,
        out.state.best_epoch,
        out.state.epoch
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pretrain(
    run: &mut RunDir,
    config: &ConfigArgs,
    corpus: &Path,
    vocab_corpus: &[PathBuf],
    init: Option<&Path>,
    resume: Resume<'_>,
    mode: Mode,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg: ProtocolConfig = load_config(config, run)?;
    cfg.validate()?;
    let seed = seed.unwrap_or(cfg.base_seed);
    let stage = if init.is_some() {
        &cfg.prefinetune
    } else {
        &cfg.base
    };
    let train_cfg = TrainConfig {
        mode,
        ..stage.clone()
    };
    run.set_params(&serde_json::json!({ "train": train_cfg, "model": cfg.model, "vocab_cap": cfg.vocab_cap, "seed": seed }));
    run.write("config.toml", config::to_toml(&cfg))?;

    let notes = read_corpus(run, corpus)?;
    let model = match (resume.from, init) {
        (Some(p), _) => {
            run.add_input(p)?;
            load_checkpoint(p)?.model
        }
        (None, Some(p)) => with_mode(&read_model(run, p)?, mode)?,
        (None, None) => {
            let mut extra = Vec::new();
            for p in vocab_corpus {
                extra.extend(read_corpus(run, p)?);
            }
            let vocab = build_vocab(
                notes.iter().chain(&extra).map(|n| n.text.as_str()),
                cfg.vocab_cap,
            )?;
            let mut model_cfg = ModelConfig {
                vocab_size: vocab.len(),
                ..cfg.model.clone()
            };
            mode.apply(&mut model_cfg);
            Model::new(model_cfg, vocab, derive_seed(seed, &[0]))?
        }
    };
    let seqs: Vec<TokenSequence> = notes
        .iter()
        .map(|n| encode(&n.text, &model.vocab))
        .collect();
    let cut = (seqs.len() as f64 * 0.9).round() as usize;
    if cut == 0 || cut == seqs.len() {
        return Err(numlesa::Error::Data(format!(
            "{} notes are too few to hold out a validation tenth",
            seqs.len()
        ))
        .into());
    }
    let (train, val) = seqs.split_at(cut);
    let task = Task::Mlm { train, val };
    let trainer = match resume.from {
        Some(p) => Trainer::resume(load_checkpoint(p)?, train_cfg, task, seed)?,
        None => Trainer::new(model, train_cfg, task, seed)?,
    };
    match train_with_checkpoints(run, trainer, resume.stop_after)? {
        Some(out) => save_outcome(run, out),
        None => Ok(()),
    }
}

fn finetune(
    run: &mut RunDir,
    config: &ConfigArgs,
    checkpoint: &Path,
    corpus: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    resume: Resume<'_>,
) -> Result<(), CliError> {
    let cfg: ProtocolConfig = load_config(config, run)?;
    cfg.validate()?;
    let start = read_model(run, checkpoint)?;
    let mode = mode.unwrap_or_else(|| mode_of(&start.config));
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let train_cfg = TrainConfig {
        mode,
        class_weighted: cfg.class_weighted_modes.contains(&mode),
        ..cfg.finetune.clone()
    };
    run.set_params(&serde_json::json!({
        "train": train_cfg, "split_seed": cfg.split_seed, "include_o": cfg.include_o, "seed": seed,
    }));
    run.write("config.toml", config::to_toml(&cfg))?;

    let notes = read_corpus(run, corpus)?;
    let split = split_corpus(&notes, [0.70, 0.15, 0.15], cfg.split_seed)?;
    let weights = class_weights(&split.train)?;
    let model = with_mode(&start, mode)?;
    let train = encode_notes(&split.train, &model)?;
    let val = encode_notes(&split.val, &model)?;
    let test = encode_notes(&split.test, &model)?;
    let task = Task::Classify {
        train: &train,
        val: &val,
        class_weights: Some(&weights),
    };
    let trainer = match resume.from {
        Some(p) => {
            run.add_input(p)?;
            Trainer::resume(load_checkpoint(p)?, train_cfg, task, seed)?
        }
        None => Trainer::new(model, train_cfg, task, seed)?,
    };
    let Some(out) = train_with_checkpoints(run, trainer, resume.stop_after)? else {
        return Ok(());
    };
    let metrics = evaluate(&out.best, &test, seed, cfg.include_o)?;
    run.write_json("metrics.json", &metrics)?;
    run.write("metrics.csv", metrics_csv(std::slice::from_ref(&metrics)))?;
    println!(
        "test macro F1 {:.4} over {} spans",
        metrics.macro_f1, metrics.n_spans
    );
    save_outcome(run, out)
}
