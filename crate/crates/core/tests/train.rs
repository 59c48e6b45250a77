use std::sync::OnceLock;

use numlesa::corpus::{generate_corpus, ClassLabel, CorpusSpec};
use numlesa::eval::predict;
use numlesa::loss::LossMode;
use numlesa::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use numlesa::numerics::Tensor;
use numlesa::numtok::{build_vocab, encode, TokenSequence, Vocab};
use numlesa::train::{
    adamw_step, clip_grad_norm, cosine_schedule, encode_annotated, AdamState, LabeledExample, Mode,
    Task, TrainConfig, Trainer, ADAM_EPS, BETA1, BETA2,
};
use numlesa::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Toy {
    vocab: Vocab,
    mlm_train: Vec<TokenSequence>,
    mlm_val: Vec<TokenSequence>,
    train: Vec<LabeledExample>,
    val: Vec<LabeledExample>,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let notes = generate_corpus(&CorpusSpec {
            n_notes: 400,
            seed: 3,
            ..CorpusSpec::default()
        })
        .unwrap();
        let vocab = build_vocab(notes.iter().map(|n| n.text.as_str()), 4096).unwrap();
        let seqs: Vec<TokenSequence> = notes.iter().map(|n| encode(&n.text, &vocab)).collect();
        let labeled: Vec<LabeledExample> = notes
            .iter()
            .map(|n| encode_annotated(n, &vocab).unwrap())
            .collect();
        Toy {
            mlm_train: seqs[..48].to_vec(),
            mlm_val: seqs[48..64].to_vec(),
            train: labeled[..48].to_vec(),
            val: labeled[48..64].to_vec(),
            vocab,
        }
    })
}

fn model(mode: Mode, seed: u64) -> Model {
    let mut cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: toy().vocab.len(),
        ..ModelConfig::default()
    };
    mode.apply(&mut cfg);
    Model::new(cfg, toy().vocab.clone(), seed).unwrap()
}

fn cfg(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        max_epochs: epochs,
        batch_size: 8,
        mode,
        ..TrainConfig::default()
    }
}

fn mlm() -> Task<'static> {
    Task::Mlm {
        train: &toy().mlm_train,
        val: &toy().mlm_val,
    }
}

fn classify() -> Task<'static> {
    Task::Classify {
        train: &toy().train,
        val: &toy().val,
        class_weights: None,
    }
}

/// Textbook AdamW on flat vectors.
fn reference_adamw(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: i32,
    lr: f64,
    wd: f64,
) {
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mh = m[i] / (1.0 - BETA1.powi(t));
        let vh = v[i] / (1.0 - BETA2.powi(t));
        p[i] = p[i] - lr * wd * p[i] - lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

#[test]
fn adamw_matches_the_textbook_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut params = vec![Tensor::from_rows(2, 3, init.clone()).unwrap()];
    let mut state = AdamState::new(&params, vec![true]);
    let (mut p, mut m, mut v) = (init, vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=25 {
        let g: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        adamw_step(
            &mut params,
            &[Tensor::from_rows(2, 3, g.clone()).unwrap()],
            &mut state,
            0.01,
            0.1,
        )
        .unwrap();
        reference_adamw(&mut p, &g, &mut m, &mut v, t, 0.01, 0.1);
        for (a, b) in params[0].data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let target = [3.0, -1.5, 0.25, 8.0];
    let mut params = vec![Tensor::zeros(1, 4)];
    let mut state = AdamState::new(&params, vec![false]);
    for _ in 0..200 {
        let g: Vec<f64> = params[0]
            .data()
            .iter()
            .zip(&target)
            .map(|(p, c)| 2.0 * (p - c))
            .collect();
        adamw_step(&mut params, &[Tensor::row_vector(g)], &mut state, 0.1, 0.0).unwrap();
    }
    for (p, c) in params[0].data().iter().zip(&target) {
        assert!((p - c).abs() < 0.05, "{p} vs {c}");
    }
}

#[test]
fn weight_decay_only_touches_flagged_tensors() {
    let mut params = vec![Tensor::filled(2, 2, 1.0), Tensor::filled(1, 2, 1.0)];
    let mut state = AdamState::new(&params, vec![true, false]);
    let zeros = [Tensor::zeros(2, 2), Tensor::zeros(1, 2)];
    adamw_step(&mut params, &zeros, &mut state, 0.1, 0.5).unwrap();
    assert!(params[0].data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
    assert!(params[1].data().iter().all(|&x| x == 1.0));
}

#[test]
fn adamw_rejects_mismatched_shapes() {
    let mut params = vec![Tensor::zeros(2, 2)];
    let mut state = AdamState::new(&params, vec![true]);
    assert!(matches!(
        adamw_step(&mut params, &[Tensor::zeros(1, 2)], &mut state, 0.1, 0.0),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    let (warmup, total, base) = (10, 100, 2e-3);
    assert_eq!(cosine_schedule(0, warmup, total, base), 0.0);
    for s in 0..warmup {
        let a = cosine_schedule(s, warmup, total, base);
        assert!((a - base * s as f64 / warmup as f64).abs() < 1e-18);
    }
    assert_eq!(cosine_schedule(warmup, warmup, total, base), base);
    let mid = cosine_schedule(55, warmup, total, base);
    assert!((mid - base / 2.0).abs() < 1e-15);
    let mut prev = base;
    for s in warmup + 1..=total {
        let a = cosine_schedule(s, warmup, total, base);
        assert!(a <= prev);
        prev = a;
    }
    assert!(cosine_schedule(total, warmup, total, base).abs() < 1e-18);
    assert!(cosine_schedule(total + 50, warmup, total, base).abs() < 1e-18);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = vec![
        Tensor::row_vector(vec![3.0, 0.0]),
        Tensor::row_vector(vec![0.0, 4.0]),
    ];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0].get(0, 0) - 0.6).abs() < 1e-15);
    assert!((g[1].get(0, 1) - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::row_vector(vec![0.3, 0.4])];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.3, 0.4]);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let a = Trainer::new(model(Mode::Lesa, 1), cfg(Mode::Lesa, 2), mlm(), 9)
        .unwrap()
        .run()
        .unwrap();
    let b = Trainer::new(model(Mode::Lesa, 1), cfg(Mode::Lesa, 2), mlm(), 9)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state, b.state);
    assert_eq!(a.best.params, b.best.params);

    let c = Trainer::new(model(Mode::Lesa, 1), cfg(Mode::Lesa, 2), mlm(), 10)
        .unwrap()
        .run()
        .unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn resuming_from_disk_matches_an_uninterrupted_run() {
    for mode in [Mode::Plain, Mode::LesaXval] {
        let mut c = cfg(mode, 4);
        c.patience = 10;
        if mode == Mode::LesaXval {
            c.loss_mode = LossMode::Uncertainty;
        }
        let straight = Trainer::new(model(mode, 2), c.clone(), mlm(), 5)
            .unwrap()
            .run()
            .unwrap();

        let mut t = Trainer::new(model(mode, 2), c.clone(), mlm(), 5).unwrap();
        t.run_epoch().unwrap();
        t.run_epoch().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&t.checkpoint(), &path).unwrap();
        drop(t);
        let resumed = Trainer::resume(load_checkpoint(&path).unwrap(), c, mlm(), 5)
            .unwrap()
            .run()
            .unwrap();

        assert_eq!(straight.log, resumed.log, "{mode:?}");
        assert_eq!(straight.state, resumed.state);
        assert_eq!(straight.best.params, resumed.best.params);
    }
}

#[test]
fn resume_refuses_a_different_configuration() {
    let c = cfg(Mode::Plain, 3);
    let mut t = Trainer::new(model(Mode::Plain, 2), c.clone(), mlm(), 5).unwrap();
    t.run_epoch().unwrap();
    let ckpt = t.checkpoint();
    let other = TrainConfig {
        lr: 1e-2,
        ..c.clone()
    };
    assert!(matches!(
        Trainer::resume(ckpt.clone(), other, mlm(), 5),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Trainer::resume(ckpt, c, mlm(), 6),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn early_stopping_bookkeeping_is_consistent() {
    for (patience, lr) in [(1, 3e-3), (2, 0.3), (4, 3e-3)] {
        let c = TrainConfig {
            patience,
            lr,
            ..cfg(Mode::Plain, 12)
        };
        let out = Trainer::new(model(Mode::Plain, 4), c, mlm(), 1)
            .unwrap()
            .run()
            .unwrap();
        let s = &out.state;
        assert!(s.stopped);
        assert_eq!(s.history.len(), s.epoch);
        assert!(s.bad_epochs >= patience || s.epoch == 12);
        assert_eq!(s.bad_epochs, s.epoch - s.best_epoch);
        let vals: Vec<f64> = s.history.iter().map(|h| h.val_loss).collect();
        let best = vals.iter().cloned().fold(s.initial_val, f64::min);
        assert_eq!(s.best_val, best);
        if s.best_epoch > 0 {
            assert_eq!(vals[s.best_epoch - 1], best);
        }
        if s.epoch < 12 {
            assert!(vals[s.epoch - patience..].iter().all(|&v| v >= best));
        }

        // The returned model is the best one, not the last one.
        let again = Trainer::new(out.best.clone(), cfg(Mode::Plain, 12), mlm(), 1).unwrap();
        assert_eq!(again.state().initial_val, best);
    }
}

#[test]
fn mlm_training_lowers_validation_cross_entropy() {
    let out = Trainer::new(model(Mode::Lesa, 0), cfg(Mode::Lesa, 8), mlm(), 0)
        .unwrap()
        .run()
        .unwrap();
    let last = out.state.history.last().unwrap();
    assert!(
        last.val_l1 < out.state.initial_val_l1,
        "{} vs {}",
        last.val_l1,
        out.state.initial_val_l1
    );
}

#[test]
fn value_scaled_runs_log_both_objectives_every_step() {
    let out = Trainer::new(model(Mode::LesaXval, 0), cfg(Mode::LesaXval, 1), mlm(), 0)
        .unwrap()
        .run()
        .unwrap();
    assert!(!out.log.is_empty());
    for r in &out.log {
        assert!(r.loss.l1 > 0.0 && r.loss.l1.is_finite());
        assert!(r.loss.l_tilde2 > 0.0 && r.loss.l_tilde2.is_finite());
        assert_eq!((r.loss.w1, r.loss.w2), (0.5, 0.5));
        assert!((r.loss.combined - 0.5 * (r.loss.l1 + r.loss.l_tilde2)).abs() < 1e-12);
    }
    let json = serde_json::to_value(&out.log[0]).unwrap();
    assert!(json.get("L1").is_some() && json.get("L_tilde2").is_some());

    let plain = Trainer::new(model(Mode::Plain, 0), cfg(Mode::Plain, 1), mlm(), 0)
        .unwrap()
        .run()
        .unwrap();
    assert!(plain
        .log
        .iter()
        .all(|r| r.loss.l_tilde2 == 0.0 && r.loss.combined == r.loss.l1));
}

#[test]
fn uncertainty_mode_trains_the_noise_scales() {
    let c = TrainConfig {
        loss_mode: LossMode::Uncertainty,
        ..cfg(Mode::LesaXval, 2)
    };
    let out = Trainer::new(model(Mode::LesaXval, 0), c, mlm(), 0)
        .unwrap()
        .run()
        .unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert_eq!((first.sigma1, first.sigma2), (1.0, 1.0));
    assert!(last.sigma1 != 1.0 && last.sigma2 != 1.0);
    assert!(last.sigma1 > 0.0 && last.sigma2 > 0.0);
    assert!((last.w1 - 1.0 / (last.sigma1 * last.sigma1)).abs() < 1e-12);
}

#[test]
fn log_file_holds_one_json_record_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.jsonl");
    let mut t = Trainer::new(model(Mode::LesaXval, 0), cfg(Mode::LesaXval, 1), mlm(), 0).unwrap();
    t.log_to(&path).unwrap();
    let out = t.run().unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), out.log.len());
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(rec["step"], 0);
    assert!(rec["L_tilde2"].as_f64().unwrap() > 0.0);
}

#[test]
fn overflowing_values_raise_divergence() {
    let mut seqs = toy().mlm_train[..8].to_vec();
    for s in &mut seqs {
        for v in s.values.iter_mut().filter(|v| **v != 1.0) {
            *v = 1e300;
        }
    }
    let task = Task::Mlm {
        train: &seqs,
        val: &toy().mlm_val,
    };
    let c = TrainConfig {
        mask_rate: 0.5,
        ..cfg(Mode::LesaXval, 2)
    };
    let err = Trainer::new(model(Mode::LesaXval, 0), c, task, 0)
        .unwrap()
        .run()
        .unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 0, .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..cfg(Mode::Plain, 1)
        },
        TrainConfig {
            patience: 0,
            ..cfg(Mode::Plain, 1)
        },
        TrainConfig {
            seeds: vec![],
            ..cfg(Mode::Plain, 1)
        },
    ] {
        assert!(matches!(
            Trainer::new(model(Mode::Plain, 0), bad, mlm(), 0),
            Err(Error::Validation { .. })
        ));
    }
}

#[test]
fn classification_learns_the_toy_task() {
    let out = Trainer::new(model(Mode::Plain, 0), cfg(Mode::Plain, 10), classify(), 0)
        .unwrap()
        .run()
        .unwrap();
    assert!(out.state.best_val < out.state.initial_val);
    let preds = predict(&out.best, &toy().val).unwrap();
    let (hit, total) = preds
        .iter()
        .zip(&toy().val)
        .fold((0, 0), |(h, t), (p, ex)| {
            (
                h + p.iter().zip(&ex.labels).filter(|(a, b)| a == b).count(),
                t + ex.labels.len(),
            )
        });
    assert!(hit as f64 / total as f64 > 0.7, "{hit}/{total}");
}

/// Two classes in a 9:1 ratio that the input cannot separate.
fn imbalanced(n: usize, seed: u64) -> Vec<LabeledExample> {
    let vocab = &toy().vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let seq = encode("FC 12 bpm 30 bpm", vocab);
            let nums: Vec<usize> = (0..seq.len()).filter(|&p| seq.values[p] != 1.0).collect();
            let labels: Vec<usize> = nums
                .iter()
                .map(|_| usize::from(rng.gen_bool(0.1)))
                .collect();
            LabeledExample {
                span_of: (0..nums.len()).collect(),
                span_labels: labels
                    .iter()
                    .map(|&l| ClassLabel::from_index(l).unwrap())
                    .collect(),
                num_positions: nums,
                labels,
                seq,
            }
        })
        .collect()
}

#[test]
fn class_weights_raise_minority_recall() {
    let train = imbalanced(200, 1);
    let val = imbalanced(40, 2);
    let mut weights = vec![1.0; 8];
    weights[1] = 20.0;
    let recall = |weighted: bool| {
        let task = Task::Classify {
            train: &train,
            val: &val,
            class_weights: Some(&weights),
        };
        let c = TrainConfig {
            class_weighted: weighted,
            patience: 20,
            ..cfg(Mode::Plain, 6)
        };
        let out = Trainer::new(model(Mode::Plain, 0), c, task, 0)
            .unwrap()
            .run()
            .unwrap();
        let preds = predict(&out.best, &val).unwrap();
        let (mut hit, mut total) = (0, 0);
        for (p, ex) in preds.iter().zip(&val) {
            for (a, b) in p.iter().zip(&ex.labels) {
                if *b == 1 {
                    total += 1;
                    hit += usize::from(*a == 1);
                }
            }
        }
        hit as f64 / total as f64
    };
    let (plain, weighted) = (recall(false), recall(true));
    assert!(
        weighted > plain + 0.5,
        "weighted {weighted} vs unweighted {plain}"
    );
}
