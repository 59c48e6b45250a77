use numlesa::corpus::ClassLabel;
use numlesa::model::{
    build_label_embeddings, init_params, label_token_ids, lesa_attention, load_checkpoint,
    save_checkpoint, Checkpoint, Model, ModelConfig, ParamSet,
};
use numlesa::numerics::{grad_check, Graph, Tensor, Var};
use numlesa::numtok::{encode, TokenSequence, Vocab, NUM_ID, RESERVED};
use numlesa::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 12] = [
    "FC", "bpm", "sat", "gradient", "VG-VD", "APGAR", "CIA", "âge", "dose", "FR", "mmHg", "à",
];

fn vocab() -> Vocab {
    Vocab::from_tokens(
        RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(WORDS.iter().map(|s| s.to_string()))
            .collect(),
    )
    .unwrap()
}

fn keywords() -> Vec<Vec<String>> {
    [
        ["dose"],
        ["FR"],
        ["FC"],
        ["âge"],
        ["sat"],
        ["APGAR"],
        ["gradient"],
        ["CIA"],
    ]
    .iter()
    .map(|k| k.iter().map(|s| s.to_string()).collect())
    .collect()
}

fn config(d: usize, heads: usize, lesa: bool, xval: bool) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: 2,
        n_heads: heads,
        d_ff: 2 * d,
        max_len: 16,
        vocab_size: vocab().len(),
        lesa_enabled: lesa,
        xval_enabled: xval,
        ..ModelConfig::default()
    }
}

/// A model whose weights are large enough that attention is far from
/// uniform.
fn model(cfg: ModelConfig, seed: u64) -> Model {
    let base = init_params(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut params = ParamSet::new();
    for (name, t) in base.iter() {
        let range = if name.ends_with(".gamma") {
            0.5..1.5
        } else {
            -0.5..0.5
        };
        let data = (0..t.rows() * t.cols())
            .map(|_| rng.gen_range(range.clone()))
            .collect();
        let t = Tensor::from_rows(t.rows(), t.cols(), data).unwrap();
        params.push(name, t).unwrap();
    }
    Model::with_keywords(cfg, vocab(), params, &keywords()).unwrap()
}

fn sample_seq() -> TokenSequence {
    encode("FC 142 bpm sat 91 gradient VG-VD à 2,5 mmHg", &vocab())
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_rows(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        for j in 0..w.cols() {
            let mut s = b.get(0, j);
            for k in 0..x.cols() {
                s += x.get(i, k) * w.get(k, j);
            }
            y.set(i, j, s);
        }
    }
    y
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Cosine of every pair of label-attention columns, computed directly.
fn cosim_oracle(
    x: &Tensor,
    xl: &Tensor,
    wq: &Tensor,
    bq: &Tensor,
    wk: &Tensor,
    bk: &Tensor,
    heads: usize,
) -> Vec<Vec<f64>> {
    let d = x.cols();
    let lq = linear(xl, wq, bq);
    let k = linear(x, wk, bk);
    let scale = ((d / heads) as f64).sqrt();
    let a: Vec<Vec<f64>> = (0..lq.rows())
        .map(|c| {
            let s: Vec<f64> = (0..k.rows())
                .map(|t| (0..d).map(|j| lq.get(c, j) * k.get(t, j)).sum::<f64>() / scale)
                .collect();
            softmax(&s)
        })
        .collect();
    let l = x.rows();
    let col = |t: usize| a.iter().map(|r| r[t]).collect::<Vec<f64>>();
    (0..l)
        .map(|i| {
            (0..l)
                .map(|j| {
                    let (u, v) = (col(i), col(j));
                    let dot: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
                    let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                    dot / (nu * nv)
                })
                .collect()
        })
        .collect()
}

#[test]
fn cosim_matches_brute_force_cosines() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d, n, heads) = (3 + seed as usize % 4, 8, 8, 2);
        let x = random(l, d, &mut rng).map(|v| 3.0 * v);
        let xl = random(n, d, &mut rng).map(|v| 3.0 * v);
        let (wq, bq, wk, bk) = (
            random(d, d, &mut rng),
            random(1, d, &mut rng),
            random(d, d, &mut rng),
            random(1, d, &mut rng),
        );
        let out = lesa_attention(&x, &xl, [&wq, &bq, &wk, &bk], heads).unwrap();
        let oracle = cosim_oracle(&x, &xl, &wq, &bq, &wk, &bk, heads);
        for i in 0..l {
            assert!((out.cosim.get(i, i) - 1.0).abs() < 1e-6);
            for j in 0..l {
                assert!(
                    (out.cosim.get(i, j) - oracle[i][j]).abs() < 1e-10,
                    "seed {seed} ({i},{j})"
                );
                assert!((out.cosim.get(i, j) - out.cosim.get(j, i)).abs() < 1e-10);
                assert!((-1.0..=1.0 + 1e-12).contains(&out.cosim.get(i, j)));
            }
        }
        let rows: f64 = (0..n)
            .map(|c| out.label_attention.row(c).iter().sum::<f64>())
            .sum();
        assert!((rows - n as f64).abs() < 1e-10);

        let q = linear(&x, &wq, &bq);
        let k = linear(&x, &wk, &bk);
        let dh = d / heads;
        for h in 0..heads {
            for i in 0..l {
                for j in 0..l {
                    let s: f64 = (h * dh..(h + 1) * dh)
                        .map(|c| q.get(i, c) * k.get(j, c))
                        .sum::<f64>()
                        / (dh as f64).sqrt();
                    assert!((out.scores[h].get(i, j) - s - oracle[i][j]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn identical_tokens_have_unit_cosim() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = random(4, 8, &mut rng);
    let r0 = x.row(0).to_vec();
    x.row_mut(2).copy_from_slice(&r0);
    let xl = random(8, 8, &mut rng);
    let (wq, bq, wk, bk) = (
        random(8, 8, &mut rng),
        random(1, 8, &mut rng),
        random(8, 8, &mut rng),
        random(1, 8, &mut rng),
    );
    let out = lesa_attention(&x, &xl, [&wq, &bq, &wk, &bk], 4).unwrap();
    assert!((out.cosim.get(0, 2) - 1.0).abs() < 1e-12);
}

#[test]
fn lesa_attention_rejects_bad_shapes() {
    let x = Tensor::zeros(3, 8);
    let xl = Tensor::zeros(8, 6);
    let w = Tensor::zeros(8, 8);
    let b = Tensor::zeros(1, 8);
    assert!(matches!(
        lesa_attention(&x, &xl, [&w, &b, &w, &b], 2),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn trace_exposes_label_attention_and_cosim() {
    let m = model(config(8, 2, true, true), 1);
    let seq = sample_seq();
    let (_, trace) = m.forward(&seq).unwrap();
    let l = seq.len();
    let layer0 = &trace.layers[0];
    let a = layer0.label_attention.as_ref().unwrap();
    assert_eq!(a.shape(), &[8, l]);
    let c = layer0.cosim.as_ref().unwrap();
    for i in 0..l {
        assert!((c.get(i, i) - 1.0).abs() < 1e-6);
    }
    assert!(trace.layers[1].cosim.is_none());
    for layer in &trace.layers {
        assert_eq!(layer.probs.len(), 2);
        for p in &layer.probs {
            for r in 0..l {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn embed_rows(m: &Model, seq: &TokenSequence) -> Tensor {
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let h = m.embed(&mut g, &p, &[seq]).unwrap();
    g.value(h).clone()
}

#[test]
fn unit_values_leave_embeddings_unchanged() {
    let on = model(config(8, 2, false, true), 2);
    let off = on
        .rebuild(config(8, 2, false, false), on.params.clone())
        .unwrap();
    let mut seq = sample_seq();
    seq.values.iter_mut().for_each(|v| *v = 1.0);
    assert_eq!(embed_rows(&on, &seq), embed_rows(&off, &seq));
}

#[test]
fn scaling_a_value_scales_only_its_row() {
    let m = model(config(8, 2, false, true), 2);
    let seq = sample_seq();
    let base = embed_rows(&m, &seq);
    let pos = seq.ids.iter().position(|&i| i == NUM_ID).unwrap();
    for c in [2.0, 0.5, 1e-3, 1e4, -3.0] {
        let mut scaled = seq.clone();
        scaled.values[pos] *= c;
        let h = embed_rows(&m, &scaled);
        for j in 0..8 {
            let want = base.get(pos, j) * c;
            assert!(
                (h.get(pos, j) - want).abs() <= 4.0 * f64::EPSILON * want.abs(),
                "c = {c}"
            );
        }
        for r in (0..seq.len()).filter(|&r| r != pos) {
            assert_eq!(h.row(r), base.row(r));
        }
        let ratio = Tensor::row_vector(h.row(pos).to_vec()).norm()
            / Tensor::row_vector(base.row(pos).to_vec()).norm();
        assert!((ratio - c.abs()).abs() < 1e-12 * c.abs().max(1.0));
    }
}

#[test]
fn values_are_ignored_without_value_scaling() {
    let m = model(config(8, 2, false, false), 2);
    let seq = sample_seq();
    let mut ones = seq.clone();
    ones.values.iter_mut().for_each(|v| *v = 1.0);
    assert_eq!(embed_rows(&m, &seq), embed_rows(&m, &ones));
}

/// A textbook post-LN encoder written with plain loops.
fn reference_encoder(m: &Model, seq: &TokenSequence) -> Tensor {
    let c = &m.config;
    let p = |n: &str| m.params.get(n).unwrap().clone();
    let (d, heads) = (c.d_model, c.n_heads);
    let dh = d / heads;
    let l = seq.len();
    let (tok, pos) = (p("embed.tokens"), p("embed.positions"));
    let mut h = Tensor::zeros(l, d);
    for i in 0..l {
        for j in 0..d {
            h.set(i, j, tok.get(seq.ids[i] as usize, j) + pos.get(i, j));
        }
    }
    let ln = |x: &Tensor, g: &Tensor, b: &Tensor| {
        let mut y = x.clone();
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for j in 0..d {
                y.set(
                    i,
                    j,
                    (row[j] - mean) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j),
                );
            }
        }
        y
    };
    for layer in 0..c.n_layers {
        let w = |s: &str| p(&format!("layer{layer}.{s}"));
        let q = linear(&h, &w("wq"), &w("bq"));
        let k = linear(&h, &w("wk"), &w("bk"));
        let v = linear(&h, &w("wv"), &w("bv"));
        let mut att = Tensor::zeros(l, d);
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| {
                        cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let pr = softmax(&s);
                for c in cols.clone() {
                    att.set(i, c, (0..l).map(|j| pr[j] * v.get(j, c)).sum());
                }
            }
        }
        let o = linear(&att, &w("wo"), &w("bo"));
        let h1 = ln(&h.add(&o).unwrap(), &w("ln1.gamma"), &w("ln1.beta"));
        let f = linear(&h1, &w("ffn.w1"), &w("ffn.b1")).gelu();
        let f = linear(&f, &w("ffn.w2"), &w("ffn.b2"));
        h = ln(&h1.add(&f).unwrap(), &w("ln2.gamma"), &w("ln2.beta"));
    }
    h
}

#[test]
fn flags_off_is_a_plain_encoder() {
    let m = model(config(8, 2, false, false), 5);
    let seq = sample_seq();
    let (h, trace) = m.forward(&seq).unwrap();
    let golden = reference_encoder(&m, &seq);
    for (a, b) in h.data().iter().zip(golden.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!(trace.layers.iter().all(|t| t.cosim.is_none()));

    let lesa_nowhere = ModelConfig {
        lesa_enabled: true,
        lesa_layers: vec![],
        ..m.config.clone()
    };
    let same = m.rebuild(lesa_nowhere, m.params.clone()).unwrap();
    assert_eq!(same.forward(&seq).unwrap().0, h);
}

#[test]
fn lesa_changes_the_output() {
    let off = model(config(8, 2, false, false), 5);
    let on = off
        .rebuild(config(8, 2, true, false), off.params.clone())
        .unwrap();
    let seq = sample_seq();
    assert_ne!(off.forward(&seq).unwrap().0, on.forward(&seq).unwrap().0);
}

fn full_objective(m: &Model, g: &mut Graph, p: &[Var], batch: &[&TokenSequence]) -> Result<Var> {
    let enc = m.encode(g, p, batch)?;
    let rows: Vec<usize> = vec![enc.row(0, 1), enc.row(0, 3), enc.row(1, 2), enc.row(1, 4)];
    let h = g.gather_rows(enc.hidden, rows)?;
    let lm = m.head_lm(g, p, h)?;
    let l1 = g.cross_entropy(lm, &[5, 7, 9, 6], None)?;
    let f2 = m.head_num(g, p, h)?;
    let f2 = g.log1p(f2)?;
    let l2 = g.sum(f2);
    let cls = m.head_classify(g, p, h)?;
    let l3 = g.cross_entropy(
        cls,
        &[0, 2, 6, 1],
        Some(&[1.0, 0.5, 2.0, 1.0, 1.0, 1.0, 3.0, 1.0]),
    )?;
    let s = g.add(l1, l2)?;
    g.add(s, l3)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let a = sample_seq();
    let b = encode("APGAR 8-9-9 CIA 4,5 mm FC 120", &vocab());
    for (lesa, xval) in [(false, false), (true, false), (false, true), (true, true)] {
        let m = model(config(16, 2, lesa, xval), 7);
        let mut a = a.clone();
        let mut b = b.clone();
        if xval {
            // Moderate values keep the central difference well conditioned.
            for s in [&mut a, &mut b] {
                for v in s.values.iter_mut().filter(|v| **v != 1.0) {
                    *v = 0.5 + (*v).ln().abs() / 4.0;
                }
            }
        }
        let params = m.params.tensors().to_vec();
        let report =
            grad_check(|g, p| full_objective(&m, g, p, &[&a, &b]), &params, 1e-5, 3).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "lesa={lesa} xval={xval}: {report:?}"
        );
        assert!(report.coords_checked >= 64);
    }
}

#[test]
fn batched_encoding_matches_one_at_a_time() {
    let m = model(config(8, 2, true, true), 9);
    let a = sample_seq();
    let b = encode("APGAR 8-9-9 CIA 4,5", &vocab());
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let enc = m.encode(&mut g, &p, &[&a, &b]).unwrap();
    let both = g.value(enc.hidden).clone();
    let (ha, _) = m.forward(&a).unwrap();
    let (hb, _) = m.forward(&b).unwrap();
    for i in 0..a.len() {
        assert_eq!(both.row(enc.row(0, i)), ha.row(i));
    }
    for i in 0..b.len() {
        assert_eq!(both.row(enc.row(1, i)), hb.row(i));
    }
}

#[test]
fn sequences_longer_than_max_len_are_rejected() {
    let m = model(config(8, 2, false, false), 1);
    let long = encode(&["FC"; 20].join(" "), &vocab());
    assert!(matches!(m.forward(&long), Err(Error::Data(_))));
}

#[test]
fn label_embeddings_average_keyword_rows() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb = random(v.len(), 8, &mut rng);
    let ids = label_token_ids(&v, &keywords()).unwrap();
    let xl = build_label_embeddings(&emb, &ids);
    assert_eq!(xl.shape(), &[8, 8]);
    assert_eq!(xl.row(2), emb.row(v.id("FC").unwrap() as usize));

    let mut doubled = keywords();
    doubled[2] = vec!["FC".into(), "FC".into()];
    let xl2 = build_label_embeddings(&emb, &label_token_ids(&v, &doubled).unwrap());
    assert_eq!(xl2.row(2), xl.row(2));

    let mut pair = keywords();
    pair[4] = vec!["sat".into(), "FR".into()];
    let xl3 = build_label_embeddings(&emb, &label_token_ids(&v, &pair).unwrap());
    for j in 0..8 {
        let want = (emb.get(v.id("sat").unwrap() as usize, j)
            + emb.get(v.id("FR").unwrap() as usize, j))
            / 2.0;
        assert!((xl3.get(4, j) - want).abs() < 1e-15);
    }
}

#[test]
fn label_embeddings_follow_the_embedding_table() {
    let m = model(config(8, 2, true, false), 4);
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let node = m.label_embeddings_node(&mut g, &p).unwrap();
    let direct = m.label_embeddings();
    for (a, b) in g.value(node).data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn out_of_vocabulary_keyword_names_class_and_keyword() {
    let mut kws = keywords();
    kws[6] = vec!["inconnu".into()];
    let err = label_token_ids(&vocab(), &kws).unwrap_err().to_string();
    assert!(
        err.contains("inconnu") && err.contains(&ClassLabel::G.to_string()),
        "{err}"
    );
}

#[test]
fn zero_hidden_and_weights_give_uniform_lm() {
    let mut m = model(config(8, 2, false, false), 1);
    for name in ["head.lm.w", "head.lm.b"] {
        m.params
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let h = g.constant(Tensor::zeros(3, 8));
    let logits = m.head_lm(&mut g, &p, h).unwrap();
    let probs = g.value(logits).row_softmax();
    let u = 1.0 / m.vocab.len() as f64;
    assert!(probs.data().iter().all(|&x| (x - u).abs() < 1e-15));
}

#[test]
fn number_head_is_positive_and_starts_at_one() {
    let cfg = config(8, 2, false, true);
    let fresh = Model::with_keywords(
        cfg.clone(),
        vocab(),
        init_params(&cfg, 3).unwrap(),
        &keywords(),
    )
    .unwrap();
    let mut g = Graph::new();
    let p = fresh.bind(&mut g, false);
    let zero = g.constant(Tensor::zeros(1, 8));
    let f = fresh.head_num(&mut g, &p, zero).unwrap();
    assert!((g.value(f).item() - 1.0).abs() < 1e-12);

    let m = model(config(8, 2, false, true), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let p = m.bind(&mut g, false);
    let h = g.constant(random(50, 8, &mut rng).map(|x| 40.0 * x));
    let f = m.head_num(&mut g, &p, h).unwrap();
    assert!(g.value(f).data().iter().all(|&x| x.is_finite() && x >= 0.0));
    let cls = m.head_classify(&mut g, &p, h).unwrap();
    assert_eq!(g.value(cls).shape(), &[50, 8]);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model(config(8, 2, true, true), 11);
    let mut ck = Checkpoint::new(m.clone());
    let mut extra = ParamSet::new();
    extra
        .push("loss.log_sigma1", Tensor::scalar(-0.25))
        .unwrap();
    ck.state.insert("extra".into(), extra.clone());
    ck.meta = serde_json::json!({"epoch": 3});
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model.params, m.params);
    assert_eq!(back.model.config, m.config);
    assert_eq!(back.model.vocab, m.vocab);
    assert_eq!(back.state["extra"], extra);
    assert_eq!(back.meta["epoch"], 3);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(
        &Checkpoint::new(model(config(8, 2, false, false), 1)),
        &path,
    )
    .unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let hash_at = text.find("\"vocab_hash\":\"").unwrap() + 14;
    let mut tampered = bytes.clone();
    tampered[hash_at] = if tampered[hash_at] == b'0' {
        b'1'
    } else {
        b'0'
    };
    std::fs::write(&path, &tampered).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}
