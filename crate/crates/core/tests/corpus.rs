use std::io::Write;

use numlesa::corpus::*;
use numlesa::numtok::detect_numbers;
use numlesa::Error;

fn default_corpus() -> Vec<AnnotatedNote> {
    generate_corpus(&CorpusSpec::default()).unwrap()
}

#[test]
fn generation_is_deterministic() {
    let spec = CorpusSpec {
        n_notes: 200,
        seed: 1,
        ..CorpusSpec::default()
    };
    let a = generate_corpus(&spec).unwrap();
    let b = generate_corpus(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&a, &dir.path().join("a")).unwrap();
    save_corpus(&b, &dir.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a")).unwrap(),
        std::fs::read(dir.path().join("b")).unwrap()
    );
}

#[test]
fn zero_probability_class_never_appears() {
    let mut spec = CorpusSpec {
        n_notes: 500,
        ..CorpusSpec::default()
    };
    spec.class_mix[ClassLabel::G.index()] = 0.0;
    spec.class_mix[ClassLabel::O.index()] += 0.04;
    let corpus = generate_corpus(&spec).unwrap();
    assert_eq!(span_counts(&corpus)[ClassLabel::G.index()], 0);
}

#[test]
fn default_corpus_is_out_of_class_dominated() {
    let corpus = default_corpus();
    let counts = span_counts(&corpus);
    let total: usize = counts.iter().sum();
    let o_frac = counts[0] as f64 / total as f64;
    assert!((0.6..=0.95).contains(&o_frac), "O fraction {o_frac}");
    for c in ClassLabel::ALL {
        assert!(
            counts[c.index()] as f64 / total as f64 >= 0.01,
            "{c} below 1%: {counts:?}"
        );
    }
}

#[test]
fn every_span_round_trips_through_detection() {
    for note in default_corpus() {
        note.validate().unwrap();
        let found = detect_numbers(&note.text);
        assert_eq!(found.len(), note.spans.len(), "{}", note.text);
        for (lit, span) in found.iter().zip(&note.spans) {
            assert_eq!((lit.start, lit.end), (span.start, span.end));
            assert_eq!(lit.values, span.values);
        }
    }
}

#[test]
fn fragment_style_notes_appear_at_noise_rate() {
    // Terse notes come only from verbless variants, none of which contain
    // these verb forms.
    let verbs = [
        " est ",
        "Reçoit",
        "présenté",
        "mesuré",
        "Admis",
        "Hospitalisé",
        "Vu ",
    ];
    let corpus = default_corpus();
    let terse = corpus
        .iter()
        .filter(|n| !verbs.iter().any(|v| n.text.contains(v)) && !n.text.contains(" à "))
        .count();
    let frac = terse as f64 / corpus.len() as f64;
    assert!(frac >= 0.25, "{frac}");
}

#[test]
fn invalid_spec_names_the_field() {
    let spec = CorpusSpec {
        noise_rate: 1.5,
        ..CorpusSpec::default()
    };
    match generate_corpus(&spec) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "noise_rate"),
        other => panic!("{other:?}"),
    }
    let mut spec = CorpusSpec::default();
    spec.class_mix[0] = 0.5;
    assert!(
        matches!(generate_corpus(&spec), Err(Error::Validation { field, .. }) if field == "class_mix")
    );
    let mut spec = CorpusSpec::default();
    spec.value_range[ClassLabel::FC.index()] = [200.0, 100.0];
    assert!(
        matches!(generate_corpus(&spec), Err(Error::Validation { field, .. }) if field == "value_range.FC")
    );
}

#[test]
fn labels_and_keywords() {
    assert_eq!(ClassLabel::ALL.len(), 8);
    for c in ClassLabel::ALL {
        assert_eq!(ClassLabel::from_index(c.index()), Some(c));
        assert_eq!(c.name().parse::<ClassLabel>().unwrap(), c);
        if c != ClassLabel::O {
            assert!(c.keywords().len() >= 2);
        }
    }
}

#[test]
fn split_sizes_follow_ratios() {
    let corpus = generate_corpus(&CorpusSpec {
        n_notes: 100,
        seed: 3,
        ..CorpusSpec::default()
    })
    .unwrap();
    let s = split_corpus(&corpus, [0.7, 0.15, 0.15], 7).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    assert_eq!(s, split_corpus(&corpus, [0.7, 0.15, 0.15], 7).unwrap());
}

#[test]
fn split_is_a_stratified_partition() {
    let corpus = default_corpus();
    let s = split_corpus(&corpus, [0.7, 0.15, 0.15], 7).unwrap();
    let mut ids: Vec<&str> = s
        .train
        .iter()
        .chain(&s.val)
        .chain(&s.test)
        .map(|n| n.id.as_str())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), corpus.len());

    let total = span_counts(&corpus);
    for (part, ratio) in [(&s.train, 0.7), (&s.val, 0.15), (&s.test, 0.15)] {
        let counts = span_counts(part);
        for c in ClassLabel::ALL {
            assert!(counts[c.index()] > 0, "{c} missing from a split");
            let frac = counts[c.index()] as f64 / total[c.index()] as f64;
            assert!((frac - ratio).abs() <= 0.03, "{c}: {frac} vs {ratio}");
        }
    }
}

#[test]
fn split_needs_three_spans_per_class() {
    let mut spec = CorpusSpec {
        n_notes: 100,
        ..CorpusSpec::default()
    };
    spec.class_mix[ClassLabel::G.index()] = 0.0;
    spec.class_mix[0] += 0.04;
    let corpus = generate_corpus(&spec).unwrap();
    assert!(matches!(
        split_corpus(&corpus, [0.7, 0.15, 0.15], 1),
        Err(Error::Stratification(_))
    ));
}

#[test]
fn out_of_class_gets_the_smallest_weight() {
    let corpus = default_corpus();
    let s = split_corpus(&corpus, [0.7, 0.15, 0.15], 7).unwrap();
    let w = class_weights(&s.train).unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!((mean - 1.0).abs() < 1e-12);
    assert!(w.iter().skip(1).all(|&x| x > w[0]));
}

#[test]
fn corpus_file_round_trip() {
    let corpus = generate_corpus(&CorpusSpec {
        n_notes: 100,
        ..CorpusSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_corpus(&corpus, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), corpus);
}

#[test]
fn truncated_line_is_reported() {
    let corpus = generate_corpus(&CorpusSpec {
        n_notes: 3,
        ..CorpusSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_corpus(&corpus, &path).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.truncate(text.len() - 10);
    std::fs::write(&path, text).unwrap();
    match load_corpus(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_file_is_an_empty_corpus() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.flush().unwrap();
    assert!(load_corpus(f.path()).unwrap().is_empty());
}
