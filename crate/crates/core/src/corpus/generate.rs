use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bank::{Segment, Slot, SlotForm, Template, TemplateBank};
use super::{default_bank, AnnotatedNote, ClassLabel, CorpusSpec, NumberSpan};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::numtok::{detect_numbers, parse_component};

const MIN_FRAGMENTS: usize = 2;
const MAX_FRAGMENTS: usize = 6;
const FILLER_RATE: f64 = 0.2;

/// Generates `spec.n_notes` annotated notes from the bundled template bank.
/// Note `i` depends only on `(spec, i)`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<AnnotatedNote>> {
    generate_with_bank(spec, default_bank())
}

pub fn generate_with_bank(spec: &CorpusSpec, bank: &TemplateBank) -> Result<Vec<AnnotatedNote>> {
    spec.validate()?;
    // A fragment is usable for class c only if every class it mentions can
    // appear at all; a zero-probability class never shows up in the corpus.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ClassLabel::COUNT];
    for (fi, f) in bank.fragments.iter().enumerate() {
        let allowed = f
            .full
            .iter()
            .chain(&f.terse)
            .flat_map(Template::slots)
            .all(|s| spec.class_mix[s.class.index()] > 0.0);
        if allowed {
            by_class[f.class.index()].push(fi);
        }
    }
    let mix = WeightedIndex::new(spec.class_mix)
        .map_err(|e| Error::validation("class_mix", e.to_string()))?;
    (0..spec.n_notes)
        .map(|i| generate_note(spec, bank, &by_class, &mix, i))
        .collect()
}

struct Style {
    terse: bool,
    decimal_comma: bool,
}

fn generate_note(
    spec: &CorpusSpec,
    bank: &TemplateBank,
    by_class: &[Vec<usize>],
    mix: &WeightedIndex<f64>,
    i: usize,
) -> Result<AnnotatedNote> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[i as u64]));
    let style = Style {
        terse: rng.gen_bool(spec.noise_rate),
        decimal_comma: rng.gen_bool(0.3),
    };
    let n = rng.gen_range(MIN_FRAGMENTS..=MAX_FRAGMENTS);
    let mut text = String::new();
    let mut planned: Vec<(usize, usize, Vec<f64>, ClassLabel)> = Vec::new();

    for k in 0..n {
        if k > 0 {
            let sep = if style.terse {
                *[" ", ", ", ". ", " "].choose(&mut rng).unwrap()
            } else {
                " "
            };
            text.push_str(sep);
        }
        let class = ClassLabel::ALL[mix.sample(&mut rng)];
        let candidates = &by_class[class.index()];
        if rng.gen_bool(FILLER_RATE) || candidates.is_empty() {
            let pool = if style.terse {
                &bank.filler_terse
            } else {
                &bank.filler
            };
            text.push_str(pool.choose(&mut rng).expect("filler pool is non-empty"));
            continue;
        }
        let frag = &bank.fragments[*candidates.choose(&mut rng).unwrap()];
        let variants = if style.terse { &frag.terse } else { &frag.full };
        let template = variants.choose(&mut rng).unwrap();
        render(template, spec, &style, &mut rng, &mut text, &mut planned);
    }

    // Every literal in the text must be exactly one planned span.
    let found = detect_numbers(&text);
    let sound = found.len() == planned.len()
        && found
            .iter()
            .zip(&planned)
            .all(|(lit, (s, e, v, _))| lit.start == *s && lit.end == *e && &lit.values == v);
    if !sound {
        return Err(Error::Data(format!(
            "generated note {i} does not round-trip through number detection: {text:?}"
        )));
    }
    let spans = found
        .into_iter()
        .zip(planned)
        .map(|(lit, (start, end, values, label))| NumberSpan {
            start,
            end,
            values,
            unit: lit.unit,
            label,
        })
        .collect();
    Ok(AnnotatedNote {
        id: format!("note-{i:05}"),
        text,
        spans,
    })
}

fn render(
    template: &Template,
    spec: &CorpusSpec,
    style: &Style,
    rng: &mut ChaCha8Rng,
    text: &mut String,
    planned: &mut Vec<(usize, usize, Vec<f64>, ClassLabel)>,
) {
    let casing = if style.terse { rng.gen_range(0..4) } else { 0 };
    for seg in &template.segments {
        match seg {
            Segment::Text(t) => match casing {
                1 => text.push_str(&t.to_lowercase()),
                2 if text.is_empty() || text.ends_with(' ') => {
                    let mut cs = t.chars();
                    if let Some(first) = cs.next() {
                        text.extend(first.to_uppercase());
                        text.push_str(cs.as_str());
                    }
                }
                _ => text.push_str(t),
            },
            Segment::Slot(slot) => {
                let start = text.len();
                let values = render_slot(slot, spec, style, rng, text);
                planned.push((start, text.len(), values, slot.class));
            }
        }
    }
}

/// Appends the literal for one slot and returns the values it parses to.
fn render_slot(
    slot: &Slot,
    spec: &CorpusSpec,
    style: &Style,
    rng: &mut ChaCha8Rng,
    text: &mut String,
) -> Vec<f64> {
    let [clo, chi] = spec.value_range[slot.class.index()];
    let (mut lo, mut hi) = (slot.lo.max(clo), slot.hi.min(chi));
    if lo >= hi {
        (lo, hi) = (clo, chi);
    }
    let mut draw = || format_value(rng.gen_range(lo..=hi), lo, hi, slot.dp);
    let parts: Vec<String> = match slot.form {
        SlotForm::Single => vec![draw()],
        SlotForm::Range => {
            let (a, b) = (draw(), draw());
            let (pa, pb) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            if pa <= pb {
                vec![a, b]
            } else {
                vec![b, a]
            }
        }
        SlotForm::Triple => vec![draw(), draw(), draw()],
        SlotForm::Plus => {
            let a = draw();
            vec![a, rng.gen_range(1..=6).to_string()]
        }
    };
    let delim = if slot.form == SlotForm::Plus {
        "+"
    } else {
        "-"
    };
    let mut values = Vec::with_capacity(parts.len());
    for (k, p) in parts.iter().enumerate() {
        if k > 0 {
            text.push_str(delim);
        }
        let shown = if style.decimal_comma {
            p.replace('.', ",")
        } else {
            p.clone()
        };
        values.push(parse_component(&shown).expect("formatted number parses"));
        text.push_str(&shown);
    }
    values
}

/// Rounds to `dp` decimals and pulls the result back inside `[lo, hi]`.
fn format_value(x: f64, lo: f64, hi: f64, dp: usize) -> String {
    let scale = 10f64.powi(dp as i32);
    let mut v = (x * scale).round() / scale;
    if v < lo {
        v = (lo * scale).ceil() / scale;
    }
    if v > hi {
        v = (hi * scale).floor() / scale;
    }
    if v < lo || v > hi {
        // The interval is narrower than the requested resolution.
        return format!("{:.4}", x.clamp(lo, hi));
    }
    format!("{v:.dp$}")
}
