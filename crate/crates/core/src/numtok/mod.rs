//! Numeric-aware tokenization.
//!
//! Numbers never reach the vocabulary: every numeric component becomes the
//! reserved `[NUM]` token and its value travels alongside in a parallel
//! channel (1.0 at every other position).

mod detect;
mod vocab;

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

pub use detect::{
    detect_numbers, parse_component, substitute_placeholders, NumericLiteral, Substitution,
    NUM_SURFACE,
};
pub use vocab::{
    Vocab, CLS, CLS_ID, MASK, MASK_ID, NUM, NUM_ID, PAD, PAD_ID, RESERVED, UNK, UNK_ID,
};

use crate::error::{Error, Result};

/// One lexical unit of a note with its byte range in the source text.
#[derive(Clone, Debug, PartialEq)]
pub enum Piece<'a> {
    Word {
        text: &'a str,
        start: usize,
        end: usize,
    },
    /// A detected numeric component.
    Number {
        value: f64,
        start: usize,
        end: usize,
    },
    /// A literal `NUM` placeholder in already-substituted text.
    Placeholder { start: usize, end: usize },
    /// `[MASK]` or `<mask>`.
    Mask { start: usize, end: usize },
}

impl Piece<'_> {
    pub fn span(&self) -> (usize, usize) {
        match *self {
            Piece::Word { start, end, .. }
            | Piece::Number { start, end, .. }
            | Piece::Placeholder { start, end }
            | Piece::Mask { start, end } => (start, end),
        }
    }
}

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+(?:['’\-/][\p{L}\p{N}]+)*|\S").expect("word regex"))
}

fn special_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[MASK\]|<mask>|NUM").expect("special regex"))
}

/// Splits text into words, punctuation, numbers, placeholders and masks.
///
/// `NUM` counts as a placeholder when it starts a word and is not followed by
/// an uppercase letter, so `NUMg/L` is a placeholder plus a unit while
/// `NUMERO` stays a word.
pub fn tokenize(text: &str) -> Vec<Piece<'_>> {
    let mut anchors: Vec<Piece<'_>> = Vec::new();
    for lit in detect_numbers(text) {
        for (&(start, end), &value) in lit.parts.iter().zip(&lit.values) {
            anchors.push(Piece::Number { value, start, end });
        }
    }
    for m in special_re().find_iter(text) {
        let (start, end) = (m.start(), m.end());
        if m.as_str() == NUM_SURFACE {
            let prev_ok = !text[..start]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric() || c == '_');
            let next_ok = !text[end..]
                .chars()
                .next()
                .is_some_and(|c| c.is_uppercase() || c.is_numeric());
            if prev_ok && next_ok {
                anchors.push(Piece::Placeholder { start, end });
            }
        } else {
            anchors.push(Piece::Mask { start, end });
        }
    }
    anchors.sort_by_key(|p| p.span().0);

    let mut out = Vec::new();
    let mut cursor = 0;
    for a in anchors {
        let (s, e) = a.span();
        if s < cursor {
            continue;
        }
        push_words(text, cursor, s, &mut out);
        out.push(a);
        cursor = e;
    }
    push_words(text, cursor, text.len(), &mut out);
    out
}

fn push_words<'a>(text: &'a str, from: usize, to: usize, out: &mut Vec<Piece<'a>>) {
    for m in word_re().find_iter(&text[from..to]) {
        out.push(Piece::Word {
            text: m.as_str(),
            start: from + m.start(),
            end: from + m.end(),
        });
    }
}

/// Counts word tokens over `texts` and keeps the most frequent up to `cap`
/// (reserved tokens included in the cap).
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for t in texts {
        any = true;
        for p in tokenize(t) {
            if let Piece::Word { text, .. } = p {
                *counts.entry(text.to_string()).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::Vocab(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    Vocab::from_counts(&counts, cap)
}

/// An encoded note: `[CLS]` followed by one id per piece, plus the value
/// channel and (after masking) the MLM targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// 1.0 except at `[NUM]` positions, which carry the saved value.
    pub values: Vec<f64>,
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub y1: Vec<u32>,
    /// Original values at `mask_positions` (1.0 for non-numbers).
    pub y2: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token id for one piece (`None` for numbers and placeholders).
pub fn piece_id(piece: &Piece<'_>, vocab: &Vocab) -> (u32, f64) {
    match piece {
        Piece::Word { text, .. } => (vocab.id_or_unk(text), 1.0),
        Piece::Number { value, .. } => (NUM_ID, *value),
        Piece::Placeholder { .. } => (NUM_ID, 1.0),
        Piece::Mask { .. } => (MASK_ID, 1.0),
    }
}

/// Encodes raw or placeholder text. Numbers in raw text keep their value;
/// bare placeholders get 1.0.
pub fn encode(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut seq = TokenSequence {
        ids: vec![CLS_ID],
        values: vec![1.0],
        ..Default::default()
    };
    for p in tokenize(text) {
        let (id, v) = piece_id(&p, vocab);
        seq.ids.push(id);
        seq.values.push(v);
    }
    seq
}

/// Encodes placeholder text, assigning `values` to the `NUM` placeholders in
/// order.
pub fn encode_with_values(text: &str, values: &[f64], vocab: &Vocab) -> Result<TokenSequence> {
    let mut seq = encode(text, vocab);
    let slots: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] == NUM_ID).collect();
    if slots.len() != values.len() {
        return Err(Error::Data(format!(
            "{} placeholders but {} saved values",
            slots.len(),
            values.len()
        )));
    }
    for (i, v) in slots.into_iter().zip(values) {
        seq.values[i] = *v;
    }
    Ok(seq)
}

/// Renders ids back to text, one space between tokens. `[CLS]`/`[PAD]` are
/// dropped and `[NUM]` prints as the placeholder surface form.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or_else(|| {
            Error::Vocab(format!(
                "id {id} out of range for vocabulary of {}",
                vocab.len()
            ))
        })?;
        match id {
            CLS_ID | PAD_ID => {}
            NUM_ID => words.push(NUM_SURFACE),
            _ => words.push(tok),
        }
    }
    Ok(words.join(" "))
}

/// Masks each position other than `[CLS]`/`[PAD]` independently with
/// probability `rate`. Masked ids become `[MASK]` and their value resets to
/// 1.0 so a number's magnitude cannot leak through the value channel.
pub fn mask_with_rng<R: Rng>(seq: &TokenSequence, rate: f64, rng: &mut R) -> TokenSequence {
    let rate = rate.clamp(0.0, 1.0);
    let mut out = seq.clone();
    out.mask_positions.clear();
    out.y1.clear();
    out.y2.clear();
    for i in 0..seq.len() {
        let id = seq.ids[i];
        if id == CLS_ID || id == PAD_ID {
            continue;
        }
        if rng.gen::<f64>() < rate {
            out.mask_positions.push(i);
            out.y1.push(id);
            out.y2.push(seq.values[i]);
            out.ids[i] = MASK_ID;
            out.values[i] = 1.0;
        }
    }
    out
}

pub fn mask_for_mlm(seq: &TokenSequence, rate: f64, seed: u64) -> TokenSequence {
    mask_with_rng(seq, rate, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Masks exactly the given positions.
pub fn mask_positions(seq: &TokenSequence, positions: &[usize]) -> Result<TokenSequence> {
    let mut out = seq.clone();
    out.mask_positions.clear();
    out.y1.clear();
    out.y2.clear();
    for &i in positions {
        if i >= seq.len() {
            return Err(Error::Data(format!(
                "mask position {i} beyond sequence length {}",
                seq.len()
            )));
        }
        out.mask_positions.push(i);
        out.y1.push(seq.ids[i]);
        out.y2.push(seq.values[i]);
        out.ids[i] = MASK_ID;
        out.values[i] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(text: &str) -> Vocab {
        build_vocab([text], 4096).unwrap()
    }

    #[test]
    fn one_note_vocab() {
        let v = vocab_of("a b b");
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(6), Some("a"));
    }

    #[test]
    fn cap_below_reserved_is_rejected() {
        assert!(matches!(build_vocab(["a"], 4), Err(Error::Vocab(_))));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(build_vocab(std::iter::empty::<&str>(), 10).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(["z y x"], 6).unwrap();
        assert_eq!(v.token(5), Some("x"));
    }

    #[test]
    fn encode_placeholder_text() {
        let v = vocab_of("FC NUM");
        let seq = encode_with_values("FC NUM", &[120.0], &v).unwrap();
        assert_eq!(seq.ids, vec![CLS_ID, v.id("FC").unwrap(), NUM_ID]);
        assert_eq!(seq.values, vec![1.0, 1.0, 120.0]);
    }

    #[test]
    fn raw_numbers_keep_values() {
        let v = vocab_of("FC bpm");
        let seq = encode("FC 120 bpm", &v);
        assert_eq!(seq.ids[2], NUM_ID);
        assert_eq!(seq.values[2], 120.0);
    }

    #[test]
    fn decode_round_trip() {
        let v = vocab_of("gradient VG-VD");
        assert_eq!(
            decode(&encode("gradient VG-VD", &v).ids, &v).unwrap(),
            "gradient VG-VD"
        );
    }

    #[test]
    fn unknown_token_is_unk() {
        let v = vocab_of("FC");
        assert_eq!(encode("bradycardie", &v).ids[1], UNK_ID);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = vocab_of("FC");
        assert!(decode(&[99], &v).is_err());
    }

    #[test]
    fn placeholder_adjacent_to_unit_and_delimiters() {
        let pieces = tokenize("NUMg/L NUM-NUM NUMERO");
        let kinds: Vec<&str> = pieces
            .iter()
            .map(|p| match p {
                Piece::Word { text, .. } => *text,
                Piece::Placeholder { .. } => "<P>",
                _ => "?",
            })
            .collect();
        assert_eq!(kinds, vec!["<P>", "g/L", "<P>", "-", "<P>", "NUMERO"]);
    }

    #[test]
    fn mask_token_is_recognized() {
        let v = vocab_of("gradient VG-VD ad mmgh .");
        let seq = encode("gradient VG-VD ad [MASK] mmgh.", &v);
        assert_eq!(seq.ids.iter().filter(|&&i| i == MASK_ID).count(), 1);
    }

    #[test]
    fn tiny_rate_masks_nothing() {
        let v = vocab_of("a b c d");
        let seq = encode("a b c d a b c d", &v);
        assert!(mask_for_mlm(&seq, 1e-12, 3).mask_positions.is_empty());
    }

    #[test]
    fn masked_number_keeps_its_value_as_target() {
        let v = vocab_of("FC");
        let seq = encode("FC 120", &v);
        let m = mask_positions(&seq, &[2]).unwrap();
        assert_eq!(m.y1, vec![NUM_ID]);
        assert_eq!(m.y2, vec![120.0]);
        assert_eq!(m.values[2], 1.0);
        assert_eq!(m.ids[2], MASK_ID);
    }

    #[test]
    fn mask_never_touches_cls() {
        let v = vocab_of("a");
        let seq = encode("a a a", &v);
        let m = mask_for_mlm(&seq, 0.999_999, 1);
        assert!(!m.mask_positions.contains(&0));
        assert_eq!(m.mask_positions, vec![1, 2, 3]);
    }
}
