//! Number detection and placeholder substitution for noisy clinical text.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Surface form that replaces every numeric literal.
pub const NUM_SURFACE: &str = "NUM";

/// A numeric literal found in text. Ranges (`100-110`), compounds
/// (`8-8-8`) and week+day forms (`37+6`) yield one component per number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericLiteral {
    /// Byte offset of the first digit.
    pub start: usize,
    /// Byte offset one past the last digit (units excluded).
    pub end: usize,
    pub values: Vec<f64>,
    /// Byte range of each component, aligned with `values`.
    pub parts: Vec<(usize, usize)>,
    /// Unit glued to the literal, e.g. `g/L` in `123.7g/L`.
    pub unit: Option<String>,
}

fn literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\d+(?:[.,]\d+)?(?:[-+]\d+(?:[.,]\d+)?)*").expect("literal regex")
    })
}

fn component_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)?").expect("component regex"))
}

fn unit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:%|°[CF]?|/?[\p{L}µ]+(?:/[\p{L}µ]+)*)").expect("unit regex"))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Parses one component, accepting a decimal comma.
pub fn parse_component(s: &str) -> Option<f64> {
    s.replace(',', ".").parse::<f64>().ok()
}

/// Finds numeric literals left to right. Digits embedded in alphanumeric
/// tokens (`G1P2`, `SpO2`) are not numbers.
pub fn detect_numbers(text: &str) -> Vec<NumericLiteral> {
    let mut out = Vec::new();
    for m in literal_re().find_iter(text) {
        if text[..m.start()]
            .chars()
            .next_back()
            .is_some_and(is_word_char)
        {
            continue;
        }
        let mut values = Vec::new();
        let mut parts = Vec::new();
        for c in component_re().find_iter(m.as_str()) {
            let Some(v) = parse_component(c.as_str()) else {
                continue;
            };
            values.push(v);
            parts.push((m.start() + c.start(), m.start() + c.end()));
        }
        let unit = unit_re()
            .find(&text[m.end()..])
            .map(|u| u.as_str().to_string());
        out.push(NumericLiteral {
            start: m.start(),
            end: m.end(),
            values,
            parts,
            unit,
        });
    }
    out
}

/// Text with every numeric component replaced by [`NUM_SURFACE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Substitution {
    pub text: String,
    /// Saved values in left-to-right order.
    pub values: Vec<f64>,
    /// Byte range of each value in the original text.
    pub origins: Vec<(usize, usize)>,
    /// Byte offset of each placeholder in `text`.
    pub placeholders: Vec<usize>,
}

impl Substitution {
    /// Maps placeholder `i` back to its byte range in the original text.
    pub fn origin_of(&self, i: usize) -> Option<(usize, usize)> {
        self.origins.get(i).copied()
    }
}

pub fn substitute_placeholders(text: &str) -> Substitution {
    let mut out = String::with_capacity(text.len());
    let mut values = Vec::new();
    let mut origins = Vec::new();
    let mut placeholders = Vec::new();
    let mut cursor = 0;
    for lit in detect_numbers(text) {
        for (&(s, e), &v) in lit.parts.iter().zip(&lit.values) {
            out.push_str(&text[cursor..s]);
            placeholders.push(out.len());
            out.push_str(NUM_SURFACE);
            values.push(v);
            origins.push((s, e));
            cursor = e;
        }
    }
    out.push_str(&text[cursor..]);
    Substitution {
        text: out,
        values,
        origins,
        placeholders,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grams_per_litre() {
        let found = detect_numbers("123.7g/L");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].values, vec![123.7]);
        assert_eq!(found[0].unit.as_deref(), Some("g/L"));
    }

    #[test]
    fn saturation_range_with_percent() {
        let found = detect_numbers("sat 50-65% à la naissance");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].values, vec![50.0, 65.0]);
        assert_eq!(found[0].unit.as_deref(), Some("%"));
    }

    #[test]
    fn empty_text() {
        assert!(detect_numbers("").is_empty());
    }

    #[test]
    fn apgar_triple() {
        let found = detect_numbers("APGAR 8-8-8");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].values, vec![8.0, 8.0, 8.0]);
        assert_eq!(found[0].unit, None);
    }

    #[test]
    fn weeks_plus_days_and_decimal_comma() {
        let found = detect_numbers("né à 37+6, Hb 12,5 g/L");
        assert_eq!(found[0].values, vec![37.0, 6.0]);
        assert_eq!(found[1].values, vec![12.5]);
    }

    #[test]
    fn embedded_digits_are_not_numbers() {
        assert!(detect_numbers("G1P2 SpO2 O2").is_empty());
    }

    #[test]
    fn dates_split_on_slash() {
        let found = detect_numbers("le 28/04");
        let v: Vec<_> = found.iter().map(|l| l.values.clone()).collect();
        assert_eq!(v, vec![vec![28.0], vec![4.0]]);
    }

    #[test]
    fn substitution_heart_rate() {
        let s = substitute_placeholders("FC 120 bpm");
        assert_eq!(s.text, "FC NUM bpm");
        assert_eq!(s.values, vec![120.0]);
        assert_eq!(s.origin_of(0), Some((3, 6)));
    }

    #[test]
    fn substitution_fragment_excerpt() {
        let s = substitute_placeholders("FR 21 FC 100-110 FR 50");
        assert_eq!(s.text, "FR NUM FC NUM-NUM FR NUM");
        assert_eq!(s.values, vec![21.0, 100.0, 110.0, 50.0]);
    }

    #[test]
    fn no_numbers_unchanged() {
        let s = substitute_placeholders("no numbers here");
        assert_eq!(s.text, "no numbers here");
        assert!(s.values.is_empty());
    }

    #[test]
    fn detection_is_idempotent_on_substituted_text() {
        let s = substitute_placeholders("APGAR 8-8-8. sat 50-65% FC 123.7g/L");
        assert!(detect_numbers(&s.text).is_empty());
    }
}
