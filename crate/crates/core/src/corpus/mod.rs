//! Synthetic annotated clinical notes.

mod bank;
mod generate;
mod io;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bank::{default_bank, Fragment, SlotForm, Template, TemplateBank};
pub use generate::generate_corpus;
pub use io::{load_corpus, save_corpus, CORPUS_FORMAT, CORPUS_VERSION};
pub use split::{class_weights, class_weights_from_counts, span_counts, split_corpus, Split};

use crate::error::{Error, Result};

/// Smallest and largest value any span may carry.
pub const VALUE_MIN: f64 = 1e-4;
pub const VALUE_MAX: f64 = 1e5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    O,
    Cp,
    FC,
    D,
    SO2,
    AGPR,
    G,
    #[serde(rename = "CIA_CIV", alias = "CIA/CIV")]
    CiaCiv,
}

impl ClassLabel {
    pub const COUNT: usize = 8;
    pub const ALL: [ClassLabel; 8] = [
        ClassLabel::O,
        ClassLabel::Cp,
        ClassLabel::FC,
        ClassLabel::D,
        ClassLabel::SO2,
        ClassLabel::AGPR,
        ClassLabel::G,
        ClassLabel::CiaCiv,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Display name as used in result tables.
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::O => "O",
            ClassLabel::Cp => "Cp",
            ClassLabel::FC => "FC",
            ClassLabel::D => "D",
            ClassLabel::SO2 => "SO2",
            ClassLabel::AGPR => "AGPR",
            ClassLabel::G => "G",
            ClassLabel::CiaCiv => "CIA/CIV",
        }
    }

    /// Descriptive keywords from the default template bank.
    pub fn keywords(self) -> &'static [String] {
        &default_bank().keywords[self.index()]
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let found = match s {
            "O" => ClassLabel::O,
            "Cp" => ClassLabel::Cp,
            "FC" => ClassLabel::FC,
            "D" => ClassLabel::D,
            "SO2" => ClassLabel::SO2,
            "AGPR" => ClassLabel::AGPR,
            "G" => ClassLabel::G,
            "CIA_CIV" | "CIA/CIV" => ClassLabel::CiaCiv,
            other => return Err(Error::Data(format!("unknown class label {other:?}"))),
        };
        Ok(found)
    }
}

/// A gold numeric literal in a note. Offsets are bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberSpan {
    pub start: usize,
    pub end: usize,
    pub values: Vec<f64>,
    pub unit: Option<String>,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedNote {
    pub id: String,
    pub text: String,
    pub spans: Vec<NumberSpan>,
}

impl AnnotatedNote {
    /// Checks offsets, ordering, value bounds and that each span's text
    /// parses back to its values.
    pub fn validate(&self) -> Result<()> {
        let mut prev_end = 0;
        for (i, s) in self.spans.iter().enumerate() {
            let bad = |reason: String| Error::Data(format!("note {}: span {i}: {reason}", self.id));
            if s.start >= s.end || s.end > self.text.len() {
                return Err(bad(format!("offsets {}..{} outside text", s.start, s.end)));
            }
            if s.start < prev_end {
                return Err(bad("overlaps or precedes the previous span".into()));
            }
            prev_end = s.end;
            if s.values.is_empty() {
                return Err(bad("no values".into()));
            }
            if let Some(v) = s
                .values
                .iter()
                .find(|v| !v.is_finite() || **v < VALUE_MIN || **v > VALUE_MAX)
            {
                return Err(bad(format!("value {v} outside [{VALUE_MIN}, {VALUE_MAX}]")));
            }
            let Some(sub) = self.text.get(s.start..s.end) else {
                return Err(bad("offsets split a character".into()));
            };
            let parsed: Vec<f64> = crate::numtok::detect_numbers(sub)
                .into_iter()
                .flat_map(|l| l.values)
                .collect();
            if parsed != s.values {
                return Err(bad(format!(
                    "text {sub:?} parses to {parsed:?}, not {:?}",
                    s.values
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_notes: usize,
    pub seed: u64,
    /// Probability of drawing a fragment of each class, indexed by
    /// [`ClassLabel::index`].
    pub class_mix: [f64; 8],
    /// Generation interval per class. Template slots are clamped into it.
    pub value_range: [[f64; 2]; 8],
    /// Probability that a note is written in terse fragment style.
    pub noise_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let bank = default_bank();
        CorpusSpec {
            n_notes: 2000,
            seed: 1,
            class_mix: [0.70, 0.04, 0.05, 0.06, 0.05, 0.03, 0.04, 0.03],
            value_range: bank.intervals.map(|c| [c.lo, c.hi]),
            noise_rate: 0.3,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_notes == 0 {
            return Err(Error::validation("n_notes", "must be positive"));
        }
        for (c, &p) in ClassLabel::ALL.iter().zip(&self.class_mix) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(
                    format!("class_mix.{}", c.name()),
                    format!("{p} is not a probability"),
                ));
            }
        }
        let total: f64 = self.class_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(
                "class_mix",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        for (c, &[lo, hi]) in ClassLabel::ALL.iter().zip(&self.value_range) {
            let field = format!("value_range.{}", c.name());
            if !(lo < hi) {
                return Err(Error::validation(
                    field,
                    format!("lo {lo} must be below hi {hi}"),
                ));
            }
            if lo < VALUE_MIN || hi > VALUE_MAX {
                return Err(Error::validation(
                    field,
                    format!("[{lo}, {hi}] leaves [{VALUE_MIN}, {VALUE_MAX}]"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::validation(
                "noise_rate",
                format!("{} is not a probability", self.noise_rate),
            ));
        }
        Ok(())
    }
}

/// Gold label of every numeric component in a note, in text order.
pub fn component_labels(note: &AnnotatedNote) -> Vec<ClassLabel> {
    note.spans
        .iter()
        .flat_map(|s| std::iter::repeat(s.label).take(s.values.len()))
        .collect()
}
