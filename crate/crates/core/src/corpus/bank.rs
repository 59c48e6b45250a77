use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::{ClassLabel, VALUE_MAX, VALUE_MIN};
use crate::error::{Error, Result};

const DEFAULT_BANK: &str = include_str!("../../data/templates.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotForm {
    Single,
    Range,
    Triple,
    /// `a+b` with `b` in `1..=6` (weeks plus days).
    Plus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub class: ClassLabel,
    pub form: SlotForm,
    pub lo: f64,
    pub hi: f64,
    pub dp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(String),
    Slot(Slot),
}

/// One parsed template string.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub segments: Vec<Segment>,
}

impl Template {
    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(slot) => Some(slot),
            Segment::Text(_) => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub class: ClassLabel,
    pub full: Vec<Template>,
    pub terse: Vec<Template>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub dp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    pub units: Vec<String>,
    pub intervals: [Interval; 8],
    pub keywords: [Vec<String>; 8],
    pub filler: Vec<String>,
    pub filler_terse: Vec<String>,
    pub fragments: Vec<Fragment>,
}

#[derive(Deserialize)]
struct RawBank {
    version: u32,
    units: Vec<String>,
    classes: BTreeMap<String, RawInterval>,
    keywords: BTreeMap<String, Vec<String>>,
    filler: Vec<String>,
    filler_terse: Vec<String>,
    fragment: Vec<RawFragment>,
}

#[derive(Deserialize)]
struct RawInterval {
    lo: f64,
    hi: f64,
    dp: usize,
}

#[derive(Deserialize)]
struct RawFragment {
    class: String,
    full: Vec<String>,
    terse: Vec<String>,
}

/// The bank shipped in `data/templates.toml`.
pub fn default_bank() -> &'static TemplateBank {
    static BANK: OnceLock<TemplateBank> = OnceLock::new();
    BANK.get_or_init(|| TemplateBank::parse(DEFAULT_BANK).expect("bundled template bank is valid"))
}

impl TemplateBank {
    pub fn parse(src: &str) -> Result<Self> {
        let raw: RawBank =
            toml::from_str(src).map_err(|e| Error::validation("templates", e.to_string()))?;
        if raw.version != 1 {
            return Err(Error::validation(
                "templates.version",
                format!("unsupported version {}", raw.version),
            ));
        }
        let mut intervals = [Interval {
            lo: 0.0,
            hi: 0.0,
            dp: 0,
        }; 8];
        let mut seen = [false; 8];
        for (name, iv) in &raw.classes {
            let c: ClassLabel = name.parse()?;
            if !(iv.lo < iv.hi) || iv.lo < VALUE_MIN || iv.hi > VALUE_MAX {
                return Err(Error::validation(
                    format!("classes.{name}"),
                    format!("bad interval [{}, {}]", iv.lo, iv.hi),
                ));
            }
            intervals[c.index()] = Interval {
                lo: iv.lo,
                hi: iv.hi,
                dp: iv.dp,
            };
            seen[c.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::validation(
                "classes",
                format!("missing class {}", ClassLabel::ALL[i]),
            ));
        }

        let mut keywords: [Vec<String>; 8] = Default::default();
        for (name, kws) in raw.keywords {
            keywords[name.parse::<ClassLabel>()?.index()] = kws;
        }
        for c in ClassLabel::ALL {
            if c != ClassLabel::O && keywords[c.index()].len() < 2 {
                return Err(Error::validation(
                    format!("keywords.{c}"),
                    "needs at least two keywords",
                ));
            }
        }

        let mut fragments = Vec::new();
        for f in raw.fragment {
            let class: ClassLabel = f.class.parse()?;
            let parse_all = |list: &[String]| -> Result<Vec<Template>> {
                list.iter().map(|t| parse_template(t, &intervals)).collect()
            };
            let full = parse_all(&f.full)?;
            let terse = parse_all(&f.terse)?;
            if full.is_empty() || terse.is_empty() {
                return Err(Error::validation(
                    format!("fragment.{class}"),
                    "needs full and terse variants",
                ));
            }
            fragments.push(Fragment { class, full, terse });
        }
        Ok(TemplateBank {
            units: raw.units,
            intervals,
            keywords,
            filler: raw.filler,
            filler_terse: raw.filler_terse,
            fragments,
        })
    }
}

/// Parses `{CLASS[:form][@lo..hi][~dp]}` slots out of a template string.
fn parse_template(src: &str, intervals: &[Interval; 8]) -> Result<Template> {
    let err = |reason: String| Error::validation("templates", format!("{src:?}: {reason}"));
    let mut segments = Vec::new();
    let mut rest = src;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            segments.push(Segment::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| err("unclosed slot".into()))?
            + open;
        let body = &rest[open + 1..close];
        rest = &rest[close + 1..];

        let (body, dp) = match body.split_once('~') {
            Some((b, d)) => (b, Some(d.parse::<usize>().map_err(|e| err(e.to_string()))?)),
            None => (body, None),
        };
        let (body, bounds) = match body.split_once('@') {
            Some((b, r)) => {
                let (lo, hi) = r
                    .split_once("..")
                    .ok_or_else(|| err(format!("bad interval {r:?}")))?;
                let lo: f64 = lo.parse().map_err(|_| err(format!("bad bound {lo:?}")))?;
                let hi: f64 = hi.parse().map_err(|_| err(format!("bad bound {hi:?}")))?;
                (b, Some((lo, hi)))
            }
            None => (body, None),
        };
        let (name, form) = match body.split_once(':') {
            Some((n, f)) => (n, f),
            None => (body, "single"),
        };
        let class: ClassLabel = name.parse()?;
        let form = match form {
            "single" => SlotForm::Single,
            "range" => SlotForm::Range,
            "triple" => SlotForm::Triple,
            "plus" => SlotForm::Plus,
            other => return Err(err(format!("unknown form {other:?}"))),
        };
        let iv = intervals[class.index()];
        let (lo, hi) = bounds.unwrap_or((iv.lo, iv.hi));
        if lo >= hi || lo < iv.lo || hi > iv.hi {
            return Err(err(format!(
                "interval [{lo}, {hi}] not inside class {class} [{}, {}]",
                iv.lo, iv.hi
            )));
        }
        segments.push(Segment::Slot(Slot {
            class,
            form,
            lo,
            hi,
            dp: dp.unwrap_or(iv.dp),
        }));
    }
    if !rest.is_empty() {
        segments.push(Segment::Text(rest.to_string()));
    }
    Ok(Template { segments })
}
