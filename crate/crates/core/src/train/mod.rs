//! Two-stage training: masked-language-model prefinetuning on unannotated
//! notes, then token classification on annotated notes.

mod optim;
mod protocol;
mod trainer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use optim::{adamw_step, clip_grad_norm, cosine_schedule, AdamState, ADAM_EPS, BETA1, BETA2};
pub use protocol::{
    ablation_report, finetune, prefinetune, prepare_data, pretrain_base, run_ablation,
    run_protocol, run_seed, AblationReport, AblationRow, ProtocolConfig, ProtocolData,
    ProtocolReport, RunRecord, SeedResult,
};
pub use trainer::{EpochRecord, LogRecord, Task, TrainOutcome, TrainState, Trainer};

use crate::corpus::{AnnotatedNote, ClassLabel};
use crate::error::{Error, Result};
use crate::loss::LossMode;
use crate::model::ModelConfig;
use crate::numtok::{piece_id, tokenize, TokenSequence, Vocab, CLS_ID, NUM_ID};

/// Which numeric mechanisms a model uses.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Plain,
    Lesa,
    LesaXval,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Plain, Mode::Lesa, Mode::LesaXval];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Lesa => "lesa",
            Mode::LesaXval => "lesa_xval",
        }
    }

    pub fn uses_xval(self) -> bool {
        self == Mode::LesaXval
    }

    /// Sets the model flags for this mode.
    pub fn apply(self, cfg: &mut ModelConfig) {
        cfg.lesa_enabled = self != Mode::Plain;
        cfg.xval_enabled = self.uses_xval();
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Mode::Plain),
            "lesa" => Ok(Mode::Lesa),
            "lesa_xval" => Ok(Mode::LesaXval),
            other => Err(Error::validation("mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Warmup length in epochs; `None` means 10% of the planned steps.
    pub warmup_epochs: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub mode: Mode,
    pub loss_mode: LossMode,
    pub class_weighted: bool,
    pub weight_decay: f64,
    pub mask_rate: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            warmup_epochs: None,
            max_epochs: 40,
            patience: 4,
            batch_size: 16,
            seeds: (0..10).collect(),
            mode: Mode::Plain,
            loss_mode: LossMode::Fixed,
            class_weighted: false,
            weight_decay: 0.01,
            mask_rate: 0.15,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::validation(
                "lr",
                format!("{} must be positive", self.lr),
            ));
        }
        if self.patience == 0 {
            return Err(Error::validation("patience", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("seeds", "must not be empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs", "must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::validation(
                "mask_rate",
                format!("{} must lie in (0, 1)", self.mask_rate),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if let Some(w) = self.warmup_epochs {
            if !(w >= 0.0) {
                return Err(Error::validation("warmup_epochs", "must be non-negative"));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::validation("max_grad_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 of the JSON form of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    format!("{:x}", Sha256::digest(json))
}

/// An annotated note encoded for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub seq: TokenSequence,
    /// Positions of `[NUM]` tokens.
    pub num_positions: Vec<usize>,
    /// Gold class index of each `[NUM]` token.
    pub labels: Vec<usize>,
    /// Span index of each `[NUM]` token.
    pub span_of: Vec<usize>,
    pub span_labels: Vec<ClassLabel>,
}

/// Encodes a note and attaches each number's gold label.
pub fn encode_annotated(note: &AnnotatedNote, vocab: &Vocab) -> Result<LabeledExample> {
    let mut seq = TokenSequence {
        ids: vec![CLS_ID],
        values: vec![1.0],
        ..Default::default()
    };
    let mut num_positions = Vec::new();
    let mut labels = Vec::new();
    let mut span_of = Vec::new();
    for piece in tokenize(&note.text) {
        let (id, value) = piece_id(&piece, vocab);
        if id == NUM_ID {
            let (start, _) = piece.span();
            let si = note
                .spans
                .iter()
                .position(|s| s.start <= start && start < s.end)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "note {}: number at byte {start} has no gold span",
                        note.id
                    ))
                })?;
            num_positions.push(seq.ids.len());
            labels.push(note.spans[si].label.index());
            span_of.push(si);
        }
        seq.ids.push(id);
        seq.values.push(value);
    }
    Ok(LabeledExample {
        seq,
        num_positions,
        labels,
        span_of,
        span_labels: note.spans.iter().map(|s| s.label).collect(),
    })
}
