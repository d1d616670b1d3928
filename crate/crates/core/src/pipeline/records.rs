//! Record types persisted by the run store, one JSON object per line.

use serde::{Deserialize, Serialize};

use crate::metrics::Prediction;
use crate::parser::{CanonicalAnswer, ParsedQuestion};

pub const SCHEMA_VERSION: u32 = 1;

/// Fields stamped onto every stored record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub run_seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub provenance: Provenance,
    #[serde(flatten)]
    pub record: T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub model_id: String,
    pub category: String,
    pub concept: String,
    pub text: String,
    pub attempts: u32,
}

/// An original question and its paraphrased stems. Every variant shares the
/// original's options and correct set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub group_id: String,
    /// The model that generated the question.
    pub model_id: String,
    pub category: String,
    pub concept: String,
    pub question_index: usize,
    pub question_type: String,
    pub original: ParsedQuestion,
    pub paraphrased_stems: Vec<String>,
    /// Paraphrase slots (1-based variant indices) that fell back to the original stem.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_variants: Vec<usize>,
    pub raw_text: String,
}

impl QuestionGroup {
    pub fn variant_count(&self) -> usize {
        self.paraphrased_stems.len() + 1
    }

    /// Variant 0 is the original stem.
    pub fn stem(&self, variant_index: usize) -> Option<&str> {
        match variant_index {
            0 => Some(&self.original.stem),
            i => self.paraphrased_stems.get(i - 1).map(String::as_str),
        }
    }

    pub fn correct(&self) -> CanonicalAnswer {
        self.original.correct_answer()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub group_id: String,
    pub variant_index: usize,
    /// The model that answered.
    pub model_id: String,
    pub predicted: Prediction,
    pub raw_text: String,
    pub correct: CanonicalAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureEvent {
    /// No usable explanation; the concept is skipped for this model.
    ExplanationFailed,
    /// No parseable question after regeneration; the slot is excluded.
    QuestionSlotFailed,
    /// A paraphrase slot reuses the original stem.
    ParaphraseFallback,
    AnswerParseFailure,
    AnswerBackendFailure,
}

impl FailureEvent {
    /// Events that leave a hole in the store rather than a degraded record.
    pub fn is_final(self) -> bool {
        matches!(
            self,
            FailureEvent::ExplanationFailed
                | FailureEvent::QuestionSlotFailed
                | FailureEvent::AnswerBackendFailure
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub event: FailureEvent,
    /// Group id, `group_id#variant`, or concept name, depending on the event.
    pub subject: String,
    pub model_id: String,
    pub category: String,
    pub concept: String,
    pub attempts: u32,
    pub detail: String,
}
