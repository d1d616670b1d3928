//! Scoring, full-loop accuracy, answer consistency, stability, correlation and ranking.

mod rank;
mod stats;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::CanonicalAnswer;

pub use rank::{rank_descending, rank_match, rank_models, RankMatchMatrix, RankTable};
pub use stats::{
    ln_gamma, pearson, regularized_incomplete_beta, student_t_two_sided, CorrelationResult,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{0} is undefined for empty input")]
    Empty(&'static str),
    #[error("series lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("a series has zero variance")]
    ZeroVariance,
    #[error("rank tables do not line up: {0}")]
    MismatchedRankTables(String),
}

/// A model's answer to one question instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Prediction {
    Answer { answer: CanonicalAnswer },
    /// The reply had no usable `Answer:` selection.
    ParseFailure,
    /// The backend never produced a reply.
    BackendFailure,
}

impl Prediction {
    pub fn answer(&self) -> Option<&CanonicalAnswer> {
        match self {
            Prediction::Answer { answer } => Some(answer),
            _ => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.answer().is_none()
    }
}

/// Exact-set match; failures never score.
pub fn score_question(predicted: &Prediction, correct: &CanonicalAnswer) -> bool {
    predicted.answer() == Some(correct)
}

pub fn acc_loop(scored: &[bool]) -> Result<f64, MetricsError> {
    if scored.is_empty() {
        return Err(MetricsError::Empty("Acc_loop"));
    }
    let correct = scored.iter().filter(|s| **s).count();
    Ok(correct as f64 / scored.len() as f64)
}

/// Answer Consistency Score, 1 − (|U(A)| − 1)/|A|. Each failure counts as its
/// own distinct answer.
pub fn acs(answers: &[Prediction]) -> Result<f64, MetricsError> {
    if answers.is_empty() {
        return Err(MetricsError::Empty("ACS"));
    }
    let mut distinct: HashSet<&CanonicalAnswer> = HashSet::new();
    let mut failures = 0usize;
    for a in answers {
        match a.answer() {
            Some(answer) => {
                distinct.insert(answer);
            }
            None => failures += 1,
        }
    }
    let unique = distinct.len() + failures;
    Ok(1.0 - (unique as f64 - 1.0) / answers.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty("mean"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// One original question plus its paraphrases as answered by one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupOutcome {
    pub group_id: String,
    /// Index 0 answers the original question.
    pub answers: Vec<Prediction>,
    pub correct: CanonicalAnswer,
}

impl GroupOutcome {
    pub fn acs(&self) -> Result<f64, MetricsError> {
        acs(&self.answers)
    }

    pub fn scores(&self) -> impl Iterator<Item = bool> + '_ {
        self.answers.iter().map(|a| score_question(a, &self.correct))
    }
}

/// Mean per-group ACS.
pub fn category_stability(groups: &[GroupOutcome]) -> Result<f64, MetricsError> {
    if groups.is_empty() {
        return Err(MetricsError::Empty("category stability"));
    }
    let per_group = groups
        .iter()
        .map(GroupOutcome::acs)
        .collect::<Result<Vec<_>, _>>()?;
    mean(&per_group)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub model_id: String,
    pub accuracy: f64,
    pub mean_acs: f64,
    /// Scored question instances (originals and paraphrases).
    pub question_count: usize,
    pub correct_count: usize,
    /// Instances whose answer was a parse or backend failure.
    pub failure_count: usize,
}

impl CategoryMetrics {
    pub fn from_groups(
        category: impl Into<String>,
        model_id: impl Into<String>,
        groups: &[GroupOutcome],
    ) -> Result<Self, MetricsError> {
        let scored: Vec<bool> = groups.iter().flat_map(GroupOutcome::scores).collect();
        let accuracy = acc_loop(&scored)?;
        Ok(Self {
            category: category.into(),
            model_id: model_id.into(),
            accuracy,
            mean_acs: category_stability(groups)?,
            question_count: scored.len(),
            correct_count: scored.iter().filter(|s| **s).count(),
            failure_count: groups
                .iter()
                .flat_map(|g| &g.answers)
                .filter(|a| a.is_failure())
                .count(),
        })
    }
}
