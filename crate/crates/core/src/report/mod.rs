//! Tables and comparisons assembled from a run store, plus exports.

mod baseline;
mod export;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    mean, pearson, rank_match, CategoryMetrics, CorrelationResult, GroupOutcome, MetricsError,
    Prediction, RankMatchMatrix, RankTable,
};
use crate::pipeline::{RunStore, RunSummary, StoreError};

pub use baseline::{load_baseline, parse_baseline, BaselineAccuracy};
pub use export::{
    export, parse_formats, render_markdown, render_stability_table, ExportFormat, COMPARISON_CSV, CORRELATION_CSV,
    MARKDOWN_FILE, RANK_MATCH_CSV, REPORT_JSON, STABILITY_CSV,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("store has no answered questions to report on")]
    EmptyStore,
    #[error("baseline line {line}: {message}")]
    Baseline { line: usize, message: String },
    #[error("baseline refers to unknown model '{0}'")]
    UnknownModel(String),
    #[error("baseline refers to unknown category '{0}'")]
    UnknownCategory(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown export format '{0}' (expected csv, json or markdown)")]
    UnknownFormat(String),
}

/// Mean ACS per category (rows) and model (columns), with an average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub categories: Vec<String>,
    pub category_names: Vec<String>,
    pub models: Vec<String>,
    /// `values[category][model]`; `None` where nothing was answered.
    pub values: Vec<Vec<Option<f64>>>,
    pub question_counts: Vec<Vec<usize>>,
    /// Per model, the mean of its category rows.
    pub average: Vec<Option<f64>>,
}

impl StabilityTable {
    pub fn new(
        categories: Vec<String>,
        category_names: Vec<String>,
        models: Vec<String>,
        values: Vec<Vec<Option<f64>>>,
        question_counts: Vec<Vec<usize>>,
    ) -> Self {
        let average = (0..models.len())
            .map(|m| {
                let column: Vec<f64> = values.iter().filter_map(|row| row[m]).collect();
                mean(&column).ok()
            })
            .collect();
        Self {
            categories,
            category_names,
            models,
            values,
            question_counts,
            average,
        }
    }

    pub fn get(&self, category: &str, model: &str) -> Option<f64> {
        let c = self.categories.iter().position(|x| x == category)?;
        let m = self.models.iter().position(|x| x == model)?;
        self.values[c][m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub category: String,
    pub model: String,
    pub baseline_acc: f64,
    pub eqt_acc: f64,
    /// `eqt_acc - baseline_acc`.
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMatchRow {
    pub category: String,
    pub model: String,
    pub rank_baseline: f64,
    pub rank_eqt: f64,
    #[serde(rename = "match")]
    pub matched: bool,
}

/// Everything that depends on a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub rows: Vec<ComparisonRow>,
    pub correlation: Option<CorrelationResult>,
    /// Why the correlation is absent, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_note: Option<String>,
    pub rank_baseline: RankTable,
    pub rank_eqt: RankTable,
    pub rank_match: Option<RankMatchMatrix>,
    pub rank_rows: Vec<RankMatchRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config_hash: String,
    pub run_seed: u64,
    pub questions_per_concept: usize,
    pub paraphrases_per_question: usize,
    pub num_options: usize,
    pub models: Vec<String>,
    pub categories: Vec<String>,
    pub explanations: usize,
    pub explanation_failures: usize,
    pub question_groups: usize,
    pub question_slot_failures: usize,
    pub paraphrase_fallbacks: usize,
    pub answer_records: usize,
    pub answer_parse_failures: usize,
    pub answer_backend_failures: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub summary: ReportSummary,
    pub metrics: Vec<CategoryMetrics>,
    pub stability: StabilityTable,
    pub comparison: Option<BaselineComparison>,
}

/// Per (model, category) metrics over self-generated questions, in config
/// model order and catalog category order. Cells with no answers are skipped.
pub fn category_metrics(store: &RunStore) -> Result<Vec<CategoryMetrics>, ReportError> {
    let mut by_group: HashMap<&str, BTreeMap<usize, &Prediction>> = HashMap::new();
    for a in store.answers() {
        let Some(group) = store.group(&a.group_id) else { continue };
        if group.model_id == a.model_id {
            by_group
                .entry(a.group_id.as_str())
                .or_default()
                .insert(a.variant_index, &a.predicted);
        }
    }
    let config = store.config();
    let mut out = Vec::new();
    for model in &config.models {
        for category in config.concept_set.categories() {
            let groups: Vec<GroupOutcome> = store
                .groups()
                .iter()
                .filter(|g| g.model_id == model.id && g.category == category.slug)
                .filter_map(|g| {
                    let answers = by_group.get(g.group_id.as_str())?;
                    Some(GroupOutcome {
                        group_id: g.group_id.clone(),
                        answers: answers.values().map(|p| (*p).clone()).collect(),
                        correct: g.correct(),
                    })
                })
                .collect();
            if groups.is_empty() {
                continue;
            }
            out.push(CategoryMetrics::from_groups(&category.slug, &model.id, &groups)?);
        }
    }
    Ok(out)
}

pub fn build_report(
    store: &RunStore,
    baseline: Option<&[BaselineAccuracy]>,
) -> Result<ReportBundle, ReportError> {
    let metrics = category_metrics(store)?;
    if metrics.is_empty() {
        return Err(ReportError::EmptyStore);
    }
    let config = store.config();
    let counts = RunSummary::from_store(store);
    let summary = ReportSummary {
        config_hash: store.meta().config_hash.clone(),
        run_seed: config.run_seed,
        questions_per_concept: config.questions_per_concept,
        paraphrases_per_question: config.paraphrases_per_question,
        num_options: config.num_options,
        models: config.models.iter().map(|m| m.id.clone()).collect(),
        categories: config.concept_set.categories().iter().map(|c| c.slug.clone()).collect(),
        explanations: counts.explanations,
        explanation_failures: counts.explanation_failures,
        question_groups: counts.question_groups,
        question_slot_failures: counts.question_slot_failures,
        paraphrase_fallbacks: counts.paraphrase_fallbacks,
        answer_records: counts.answer_records,
        answer_parse_failures: counts.answer_parse_failures,
        answer_backend_failures: counts.answer_backend_failures,
        notes: store.meta().notes.clone(),
    };
    let names: IndexMap<String, String> = config
        .concept_set
        .categories()
        .iter()
        .map(|c| (c.slug.clone(), c.name.clone()))
        .collect();
    assemble(summary, names, metrics, baseline)
}

/// Builds a bundle from precomputed metrics. `category_names` maps slugs to
/// display names in row order; `summary.models` fixes the column order.
pub fn assemble(
    summary: ReportSummary,
    category_names: IndexMap<String, String>,
    metrics: Vec<CategoryMetrics>,
    baseline: Option<&[BaselineAccuracy]>,
) -> Result<ReportBundle, ReportError> {
    let models = summary.models.clone();
    let categories: Vec<String> = category_names.keys().cloned().collect();
    let cell: HashMap<(&str, &str), &CategoryMetrics> = metrics
        .iter()
        .map(|m| ((m.category.as_str(), m.model_id.as_str()), m))
        .collect();
    let values = categories
        .iter()
        .map(|c| models.iter().map(|m| cell.get(&(c.as_str(), m.as_str())).map(|x| x.mean_acs)).collect())
        .collect();
    let counts = categories
        .iter()
        .map(|c| {
            models
                .iter()
                .map(|m| cell.get(&(c.as_str(), m.as_str())).map_or(0, |x| x.question_count))
                .collect()
        })
        .collect();
    let stability = StabilityTable::new(
        categories.clone(),
        category_names.values().cloned().collect(),
        models.clone(),
        values,
        counts,
    );

    let comparison = match baseline {
        None => None,
        Some(rows) => Some(compare(&categories, &models, &cell, rows)?),
    };
    Ok(ReportBundle {
        summary,
        metrics,
        stability,
        comparison,
    })
}

fn compare(
    categories: &[String],
    models: &[String],
    cell: &HashMap<(&str, &str), &CategoryMetrics>,
    baseline: &[BaselineAccuracy],
) -> Result<BaselineComparison, ReportError> {
    let mut base: HashMap<(&str, &str), f64> = HashMap::new();
    for b in baseline {
        if !models.contains(&b.model_id) {
            return Err(ReportError::UnknownModel(b.model_id.clone()));
        }
        if !categories.contains(&b.category) {
            return Err(ReportError::UnknownCategory(b.category.clone()));
        }
        base.insert((b.category.as_str(), b.model_id.as_str()), b.accuracy);
    }

    let mut rows = Vec::new();
    for c in categories {
        for m in models {
            let key = (c.as_str(), m.as_str());
            if let (Some(&b), Some(e)) = (base.get(&key), cell.get(&key)) {
                rows.push(ComparisonRow {
                    category: c.clone(),
                    model: m.clone(),
                    baseline_acc: b,
                    eqt_acc: e.accuracy,
                    drop: e.accuracy - b,
                });
            }
        }
    }

    let xs: Vec<f64> = rows.iter().map(|r| r.baseline_acc).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.eqt_acc).collect();
    let (correlation, correlation_note) = match pearson(&xs, &ys) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(format!("correlation not computed: {e}"))),
    };

    // Ranking only covers categories where every model has both values.
    let mut base_scores = IndexMap::new();
    let mut eqt_scores = IndexMap::new();
    for c in categories {
        let pairs: Option<Vec<(String, f64, f64)>> = models
            .iter()
            .map(|m| {
                let key = (c.as_str(), m.as_str());
                Some((m.clone(), *base.get(&key)?, cell.get(&key)?.accuracy))
            })
            .collect();
        if let Some(pairs) = pairs {
            base_scores.insert(c.clone(), pairs.iter().map(|(m, b, _)| (m.clone(), *b)).collect());
            eqt_scores.insert(c.clone(), pairs.iter().map(|(m, _, e)| (m.clone(), *e)).collect());
        }
    }
    let rank_baseline = RankTable::from_scores(&base_scores);
    let rank_eqt = RankTable::from_scores(&eqt_scores);
    let matrix = if base_scores.is_empty() {
        None
    } else {
        Some(rank_match(&rank_baseline, &rank_eqt)?)
    };
    let mut rank_rows = Vec::new();
    if let Some(matrix) = &matrix {
        for (ci, c) in matrix.categories.iter().enumerate() {
            for (mi, m) in matrix.models.iter().enumerate() {
                rank_rows.push(RankMatchRow {
                    category: c.clone(),
                    model: m.clone(),
                    rank_baseline: rank_baseline.categories[c][m],
                    rank_eqt: rank_eqt.categories[c][m],
                    matched: matrix.cells[mi][ci],
                });
            }
        }
    }
    Ok(BaselineComparison {
        rows,
        correlation,
        correlation_note,
        rank_baseline,
        rank_eqt,
        rank_match: matrix,
        rank_rows,
    })
}
