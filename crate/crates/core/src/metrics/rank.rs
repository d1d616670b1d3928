//! Descending ranks with averaged ties, and cross-method rank agreement.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::MetricsError;

const RANK_EPS: f64 = 1e-9;

/// Rank 1 is the largest value; tied values share the mean of the ranks they span.
pub fn rank_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

pub fn rank_models(accuracy_by_model: &IndexMap<String, f64>) -> IndexMap<String, f64> {
    let values: Vec<f64> = accuracy_by_model.values().copied().collect();
    accuracy_by_model
        .keys()
        .cloned()
        .zip(rank_descending(&values))
        .collect()
}

/// Per-category model ranks, in category order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub categories: IndexMap<String, IndexMap<String, f64>>,
}

impl RankTable {
    /// Ranks every category of a category → (model → score) table.
    pub fn from_scores(scores: &IndexMap<String, IndexMap<String, f64>>) -> Self {
        Self {
            categories: scores
                .iter()
                .map(|(category, by_model)| (category.clone(), rank_models(by_model)))
                .collect(),
        }
    }
}

/// `cells[m][c]` is true when model `m` has the same rank in category `c` under both tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankMatchMatrix {
    pub models: Vec<String>,
    pub categories: Vec<String>,
    pub cells: Vec<Vec<bool>>,
}

impl RankMatchMatrix {
    pub fn get(&self, model: &str, category: &str) -> Option<bool> {
        let m = self.models.iter().position(|x| x == model)?;
        let c = self.categories.iter().position(|x| x == category)?;
        Some(self.cells[m][c])
    }

    pub fn matches_for(&self, model: &str) -> usize {
        self.models
            .iter()
            .position(|x| x == model)
            .map_or(0, |m| self.cells[m].iter().filter(|c| **c).count())
    }
}

pub fn rank_match(a: &RankTable, b: &RankTable) -> Result<RankMatchMatrix, MetricsError> {
    let same_categories = a.categories.len() == b.categories.len()
        && a.categories.keys().all(|k| b.categories.contains_key(k));
    if !same_categories {
        return Err(MetricsError::MismatchedRankTables(
            "category sets differ".into(),
        ));
    }
    let models: Vec<String> = a
        .categories
        .values()
        .next()
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    for (category, ranks) in a.categories.iter().chain(b.categories.iter()) {
        let same = ranks.len() == models.len() && models.iter().all(|m| ranks.contains_key(m));
        if !same {
            return Err(MetricsError::MismatchedRankTables(format!(
                "model set differs in category '{category}'"
            )));
        }
    }
    let categories: Vec<String> = a.categories.keys().cloned().collect();
    let cells = models
        .iter()
        .map(|model| {
            categories
                .iter()
                .map(|c| (a.categories[c][model] - b.categories[c][model]).abs() <= RANK_EPS)
                .collect()
        })
        .collect();
    Ok(RankMatchMatrix {
        models,
        categories,
        cells,
    })
}
