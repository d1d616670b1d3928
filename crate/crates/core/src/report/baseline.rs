//! Externally supplied per-model, per-category benchmark accuracy.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ReportError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineAccuracy {
    #[serde(rename = "model")]
    pub model_id: String,
    pub category: String,
    pub accuracy: f64,
}

/// Reads a `model,category,accuracy` CSV.
pub fn load_baseline(path: impl AsRef<Path>) -> Result<Vec<BaselineAccuracy>, ReportError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_baseline(file)
}

pub fn parse_baseline(reader: impl Read) -> Result<Vec<BaselineAccuracy>, ReportError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ReportError::Baseline {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["model", "category", "accuracy"] {
        return Err(ReportError::Baseline {
            line: 1,
            message: format!("expected header 'model,category,accuracy', found '{}'", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.deserialize::<BaselineAccuracy>() {
        let row = record.map_err(|e| ReportError::Baseline {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rows.len() + 2;
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(ReportError::Baseline {
                line,
                message: format!("accuracy {} is outside [0, 1]", row.accuracy),
            });
        }
        if !seen.insert((row.model_id.clone(), row.category.clone())) {
            return Err(ReportError::Baseline {
                line,
                message: format!("duplicate row for model '{}' in category '{}'", row.model_id, row.category),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
