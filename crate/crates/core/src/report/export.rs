//! CSV, JSON and Markdown renderings of a [`ReportBundle`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ReportBundle, ReportError, StabilityTable};

pub const STABILITY_CSV: &str = "stability.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const CORRELATION_CSV: &str = "correlation.csv";
pub const RANK_MATCH_CSV: &str = "rank_match.csv";
pub const REPORT_JSON: &str = "report.json";
pub const MARKDOWN_FILE: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExportFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for ExportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

/// Parses a comma-separated list such as `csv,json`.
pub fn parse_formats(list: &str) -> Result<Vec<ExportFormat>, ReportError> {
    let mut out = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        let f: ExportFormat = item.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    Ok(out)
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), ReportError> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_error(path)(e.into()))?;
    let csv_err = |e: csv::Error| io_error(path)(e.into());
    wtr.write_record(header).map_err(csv_err)?;
    for row in rows {
        wtr.serialize(row).map_err(csv_err)?;
    }
    wtr.flush().map_err(io_error(path))
}

#[derive(Serialize)]
struct StabilityRow<'a> {
    category: &'a str,
    model: &'a str,
    mean_acs: f64,
    question_count: usize,
}

#[derive(Serialize)]
struct CorrelationRow {
    r: f64,
    p_value: f64,
    n: usize,
}

/// Writes the requested formats into `dir` and returns the files written.
pub fn export(bundle: &ReportBundle, formats: &[ExportFormat], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            ExportFormat::Csv => written.extend(export_csv(bundle, dir)?),
            ExportFormat::Json => {
                let path = dir.join(REPORT_JSON);
                let mut text = serde_json::to_string_pretty(bundle).expect("bundle serializes");
                text.push('\n');
                fs::write(&path, text).map_err(io_error(&path))?;
                written.push(path);
            }
            ExportFormat::Markdown => {
                let path = dir.join(MARKDOWN_FILE);
                fs::write(&path, render_markdown(bundle)).map_err(io_error(&path))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

fn export_csv(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let table = &bundle.stability;
    let mut rows = Vec::new();
    for (ci, category) in table.categories.iter().enumerate() {
        for (mi, model) in table.models.iter().enumerate() {
            if let Some(v) = table.values[ci][mi] {
                rows.push(StabilityRow {
                    category,
                    model,
                    mean_acs: v,
                    question_count: table.question_counts[ci][mi],
                });
            }
        }
    }
    let path = dir.join(STABILITY_CSV);
    write_csv(&path, &rows, &["category", "model", "mean_acs", "question_count"])?;
    let mut written = vec![path];

    if let Some(cmp) = &bundle.comparison {
        let path = dir.join(COMPARISON_CSV);
        write_csv(&path, &cmp.rows, &["category", "model", "baseline_acc", "eqt_acc", "drop"])?;
        written.push(path);

        if let Some(c) = &cmp.correlation {
            let path = dir.join(CORRELATION_CSV);
            let row = CorrelationRow {
                r: c.r,
                p_value: c.p_value,
                n: c.n,
            };
            write_csv(&path, &[row], &["r", "p_value", "n"])?;
            written.push(path);
        }

        let path = dir.join(RANK_MATCH_CSV);
        write_csv(&path, &cmp.rank_rows, &["category", "model", "rank_baseline", "rank_eqt", "match"])?;
        written.push(path);
    }
    Ok(written)
}

fn fmt2(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

/// Formats a row of values, bolding every cell equal to the row maximum as displayed.
fn bold_max_row(values: &[Option<f64>]) -> Vec<String> {
    let shown: Vec<String> = values.iter().map(|v| fmt2(*v)).collect();
    let max = values
        .iter()
        .flatten()
        .copied()
        .max_by(f64::total_cmp)
        .map(|v| format!("{v:.2}"));
    shown
        .into_iter()
        .zip(values)
        .map(|(s, v)| match (&max, v) {
            (Some(m), Some(_)) if *m == s => format!("**{s}**"),
            _ => s,
        })
        .collect()
}

fn table_row(cells: impl IntoIterator<Item = String>) -> String {
    format!("| {} |\n", cells.into_iter().collect::<Vec<_>>().join(" | "))
}

fn rank(v: f64) -> String {
    format!("{v}")
}

/// Categories as rows, models as columns, the row maximum in bold and the
/// average row last.
pub fn render_stability_table(t: &StabilityTable) -> String {
    let mut out = String::new();
    out.push_str(&table_row(
        std::iter::once("Category".to_string()).chain(t.models.iter().cloned()),
    ));
    out.push_str(&table_row(
        std::iter::once("---".to_string()).chain(t.models.iter().map(|_| "---:".to_string())),
    ));
    for (ci, name) in t.category_names.iter().enumerate() {
        out.push_str(&table_row(
            std::iter::once(name.clone()).chain(bold_max_row(&t.values[ci])),
        ));
    }
    out.push_str(&table_row(
        std::iter::once("Average".to_string()).chain(bold_max_row(&t.average)),
    ));
    out
}

pub fn render_markdown(bundle: &ReportBundle) -> String {
    let mut out = String::from("## Stability (mean ACS per category)\n\n");
    out.push_str(&render_stability_table(&bundle.stability));
    let s = &bundle.summary;
    out.push_str("\n## Run\n\n");
    let _ = writeln!(out, "- config: `{}`, seed {}", s.config_hash, s.run_seed);
    let _ = writeln!(
        out,
        "- {} questions per concept, {} paraphrases each, {} options",
        s.questions_per_concept, s.paraphrases_per_question, s.num_options
    );
    let _ = writeln!(
        out,
        "- {} explanations ({} failed), {} question groups ({} slots failed, {} paraphrase fallbacks)",
        s.explanations, s.explanation_failures, s.question_groups, s.question_slot_failures, s.paraphrase_fallbacks
    );
    let _ = writeln!(
        out,
        "- {} answers ({} unparseable, {} backend failures)",
        s.answer_records, s.answer_parse_failures, s.answer_backend_failures
    );
    for note in &s.notes {
        let _ = writeln!(out, "- {note}");
    }

    let Some(cmp) = &bundle.comparison else {
        return out;
    };
    out.push_str("\n## Accuracy: baseline vs EQT\n\n");
    out.push_str("| Category | Model | Baseline | EQT | Drop |\n|---|---|---:|---:|---:|\n");
    for r in &cmp.rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.2} | {:+.2} |",
            r.category, r.model, r.baseline_acc, r.eqt_acc, r.drop
        );
    }
    out.push_str("\n## Correlation\n\n");
    match (&cmp.correlation, &cmp.correlation_note) {
        (Some(c), _) => {
            let _ = writeln!(out, "Pearson r = {:.3}, p = {:.3e}, n = {}", c.r, c.p_value, c.n);
        }
        (None, Some(note)) => {
            let _ = writeln!(out, "{note}");
        }
        (None, None) => {}
    }
    if let Some(matrix) = &cmp.rank_match {
        out.push_str("\n## Rank match (baseline rank / EQT rank)\n\n");
        out.push_str(&table_row(
            std::iter::once("Category".to_string()).chain(matrix.models.iter().cloned()),
        ));
        out.push_str(&table_row(
            std::iter::once("---".to_string()).chain(matrix.models.iter().map(|_| "---".to_string())),
        ));
        for c in &matrix.categories {
            let cells = matrix.models.iter().map(|m| {
                let (b, e) = (cmp.rank_baseline.categories[c][m], cmp.rank_eqt.categories[c][m]);
                if matrix.get(m, c) == Some(true) {
                    format!("**{} / {}**", rank(b), rank(e))
                } else {
                    format!("{} / {}", rank(b), rank(e))
                }
            });
            out.push_str(&table_row(std::iter::once(c.clone()).chain(cells)));
        }
        out.push_str("\nBold cells mark matching ranks.\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_lists() {
        assert_eq!(
            parse_formats("csv, json,md,csv").unwrap(),
            vec![ExportFormat::Csv, ExportFormat::Json, ExportFormat::Markdown]
        );
        assert!(parse_formats("csv,xml").is_err());
    }

    #[test]
    fn bolding_uses_displayed_values() {
        assert_eq!(
            bold_max_row(&[Some(0.851), Some(0.849), None, Some(0.7)]),
            vec!["**0.85**", "**0.85**", "n/a", "0.70"]
        );
        assert_eq!(bold_max_row(&[None]), vec!["n/a"]);
    }
}
