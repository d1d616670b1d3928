//! Category → concept catalog that parameterizes a run.
//!
//! The on-disk format is line oriented:
//!
//! ```text
//! // comment
//! # Computer Science | computer_science
//! - graph theory
//! - hash tables
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate concept '{concept}' in category '{category}'")]
    DuplicateConcept {
        line: usize,
        category: String,
        concept: String,
    },
    #[error("line {line}: duplicate category slug '{slug}'")]
    DuplicateSlug { line: usize, slug: String },
    #[error("line {line}: category '{slug}' has no concepts")]
    EmptyCategory { line: usize, slug: String },
}

impl CatalogError {
    /// Line the diagnostic points at, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            CatalogError::Io { .. } => None,
            CatalogError::Syntax { line, .. }
            | CatalogError::DuplicateConcept { line, .. }
            | CatalogError::DuplicateSlug { line, .. }
            | CatalogError::EmptyCategory { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub slug: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Concept {
    /// Slug of the owning category.
    pub category: String,
    pub name: String,
}

/// Validated, immutable catalog. Order follows the source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    categories: Vec<Category>,
    concepts: Vec<Concept>,
}

impl ConceptSet {
    /// Builds a catalog from in-memory parts, applying the same checks as the file loader.
    pub fn new(categories: Vec<Category>, concepts: Vec<Concept>) -> Result<Self, CatalogError> {
        let mut text = String::new();
        for category in &categories {
            let _ = writeln!(text, "# {} | {}", category.name, category.slug);
            for concept in concepts.iter().filter(|c| c.category == category.slug) {
                let _ = writeln!(text, "- {}", concept.name);
            }
        }
        let known: HashSet<&str> = categories.iter().map(|c| c.slug.as_str()).collect();
        if let Some(orphan) = concepts.iter().find(|c| !known.contains(c.category.as_str())) {
            return Err(CatalogError::Syntax {
                line: 0,
                message: format!(
                    "concept '{}' references unknown category '{}'",
                    orphan.name, orphan.category
                ),
            });
        }
        parse_catalog(&text)
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn category(&self, slug: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.slug == slug)
    }

    pub fn concepts_in<'a>(&'a self, slug: &'a str) -> impl Iterator<Item = &'a Concept> + 'a {
        self.concepts.iter().filter(move |c| c.category == slug)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Renders the catalog back into the file format. `parse_catalog` of the
    /// result reproduces `self`.
    pub fn to_catalog_string(&self) -> String {
        let mut out = String::new();
        for (i, category) in self.categories.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "# {} | {}", category.name, category.slug);
            for concept in self.concepts_in(&category.slug) {
                let _ = writeln!(out, "- {}", concept.name);
            }
        }
        out
    }
}

pub fn load_concepts(path: impl AsRef<Path>) -> Result<ConceptSet, CatalogError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_catalog(&text)
}

pub fn parse_catalog(text: &str) -> Result<ConceptSet, CatalogError> {
    let mut categories: Vec<Category> = Vec::new();
    let mut concepts: Vec<Concept> = Vec::new();
    // (header line, concept count) per category, parallel to `categories`
    let mut header_lines: Vec<(usize, usize)> = Vec::new();
    let mut seen_pairs: HashSet<(String, String)> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("//") {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let (name, slug) = header.rsplit_once('|').ok_or_else(|| CatalogError::Syntax {
                line: line_no,
                message: "category line must look like '# <name> | <slug>'".into(),
            })?;
            let name = name.trim();
            let slug = slug.trim();
            if name.is_empty() {
                return Err(CatalogError::Syntax {
                    line: line_no,
                    message: "category name is empty".into(),
                });
            }
            validate_slug(slug, line_no)?;
            if categories.iter().any(|c| c.slug == slug) {
                return Err(CatalogError::DuplicateSlug {
                    line: line_no,
                    slug: slug.to_string(),
                });
            }
            categories.push(Category {
                name: name.to_string(),
                slug: slug.to_string(),
            });
            header_lines.push((line_no, 0));
        } else if let Some(concept) = line.strip_prefix('-') {
            let name = concept.trim();
            let Some(category) = categories.last() else {
                return Err(CatalogError::Syntax {
                    line: line_no,
                    message: "concept listed before any category line".into(),
                });
            };
            if name.is_empty() {
                return Err(CatalogError::Syntax {
                    line: line_no,
                    message: "concept name is empty".into(),
                });
            }
            if !seen_pairs.insert((category.slug.clone(), name.to_string())) {
                return Err(CatalogError::DuplicateConcept {
                    line: line_no,
                    category: category.slug.clone(),
                    concept: name.to_string(),
                });
            }
            concepts.push(Concept {
                category: category.slug.clone(),
                name: name.to_string(),
            });
            if let Some(last) = header_lines.last_mut() {
                last.1 += 1;
            }
        } else {
            return Err(CatalogError::Syntax {
                line: line_no,
                message: format!("unrecognized line '{line}'"),
            });
        }
    }

    if categories.is_empty() {
        return Err(CatalogError::Syntax {
            line: text.lines().count(),
            message: "no categories defined".into(),
        });
    }
    for (category, (line, count)) in categories.iter().zip(&header_lines) {
        if *count == 0 {
            return Err(CatalogError::EmptyCategory {
                line: *line,
                slug: category.slug.clone(),
            });
        }
    }

    Ok(ConceptSet {
        categories,
        concepts,
    })
}

fn validate_slug(slug: &str, line: usize) -> Result<(), CatalogError> {
    if slug.is_empty() {
        return Err(CatalogError::Syntax {
            line,
            message: "category slug is empty".into(),
        });
    }
    if !slug
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    {
        return Err(CatalogError::Syntax {
            line,
            message: format!("slug '{slug}' may only contain lowercase letters, digits and '_'"),
        });
    }
    Ok(())
}
