//! The four EQT prompt templates and their placeholder renderer.
//!
//! Templates ship embedded in the binary. Placeholders use `{name}` syntax;
//! the query template also carries a bracketed `[CONCEPT]` token that is
//! substituted with the concept name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 26;

const EXPLAIN: &str = include_str!("../templates/explain.txt");
const QUERY: &str = include_str!("../templates/query.txt");
const PARAPHRASE: &str = include_str!("../templates/paraphrase.txt");
const TEST: &str = include_str!("../templates/test.txt");

const CONCEPT_TOKEN: &str = "[CONCEPT]";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template '{template}' requires parameter {{{placeholder}}}")]
    MissingParameter {
        template: TemplateId,
        placeholder: &'static str,
    },
    #[error("num_options must be between {MIN_OPTIONS} and {MAX_OPTIONS}, got {0}")]
    OptionsOutOfRange(usize),
    #[error("template '{template}' uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: TemplateId, name: String },
    #[error("cannot read template override {path}: {message}")]
    Override { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    Explain,
    Query,
    Paraphrase,
    Test,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Explain,
        TemplateId::Query,
        TemplateId::Paraphrase,
        TemplateId::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Explain => "explain",
            TemplateId::Query => "query",
            TemplateId::Paraphrase => "paraphrase",
            TemplateId::Test => "test",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template id '{s}'"))
    }
}

/// Values substituted into a template. Empty strings count as absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptParams {
    pub concept: Option<String>,
    pub explanation: Option<String>,
    pub question_type: Option<String>,
    pub num_options: Option<usize>,
    pub question_text: Option<String>,
    /// Pre-rendered `A) ...` lines, one per option.
    pub options_block: Option<String>,
}

impl PromptParams {
    pub fn explain(concept: impl Into<String>) -> Self {
        Self {
            concept: Some(concept.into()),
            ..Self::default()
        }
    }

    pub fn query(
        concept: impl Into<String>,
        question_type: impl Into<String>,
        num_options: usize,
        explanation: impl Into<String>,
    ) -> Self {
        Self {
            concept: Some(concept.into()),
            question_type: Some(question_type.into()),
            num_options: Some(num_options),
            explanation: Some(explanation.into()),
            ..Self::default()
        }
    }

    pub fn paraphrase(question_text: impl Into<String>) -> Self {
        Self {
            question_text: Some(question_text.into()),
            ..Self::default()
        }
    }

    pub fn test(question_text: impl Into<String>, options_block: impl Into<String>) -> Self {
        Self {
            question_text: Some(question_text.into()),
            options_block: Some(options_block.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub text: String,
}

/// The `num_options`-th uppercase Latin letter.
pub fn last_choice(num_options: usize) -> Result<char, PromptError> {
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&num_options) {
        return Err(PromptError::OptionsOutOfRange(num_options));
    }
    Ok((b'A' + (num_options - 1) as u8) as char)
}

/// A full set of templates, either the embedded ones or user overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    explain: String,
    query: String,
    paraphrase: String,
    test: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self::embedded()
    }
}

impl Templates {
    pub fn embedded() -> Self {
        Self {
            explain: EXPLAIN.to_string(),
            query: QUERY.to_string(),
            paraphrase: PARAPHRASE.to_string(),
            test: TEST.to_string(),
        }
    }

    /// Loads `<template_id>.txt` files from `dir`. Templates without a file
    /// keep their embedded text.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut templates = Self::embedded();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{id}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Override {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            *templates.slot_mut(id) = text;
        }
        Ok(templates)
    }

    pub fn get(&self, id: TemplateId) -> &str {
        match id {
            TemplateId::Explain => &self.explain,
            TemplateId::Query => &self.query,
            TemplateId::Paraphrase => &self.paraphrase,
            TemplateId::Test => &self.test,
        }
    }

    fn slot_mut(&mut self, id: TemplateId) -> &mut String {
        match id {
            TemplateId::Explain => &mut self.explain,
            TemplateId::Query => &mut self.query,
            TemplateId::Paraphrase => &mut self.paraphrase,
            TemplateId::Test => &mut self.test,
        }
    }

    /// Hex SHA-256 of each template, in `TemplateId::ALL` order.
    pub fn hashes(&self) -> Vec<(TemplateId, String)> {
        TemplateId::ALL
            .into_iter()
            .map(|id| (id, hex::encode(Sha256::digest(self.get(id).as_bytes()))))
            .collect()
    }

    pub fn render(
        &self,
        id: TemplateId,
        params: &PromptParams,
    ) -> Result<RenderedPrompt, PromptError> {
        let text = substitute(id, self.get(id), params)?;
        Ok(RenderedPrompt {
            template_id: id,
            text,
        })
    }
}

/// Renders one of the embedded templates.
pub fn render(id: TemplateId, params: &PromptParams) -> Result<RenderedPrompt, PromptError> {
    Templates::embedded().render(id, params)
}

fn required<'a>(
    template: TemplateId,
    placeholder: &'static str,
    value: &'a Option<String>,
) -> Result<&'a str, PromptError> {
    match value.as_deref() {
        Some(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(PromptError::MissingParameter {
            template,
            placeholder,
        }),
    }
}

fn resolve(id: TemplateId, name: &str, params: &PromptParams) -> Result<String, PromptError> {
    let num_options = || {
        params.num_options.ok_or(PromptError::MissingParameter {
            template: id,
            placeholder: "num_options",
        })
    };
    let value = match name {
        "concept" => required(id, "concept", &params.concept)?.to_string(),
        "explanation" => required(id, "explanation", &params.explanation)?.to_string(),
        "question type" | "question_type" => {
            required(id, "question type", &params.question_type)?.to_string()
        }
        "num_options" => {
            let n = num_options()?;
            last_choice(n)?;
            n.to_string()
        }
        "last_choice" => last_choice(num_options()?)?.to_string(),
        "question_text" | "question" => {
            required(id, "question_text", &params.question_text)?.to_string()
        }
        "options" => required(id, "options", &params.options_block)?.to_string(),
        other => {
            return Err(PromptError::UnknownPlaceholder {
                template: id,
                name: other.to_string(),
            })
        }
    };
    Ok(value)
}

// Single left-to-right pass: substituted values are never rescanned, so
// braces inside a concept or explanation pass through untouched.
fn substitute(id: TemplateId, template: &str, params: &PromptParams) -> Result<String, PromptError> {
    // Validate range up front even when the template has no numeric placeholder.
    if let Some(n) = params.num_options {
        last_choice(n)?;
    }
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    loop {
        let brace = rest.find('{');
        let token = rest.find(CONCEPT_TOKEN);
        let brace_first = match (brace, token) {
            (None, None) => {
                out.push_str(rest);
                break;
            }
            (Some(b), Some(t)) => b < t,
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        if brace_first {
            let b = brace.unwrap_or_default();
            out.push_str(&rest[..b]);
            let after = &rest[b + 1..];
            let Some(close) = after.find('}') else {
                return Err(PromptError::UnknownPlaceholder {
                    template: id,
                    name: after.chars().take(20).collect(),
                });
            };
            out.push_str(&resolve(id, &after[..close], params)?);
            rest = &after[close + 1..];
        } else {
            let t = token.unwrap_or_default();
            out.push_str(&rest[..t]);
            out.push_str(required(id, "concept", &params.concept)?);
            rest = &rest[t + CONCEPT_TOKEN.len()..];
        }
    }
    Ok(out)
}
