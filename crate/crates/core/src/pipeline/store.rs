//! Append-only run store: `run.meta` plus one JSONL file per record kind.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::RunConfig;
use super::records::{
    AnswerRecord, ExplanationRecord, FailureEvent, FailureRecord, Provenance, QuestionGroup,
    Stamped, SCHEMA_VERSION,
};
use crate::prompt::Templates;

pub const META_FILE: &str = "run.meta";
pub const EXPLANATIONS_FILE: &str = "explanations.log";
pub const QUESTIONS_FILE: &str = "questions.log";
pub const ANSWERS_FILE: &str = "answers.log";
pub const FAILURES_FILE: &str = "failures.log";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: not a run store (missing {META_FILE})")]
    NotAStore(PathBuf),
    #[error("store was written with config {stored}, current config is {current}; use a fresh output directory")]
    ConfigMismatch { stored: String, current: String },
    #[error("{path}:{line}: record belongs to config {found}, expected {expected}")]
    ForeignRecord {
        path: PathBuf,
        line: usize,
        found: String,
        expected: String,
    },
    #[error("unsupported schema version {0} (this build reads {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("store is open read-only")]
    ReadOnly,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub run_seed: u64,
    pub created_at: String,
    pub updated_at: String,
    pub tool_version: String,
    pub template_hashes: IndexMap<String, String>,
    pub config: RunConfig,
    pub notes: Vec<String>,
}

fn run_notes() -> Vec<String> {
    [
        "answers are scored by exact set match, with no partial credit",
        "parse and backend failures score as incorrect",
        "in answer consistency each failure counts as its own distinct answer",
        "reports use self-generated questions only",
        "each prompt is sent as a single user message with no system message",
    ]
    .map(String::from)
    .to_vec()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    meta: RunMeta,
    writable: bool,
    explanations: Vec<ExplanationRecord>,
    groups: Vec<QuestionGroup>,
    answers: Vec<AnswerRecord>,
    failures: Vec<FailureRecord>,
    explanation_index: HashMap<(String, String, String), usize>,
    group_index: HashMap<String, usize>,
    answer_keys: HashSet<(String, usize, String)>,
    final_failures: HashSet<(FailureEvent, String, String)>,
}

impl RunStore {
    /// Creates a store in `config.output_dir`, or resumes the one already there.
    pub fn create_or_resume(config: &RunConfig, templates: &Templates) -> Result<Self, StoreError> {
        let dir = config.output_dir.clone();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let config_hash = config.config_hash(templates);
        let meta_path = dir.join(META_FILE);
        let created_at = if meta_path.exists() {
            let stored = read_meta(&meta_path)?;
            if stored.config_hash != config_hash {
                return Err(StoreError::ConfigMismatch {
                    stored: stored.config_hash,
                    current: config_hash,
                });
            }
            stored.created_at
        } else {
            now()
        };
        let meta = RunMeta {
            schema_version: SCHEMA_VERSION,
            config_hash,
            run_seed: config.run_seed,
            updated_at: created_at.clone(),
            created_at,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            template_hashes: templates
                .hashes()
                .into_iter()
                .map(|(id, h)| (id.as_str().to_string(), h))
                .collect(),
            config: config.clone(),
            notes: run_notes(),
        };
        let mut store = Self::load(dir, meta, true)?;
        store.touch()?;
        Ok(store)
    }

    /// Opens an existing store for reading.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(StoreError::NotAStore(dir));
        }
        let meta = read_meta(&meta_path)?;
        Self::load(dir, meta, false)
    }

    fn load(dir: PathBuf, meta: RunMeta, writable: bool) -> Result<Self, StoreError> {
        let expected = &meta.config_hash;
        let explanations: Vec<ExplanationRecord> =
            read_log(&dir.join(EXPLANATIONS_FILE), expected, writable)?;
        let groups: Vec<QuestionGroup> = read_log(&dir.join(QUESTIONS_FILE), expected, writable)?;
        let answers: Vec<AnswerRecord> = read_log(&dir.join(ANSWERS_FILE), expected, writable)?;
        let failures: Vec<FailureRecord> = read_log(&dir.join(FAILURES_FILE), expected, writable)?;
        let mut store = Self {
            dir,
            meta,
            writable,
            explanations: Vec::new(),
            groups: Vec::new(),
            answers: Vec::new(),
            failures: Vec::new(),
            explanation_index: HashMap::new(),
            group_index: HashMap::new(),
            answer_keys: HashSet::new(),
            final_failures: HashSet::new(),
        };
        explanations.into_iter().for_each(|r| store.index_explanation(r));
        groups.into_iter().for_each(|r| store.index_group(r));
        answers.into_iter().for_each(|r| store.index_answer(r));
        failures.into_iter().for_each(|r| store.index_failure(r));
        Ok(store)
    }

    fn touch(&mut self) -> Result<(), StoreError> {
        self.meta.updated_at = now();
        let path = self.dir.join(META_FILE);
        let tmp = self.dir.join(format!("{META_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &RunMeta {
        &self.meta
    }

    pub fn config(&self) -> &RunConfig {
        &self.meta.config
    }

    pub fn explanations(&self) -> &[ExplanationRecord] {
        &self.explanations
    }

    pub fn groups(&self) -> &[QuestionGroup] {
        &self.groups
    }

    pub fn answers(&self) -> &[AnswerRecord] {
        &self.answers
    }

    pub fn failures(&self) -> &[FailureRecord] {
        &self.failures
    }

    pub fn explanation(&self, model_id: &str, category: &str, concept: &str) -> Option<&ExplanationRecord> {
        self.explanation_index
            .get(&(model_id.to_string(), category.to_string(), concept.to_string()))
            .map(|&i| &self.explanations[i])
    }

    pub fn group(&self, group_id: &str) -> Option<&QuestionGroup> {
        self.group_index.get(group_id).map(|&i| &self.groups[i])
    }

    pub fn has_answer(&self, group_id: &str, variant_index: usize, model_id: &str) -> bool {
        self.answer_keys
            .contains(&(group_id.to_string(), variant_index, model_id.to_string()))
    }

    /// True when a final failure was recorded for `subject` under `model_id`.
    pub fn has_failed(&self, event: FailureEvent, model_id: &str, subject: &str) -> bool {
        self.final_failures
            .contains(&(event, model_id.to_string(), subject.to_string()))
    }

    pub fn append_explanations(&mut self, records: Vec<ExplanationRecord>) -> Result<(), StoreError> {
        self.append(EXPLANATIONS_FILE, &records)?;
        records.into_iter().for_each(|r| self.index_explanation(r));
        Ok(())
    }

    pub fn append_groups(&mut self, records: Vec<QuestionGroup>) -> Result<(), StoreError> {
        self.append(QUESTIONS_FILE, &records)?;
        records.into_iter().for_each(|r| self.index_group(r));
        Ok(())
    }

    pub fn append_answers(&mut self, records: Vec<AnswerRecord>) -> Result<(), StoreError> {
        self.append(ANSWERS_FILE, &records)?;
        records.into_iter().for_each(|r| self.index_answer(r));
        Ok(())
    }

    /// Final failures already on record for the same subject are skipped.
    pub fn append_failures(&mut self, records: Vec<FailureRecord>) -> Result<(), StoreError> {
        let fresh: Vec<FailureRecord> = records
            .into_iter()
            .filter(|r| !(r.event.is_final() && self.has_failed(r.event, &r.model_id, &r.subject)))
            .collect();
        self.append(FAILURES_FILE, &fresh)?;
        fresh.into_iter().for_each(|r| self.index_failure(r));
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            schema_version: SCHEMA_VERSION,
            run_seed: self.meta.run_seed,
            config_hash: self.meta.config_hash.clone(),
        }
    }

    fn append<T: Serialize + Clone>(&self, file: &str, records: &[T]) -> Result<(), StoreError> {
        if !self.writable {
            return Err(StoreError::ReadOnly);
        }
        if records.is_empty() {
            return Ok(());
        }
        let provenance = self.provenance();
        let mut buf = String::new();
        for record in records {
            let stamped = Stamped {
                provenance: provenance.clone(),
                record: record.clone(),
            };
            buf.push_str(&serde_json::to_string(&stamped).expect("records serialize"));
            buf.push('\n');
        }
        let path = self.dir.join(file);
        let mut handle = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        handle.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        handle.sync_data().map_err(io_err(&path))
    }

    fn index_explanation(&mut self, r: ExplanationRecord) {
        let key = (r.model_id.clone(), r.category.clone(), r.concept.clone());
        self.explanation_index.insert(key, self.explanations.len());
        self.explanations.push(r);
    }

    fn index_group(&mut self, r: QuestionGroup) {
        self.group_index.insert(r.group_id.clone(), self.groups.len());
        self.groups.push(r);
    }

    fn index_answer(&mut self, r: AnswerRecord) {
        self.answer_keys
            .insert((r.group_id.clone(), r.variant_index, r.model_id.clone()));
        self.answers.push(r);
    }

    fn index_failure(&mut self, r: FailureRecord) {
        if r.event.is_final() {
            self.final_failures
                .insert((r.event, r.model_id.clone(), r.subject.clone()));
        }
        self.failures.push(r);
    }
}

fn read_meta(path: &Path) -> Result<RunMeta, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| StoreError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion(meta.schema_version));
    }
    Ok(meta)
}

/// Reads every complete line. A trailing fragment without a newline is left
/// over from an interrupted write; it is dropped, and cut from the file when
/// the store is writable.
fn read_log<T: DeserializeOwned>(
    path: &Path,
    expected_hash: &str,
    truncate_partial: bool,
) -> Result<Vec<T>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete_len = text.rfind('\n').map_or(0, |i| i + 1);
    if complete_len < text.len() {
        log::warn!(
            "{}: dropping {} bytes of an incomplete trailing record",
            path.display(),
            text.len() - complete_len
        );
        if truncate_partial {
            let file = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(io_err(path))?;
            file.set_len(complete_len as u64).map_err(io_err(path))?;
        }
    }
    let mut out = Vec::new();
    for (i, line) in text[..complete_len].lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| StoreError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let stamped: Stamped<T> =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let p = stamped.provenance;
        if p.schema_version != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion(p.schema_version));
        }
        if p.config_hash != expected_hash {
            return Err(StoreError::ForeignRecord {
                path: path.to_path_buf(),
                line: i + 1,
                found: p.config_hash,
                expected: expected_hash.to_string(),
            });
        }
        out.push(stamped.record);
    }
    Ok(out)
}
