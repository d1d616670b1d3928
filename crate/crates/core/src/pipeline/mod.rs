//! The Explain, Query and Test stages over every (model, concept), persisted
//! to a resumable [`RunStore`].
//!
//! Work items run in bounded parallel chunks; results are collected in item
//! order and appended by the calling thread, so the store has a single
//! writer and its contents do not depend on scheduling.

mod config;
mod records;
mod store;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Concept;
use crate::client::{BackendError, ChatBackend, ChatRequest, RequestKey};
use crate::metrics::Prediction;
use crate::parser::{
    parse_answer, parse_question_block, render_options, CanonicalAnswer, ParsedQuestion,
};
use crate::prompt::{PromptError, PromptParams, TemplateId, Templates};

pub use config::{
    ConfigError, GenerationSettings, ModelSpec, RunConfig, StageSettings,
    DEFAULT_NUM_OPTIONS, DEFAULT_PARAPHRASES, DEFAULT_QUESTIONS_PER_CONCEPT,
    DEFAULT_QUESTION_TYPE,
};
pub use records::{
    AnswerRecord, ExplanationRecord, FailureEvent, FailureRecord, Provenance, QuestionGroup,
    Stamped, SCHEMA_VERSION,
};
pub use store::{
    RunMeta, RunStore, StoreError, ANSWERS_FILE, EXPLANATIONS_FILE, FAILURES_FILE, META_FILE,
    QUESTIONS_FILE,
};

/// Query attempts per question slot: the first try plus two regenerations.
pub const QUERY_ATTEMPTS: u32 = 3;
/// Attempts per paraphrase slot before falling back to the original stem.
pub const PARAPHRASE_ATTEMPTS: u32 = 2;
/// Attempts per explanation when the response is empty.
pub const EXPLAIN_ATTEMPTS: u32 = 2;

pub type Backends = HashMap<String, Arc<dyn ChatBackend>>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model '{model}' uses backend profile '{profile}', which is not configured")]
    MissingBackend { model: String, profile: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("template error: {0}")]
    Prompt(#[from] PromptError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Explain,
    Query,
    Test,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Explain => "explain",
            Stage::Query => "query",
            Stage::Test => "test",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explain" => Ok(Stage::Explain),
            "query" => Ok(Stage::Query),
            "test" => Ok(Stage::Test),
            _ => Err(format!("unknown stage '{s}' (expected explain, query or test)")),
        }
    }
}

/// Counts over the whole store after a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub explanations: usize,
    pub explanation_failures: usize,
    pub question_groups: usize,
    pub question_slot_failures: usize,
    pub paraphrase_fallbacks: usize,
    pub answer_records: usize,
    pub answer_parse_failures: usize,
    pub answer_backend_failures: usize,
    /// Backend requests issued by this invocation.
    pub requests_issued: usize,
    pub stopped_after: Option<Stage>,
}

impl RunSummary {
    pub fn from_store(store: &RunStore) -> Self {
        let count = |event: FailureEvent| store.failures().iter().filter(|f| f.event == event).count();
        let predicted = |p: fn(&Prediction) -> bool| store.answers().iter().filter(|a| p(&a.predicted)).count();
        Self {
            explanations: store.explanations().len(),
            explanation_failures: count(FailureEvent::ExplanationFailed),
            question_groups: store.groups().len(),
            question_slot_failures: count(FailureEvent::QuestionSlotFailed),
            paraphrase_fallbacks: count(FailureEvent::ParaphraseFallback),
            answer_records: store.answers().len(),
            answer_parse_failures: predicted(|p| matches!(p, Prediction::ParseFailure)),
            answer_backend_failures: predicted(|p| matches!(p, Prediction::BackendFailure)),
            requests_issued: 0,
            stopped_after: None,
        }
    }

    /// Failures that left concepts, question slots or answers missing.
    pub fn has_partial_failures(&self) -> bool {
        self.explanation_failures + self.question_slot_failures + self.answer_backend_failures > 0
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} explanations ({} failed), {} question groups ({} slots failed, {} paraphrase fallbacks), \
             {} answers ({} unparseable, {} backend failures), {} requests this run",
            self.explanations,
            self.explanation_failures,
            self.question_groups,
            self.question_slot_failures,
            self.paraphrase_fallbacks,
            self.answer_records,
            self.answer_parse_failures,
            self.answer_backend_failures,
            self.requests_issued
        )
    }
}

/// Outcome of generating one question slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryOutcome {
    pub group: Option<QuestionGroup>,
    pub events: Vec<FailureRecord>,
}

pub struct Pipeline {
    config: RunConfig,
    templates: Templates,
    backends: Backends,
    pool: rayon::ThreadPool,
    requests: AtomicUsize,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("config", &self.config)
            .field("backends", &self.backends.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

/// Stable id of a question slot. Concepts are numbered within their category.
pub fn group_id(model_id: &str, category: &str, concept_ordinal: usize, question_index: usize) -> String {
    format!("{model_id}/{category}/{concept_ordinal}/{question_index}")
}

fn attempt_subject(base: &str, attempt: u32) -> String {
    if attempt == 0 {
        base.to_string()
    } else {
        format!("{base}~retry{attempt}")
    }
}

/// Trims whitespace and one pair of surrounding quotes.
fn clean_paraphrase(text: &str) -> String {
    let t = text.trim();
    for (open, close) in [('\'', '\''), ('"', '"'), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')] {
        if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
            return t[open.len_utf8()..t.len() - close.len_utf8()].trim().to_string();
        }
    }
    t.to_string()
}

impl Pipeline {
    pub fn new(config: RunConfig, templates: Templates, backends: Backends) -> Result<Self, PipelineError> {
        config.validate()?;
        for m in &config.models {
            if !backends.contains_key(&m.backend) {
                return Err(PipelineError::MissingBackend {
                    model: m.id.clone(),
                    profile: m.backend.clone(),
                });
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallelism)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        Ok(Self {
            config,
            templates,
            backends,
            pool,
            requests: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_full(&self) -> Result<RunSummary, PipelineError> {
        self.run_until(None)
    }

    /// Runs the stages in order, stopping after `stop_after` when given.
    /// Anything already in the store is skipped.
    pub fn run_until(&self, stop_after: Option<Stage>) -> Result<RunSummary, PipelineError> {
        let before = self.requests.load(Ordering::Relaxed);
        let mut store = RunStore::create_or_resume(&self.config, &self.templates)?;
        let mut stopped_after = None;
        for stage in [Stage::Explain, Stage::Query, Stage::Test] {
            match stage {
                Stage::Explain => self.run_explain(&mut store)?,
                Stage::Query => self.run_query(&mut store)?,
                Stage::Test => self.run_test(&mut store)?,
            }
            if stop_after == Some(stage) && stage != Stage::Test {
                stopped_after = Some(stage);
                break;
            }
        }
        let mut summary = RunSummary::from_store(&store);
        summary.requests_issued = self.requests.load(Ordering::Relaxed) - before;
        summary.stopped_after = stopped_after;
        Ok(summary)
    }

    fn backend(&self, model: &ModelSpec) -> &dyn ChatBackend {
        self.backends[&model.backend].as_ref()
    }

    fn call(
        &self,
        model: &ModelSpec,
        settings: StageSettings,
        kind: TemplateId,
        subject: String,
        prompt: String,
    ) -> Result<String, BackendError> {
        let request = ChatRequest::new(&model.id, prompt, settings.temperature, settings.max_tokens)?
            .with_key(RequestKey::new(kind, subject));
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.backend(model).complete(&request).map(|r| r.text)
    }

    fn chunk_size(&self) -> usize {
        self.config.parallelism * 4
    }

    /// Maps `items` through `work` in parallel chunks and hands each chunk's
    /// results, in order, to `sink`.
    fn process<I, O, W, S>(&self, stage: Stage, items: Vec<I>, work: W, mut sink: S) -> Result<(), PipelineError>
    where
        I: Sync,
        O: Send,
        W: Fn(&I) -> Result<O, PipelineError> + Sync,
        S: FnMut(Vec<O>) -> Result<(), PipelineError>,
    {
        let total = items.len();
        log::info!("{stage}: {total} items to do");
        let mut done = 0;
        let mut next_decile = 1;
        for chunk in items.chunks(self.chunk_size()) {
            let results: Vec<O> = self
                .pool
                .install(|| chunk.par_iter().map(&work).collect::<Result<Vec<_>, _>>())?;
            done += results.len();
            sink(results)?;
            if done * 10 >= next_decile * total {
                log::info!("{stage}: {done}/{total}");
                next_decile = done * 10 / total + 1;
            }
        }
        Ok(())
    }

    /// (model, concept, ordinal within category) in config and catalog order.
    fn concept_slots(&self) -> Vec<(&ModelSpec, &Concept, usize)> {
        let catalog = &self.config.concept_set;
        let mut slots = Vec::new();
        for model in &self.config.models {
            for category in catalog.categories() {
                for (ordinal, concept) in catalog.concepts_in(&category.slug).enumerate() {
                    slots.push((model, concept, ordinal));
                }
            }
        }
        slots
    }

    pub fn run_explain(&self, store: &mut RunStore) -> Result<(), PipelineError> {
        let items: Vec<(&ModelSpec, &Concept)> = self
            .concept_slots()
            .into_iter()
            .filter(|(m, c, _)| {
                store.explanation(&m.id, &c.category, &c.name).is_none()
                    && !store.has_failed(FailureEvent::ExplanationFailed, &m.id, &explain_subject(c))
            })
            .map(|(m, c, _)| (m, c))
            .collect();
        self.process(
            Stage::Explain,
            items,
            |(model, concept)| self.explain(model, concept),
            |results| {
                let mut ok = Vec::new();
                let mut failed = Vec::new();
                for r in results {
                    match r {
                        Ok(e) => ok.push(e),
                        Err(f) => failed.push(f),
                    }
                }
                store.append_explanations(ok)?;
                store.append_failures(failed)?;
                Ok(())
            },
        )
    }

    /// Requests one explanation, retrying once on an empty reply.
    pub fn explain(
        &self,
        model: &ModelSpec,
        concept: &Concept,
    ) -> Result<Result<ExplanationRecord, FailureRecord>, PipelineError> {
        let prompt = self
            .templates
            .render(TemplateId::Explain, &PromptParams::explain(&concept.name))?
            .text;
        let mut detail = String::new();
        let mut attempts = 0;
        for attempt in 0..EXPLAIN_ATTEMPTS {
            attempts = attempt + 1;
            let subject = attempt_subject(&explain_subject(concept), attempt);
            match self.call(model, self.config.generation.explain, TemplateId::Explain, subject, prompt.clone()) {
                Ok(text) if !text.trim().is_empty() => {
                    return Ok(Ok(ExplanationRecord {
                        model_id: model.id.clone(),
                        category: concept.category.clone(),
                        concept: concept.name.clone(),
                        text,
                        attempts,
                    }))
                }
                Ok(_) => detail = "empty response".into(),
                Err(e) => {
                    detail = e.to_string();
                    break;
                }
            }
        }
        log::warn!("explain failed for {} / {}: {detail}", model.id, concept.name);
        Ok(Err(FailureRecord {
            event: FailureEvent::ExplanationFailed,
            subject: explain_subject(concept),
            model_id: model.id.clone(),
            category: concept.category.clone(),
            concept: concept.name.clone(),
            attempts,
            detail,
        }))
    }

    pub fn run_query(&self, store: &mut RunStore) -> Result<(), PipelineError> {
        let mut items = Vec::new();
        for (model, concept, ordinal) in self.concept_slots() {
            let Some(explanation) = store.explanation(&model.id, &concept.category, &concept.name) else {
                continue;
            };
            for qi in 0..self.config.questions_per_concept {
                let gid = group_id(&model.id, &concept.category, ordinal, qi);
                if store.group(&gid).is_none()
                    && !store.has_failed(FailureEvent::QuestionSlotFailed, &model.id, &gid)
                {
                    items.push((model, concept, gid, qi, explanation.text.clone()));
                }
            }
        }
        self.process(
            Stage::Query,
            items,
            |(model, concept, gid, qi, explanation)| self.query(model, concept, gid, *qi, explanation),
            |results| {
                let mut groups = Vec::new();
                let mut events = Vec::new();
                for r in results {
                    groups.extend(r.group);
                    events.extend(r.events);
                }
                store.append_groups(groups)?;
                store.append_failures(events)?;
                Ok(())
            },
        )
    }

    /// Generates question `question_index` for a concept, then its paraphrases.
    pub fn query(
        &self,
        model: &ModelSpec,
        concept: &Concept,
        group_id: &str,
        question_index: usize,
        explanation: &str,
    ) -> Result<QueryOutcome, PipelineError> {
        let question_type = self.config.question_type(question_index).to_string();
        let prompt = self
            .templates
            .render(
                TemplateId::Query,
                &PromptParams::query(&concept.name, &question_type, self.config.num_options, explanation),
            )?
            .text;
        let base = format!("{}#{question_index}", concept.name);
        let failure = |event, subject: String, attempts, detail: String| FailureRecord {
            event,
            subject,
            model_id: model.id.clone(),
            category: concept.category.clone(),
            concept: concept.name.clone(),
            attempts,
            detail,
        };

        let mut parsed: Option<(ParsedQuestion, String)> = None;
        let mut detail = String::new();
        let mut attempts = 0;
        for attempt in 0..QUERY_ATTEMPTS {
            attempts = attempt + 1;
            let reply = self.call(
                model,
                self.config.generation.query,
                TemplateId::Query,
                attempt_subject(&base, attempt),
                prompt.clone(),
            );
            match reply {
                Ok(text) => match parse_question_block(&text, self.config.num_options) {
                    Ok(q) => {
                        parsed = Some((q, text));
                        break;
                    }
                    Err(e) => detail = format!("unparseable question: {e}"),
                },
                Err(e) => detail = e.to_string(),
            }
            log::debug!("query {group_id} attempt {attempts}: {detail}");
        }
        let Some((original, raw_text)) = parsed else {
            log::warn!("question slot {group_id} failed after {attempts} attempts: {detail}");
            return Ok(QueryOutcome {
                group: None,
                events: vec![failure(FailureEvent::QuestionSlotFailed, group_id.to_string(), attempts, detail)],
            });
        };

        let mut events = Vec::new();
        let mut stems = Vec::new();
        let mut fallback_variants = Vec::new();
        let prompt = self
            .templates
            .render(TemplateId::Paraphrase, &PromptParams::paraphrase(&original.stem))?
            .text;
        for variant in 1..=self.config.paraphrases_per_question {
            let base = format!("{}#{question_index}.{variant}", concept.name);
            let mut stem = None;
            let mut detail = String::new();
            for attempt in 0..PARAPHRASE_ATTEMPTS {
                let reply = self.call(
                    model,
                    self.config.generation.paraphrase,
                    TemplateId::Paraphrase,
                    attempt_subject(&base, attempt),
                    prompt.clone(),
                );
                match reply.map(|t| clean_paraphrase(&t)) {
                    Ok(text) if !text.is_empty() => {
                        stem = Some(text);
                        break;
                    }
                    Ok(_) => detail = "empty paraphrase".into(),
                    Err(e) => detail = e.to_string(),
                }
            }
            let stem = stem.unwrap_or_else(|| {
                log::warn!("paraphrase {group_id}#{variant} fell back to the original stem: {detail}");
                fallback_variants.push(variant);
                events.push(failure(
                    FailureEvent::ParaphraseFallback,
                    format!("{group_id}#{variant}"),
                    PARAPHRASE_ATTEMPTS,
                    detail,
                ));
                original.stem.clone()
            });
            stems.push(stem);
        }

        Ok(QueryOutcome {
            group: Some(QuestionGroup {
                group_id: group_id.to_string(),
                model_id: model.id.clone(),
                category: concept.category.clone(),
                concept: concept.name.clone(),
                question_index,
                question_type,
                original,
                paraphrased_stems: stems,
                fallback_variants,
                raw_text,
            }),
            events,
        })
    }

    pub fn run_test(&self, store: &mut RunStore) -> Result<(), PipelineError> {
        let mut items = Vec::new();
        for answerer in &self.config.models {
            for group in store.groups() {
                if group.model_id != answerer.id && !self.config.cross_model_answering {
                    continue;
                }
                for variant in 0..group.variant_count() {
                    if !store.has_answer(&group.group_id, variant, &answerer.id) {
                        items.push((answerer, group.clone(), variant));
                    }
                }
            }
        }
        self.process(
            Stage::Test,
            items,
            |(answerer, group, variant)| self.answer(answerer, group, *variant),
            |results| {
                let mut answers = Vec::new();
                let mut events = Vec::new();
                for (answer, event) in results {
                    answers.push(answer);
                    events.extend(event);
                }
                store.append_answers(answers)?;
                store.append_failures(events)?;
                Ok(())
            },
        )
    }

    /// Asks `answerer` one variant of a question. The prompt carries only
    /// the stem and the options.
    pub fn answer(
        &self,
        answerer: &ModelSpec,
        group: &QuestionGroup,
        variant_index: usize,
    ) -> Result<(AnswerRecord, Option<FailureRecord>), PipelineError> {
        let stem = group.stem(variant_index).expect("variant index within group");
        let prompt = self
            .templates
            .render(
                TemplateId::Test,
                &PromptParams::test(stem, render_options(&group.original.options)),
            )?
            .text;
        let subject = format!("{}#{variant_index}", group.group_id);
        let reply = self.call(
            answerer,
            self.config.generation.test,
            TemplateId::Test,
            subject.clone(),
            prompt,
        );
        let valid = group.original.letters();
        let (predicted, raw_text, error) = match reply {
            Ok(text) => match parse_answer(&text, &valid, self.config.answer_parse_mode) {
                Ok(parsed) => {
                    let answer = CanonicalAnswer::from_letters(&parsed.letters)
                        .expect("parsed answers are nonempty");
                    (Prediction::Answer { answer }, text, None)
                }
                Err(e) => (Prediction::ParseFailure, text, Some(e.to_string())),
            },
            Err(e) => (Prediction::BackendFailure, String::new(), Some(e.to_string())),
        };
        let event = error.as_ref().map(|detail| {
            let event = if predicted == Prediction::BackendFailure {
                FailureEvent::AnswerBackendFailure
            } else {
                FailureEvent::AnswerParseFailure
            };
            log::warn!("{subject} answered by {}: {detail}", answerer.id);
            FailureRecord {
                event,
                subject: subject.clone(),
                model_id: answerer.id.clone(),
                category: group.category.clone(),
                concept: group.concept.clone(),
                attempts: 1,
                detail: detail.clone(),
            }
        });
        Ok((
            AnswerRecord {
                group_id: group.group_id.clone(),
                variant_index,
                model_id: answerer.id.clone(),
                predicted,
                raw_text,
                correct: group.correct(),
                error,
            },
            event,
        ))
    }
}

fn explain_subject(concept: &Concept) -> String {
    concept.name.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paraphrase_cleanup() {
        assert_eq!(clean_paraphrase("  'What is X?' \n"), "What is X?");
        assert_eq!(clean_paraphrase("\"What is X?\""), "What is X?");
        assert_eq!(clean_paraphrase("\u{201c}What?\u{201d}"), "What?");
        assert_eq!(clean_paraphrase("It's 'fine'"), "It's 'fine'");
        assert_eq!(clean_paraphrase("''"), "");
        assert_eq!(clean_paraphrase("'"), "'");
    }

    #[test]
    fn retry_subjects() {
        assert_eq!(attempt_subject("x#0", 0), "x#0");
        assert_eq!(attempt_subject("x#0", 2), "x#0~retry2");
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Explain, Stage::Query, Stage::Test] {
            assert_eq!(s.to_string().parse::<Stage>(), Ok(s));
        }
        assert!("report".parse::<Stage>().is_err());
    }
}
