use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::ConceptSet;
use crate::parser::ParseMode;
use crate::prompt::{Templates, MAX_OPTIONS, MIN_OPTIONS};

pub const DEFAULT_QUESTIONS_PER_CONCEPT: usize = 5;
pub const DEFAULT_PARAPHRASES: usize = 3;
pub const DEFAULT_NUM_OPTIONS: usize = 10;
pub const DEFAULT_QUESTION_TYPE: &str = "conceptual understanding";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("questions_per_concept must be at least 1 (got {0})")]
    NoQuestions(usize),
    #[error("num_options must be between {MIN_OPTIONS} and {MAX_OPTIONS} (got {0})")]
    OptionsOutOfRange(usize),
    #[error("at least one model is required")]
    NoModels,
    #[error("model '{0}' is listed twice")]
    DuplicateModel(String),
    #[error("model id must be nonempty")]
    EmptyModelId,
    #[error("catalog has no concepts")]
    EmptyCatalog,
    #[error("question_types must contain at least one nonempty entry")]
    NoQuestionTypes,
    #[error("parallelism must be at least 1")]
    NoParallelism,
    #[error("{stage}: temperature {value} is outside [0, 2]")]
    Temperature { stage: &'static str, value: f64 },
    #[error("{stage}: max_tokens must be positive")]
    MaxTokens { stage: &'static str },
}

/// A model under evaluation and the backend profile that serves it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub backend: String,
}

impl ModelSpec {
    pub fn new(id: impl Into<String>, backend: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            backend: backend.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Decoding parameters per request kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub explain: StageSettings,
    pub query: StageSettings,
    pub paraphrase: StageSettings,
    pub test: StageSettings,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            explain: StageSettings {
                temperature: 0.7,
                max_tokens: 2048,
            },
            query: StageSettings {
                temperature: 0.7,
                max_tokens: 1024,
            },
            paraphrase: StageSettings {
                temperature: 0.7,
                max_tokens: 256,
            },
            test: StageSettings {
                temperature: 0.0,
                max_tokens: 256,
            },
        }
    }
}

impl GenerationSettings {
    fn validate(&self) -> Result<(), ConfigError> {
        for (stage, s) in [
            ("explain", self.explain),
            ("query", self.query),
            ("paraphrase", self.paraphrase),
            ("test", self.test),
        ] {
            if !(0.0..=2.0).contains(&s.temperature) {
                return Err(ConfigError::Temperature {
                    stage,
                    value: s.temperature,
                });
            }
            if s.max_tokens == 0 {
                return Err(ConfigError::MaxTokens { stage });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub concept_set: ConceptSet,
    pub models: Vec<ModelSpec>,
    pub questions_per_concept: usize,
    pub paraphrases_per_question: usize,
    pub num_options: usize,
    pub run_seed: u64,
    pub output_dir: PathBuf,
    /// Assigned round-robin by question index.
    pub question_types: Vec<String>,
    pub generation: GenerationSettings,
    pub answer_parse_mode: ParseMode,
    /// Also have every model answer every other model's questions.
    pub cross_model_answering: bool,
    /// Work items in flight per stage.
    pub parallelism: usize,
}

impl RunConfig {
    pub fn new(concept_set: ConceptSet, models: Vec<ModelSpec>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            concept_set,
            models,
            questions_per_concept: DEFAULT_QUESTIONS_PER_CONCEPT,
            paraphrases_per_question: DEFAULT_PARAPHRASES,
            num_options: DEFAULT_NUM_OPTIONS,
            run_seed: 0,
            output_dir: output_dir.into(),
            question_types: vec![DEFAULT_QUESTION_TYPE.to_string()],
            generation: GenerationSettings::default(),
            answer_parse_mode: ParseMode::Lenient,
            cross_model_answering: false,
            parallelism: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.questions_per_concept == 0 {
            return Err(ConfigError::NoQuestions(0));
        }
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&self.num_options) {
            return Err(ConfigError::OptionsOutOfRange(self.num_options));
        }
        if self.models.is_empty() {
            return Err(ConfigError::NoModels);
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.id.trim().is_empty() {
                return Err(ConfigError::EmptyModelId);
            }
            if self.models[..i].iter().any(|o| o.id == m.id) {
                return Err(ConfigError::DuplicateModel(m.id.clone()));
            }
        }
        if self.concept_set.is_empty() {
            return Err(ConfigError::EmptyCatalog);
        }
        if self.question_types.is_empty() || self.question_types.iter().any(|t| t.trim().is_empty()) {
            return Err(ConfigError::NoQuestionTypes);
        }
        if self.parallelism == 0 {
            return Err(ConfigError::NoParallelism);
        }
        self.generation.validate()
    }

    pub fn question_type(&self, question_index: usize) -> &str {
        &self.question_types[question_index % self.question_types.len()]
    }

    /// Answer records per concept per answering model when nothing fails.
    pub fn instances_per_concept(&self) -> usize {
        self.questions_per_concept * (self.paraphrases_per_question + 1)
    }

    /// Hash over everything that determines the content of the store.
    /// Output location and parallelism are excluded.
    pub fn config_hash(&self, templates: &Templates) -> String {
        let fingerprint = serde_json::json!({
            "catalog": self.concept_set.to_catalog_string(),
            "models": self.models,
            "questions_per_concept": self.questions_per_concept,
            "paraphrases_per_question": self.paraphrases_per_question,
            "num_options": self.num_options,
            "run_seed": self.run_seed,
            "question_types": self.question_types,
            "generation": self.generation,
            "answer_parse_mode": self.answer_parse_mode,
            "cross_model_answering": self.cross_model_answering,
            "templates": templates.hashes(),
        });
        hex::encode(Sha256::digest(fingerprint.to_string().as_bytes()))
    }
}
