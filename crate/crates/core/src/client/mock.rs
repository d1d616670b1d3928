//! Scripted, deterministic backend for offline runs and tests.
//!
//! Scripted keys answer verbatim. Anything else gets synthetic output that is
//! a pure function of the seed and the request: explanations are pseudo-text,
//! query prompts yield well-formed question blocks, and test prompts are
//! answered according to an [`AnswerPolicy`]. Synthetic options mark the true
//! statements with a trailing "holds." so that the oracle policy can recover
//! the correct letters from the prompt alone.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Mutex, PoisonError};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, RequestKey};
use crate::parser::{render_answer, render_letters};
use crate::prompt::TemplateId;

const TRUE_MARK: &str = "holds.";
const FALSE_MARK: &str = "fails.";

const WORDS: &[&str] = &[
    "structure", "principle", "model", "relation", "property", "method", "system", "process",
    "theory", "pattern", "measure", "variable", "function", "constraint", "boundary", "signal",
    "network", "balance", "transfer", "sequence", "framework", "mechanism", "outcome", "factor",
    "element", "practice", "evidence", "context", "interaction", "estimate", "invariant", "layer",
];

const PARAPHRASE_LEADS: &[&str] = &[
    "Put differently:",
    "Stated another way:",
    "In other words,",
    "Rephrased:",
    "To ask it differently:",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockReply {
    Text(String),
    /// Fails with the given HTTP-like status.
    Fail(u16),
}

/// How synthetic Test-step answers are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum AnswerPolicy {
    /// Random nonempty subset, seeded per request.
    Seeded,
    /// Picks every option whose text ends with the synthetic truth marker.
    Oracle,
    /// Always answers the same letters.
    Constant(BTreeSet<char>),
    /// Oracle answer with probability `accuracy`, otherwise a seeded random subset.
    Noisy { accuracy: f64 },
}

impl std::str::FromStr for AnswerPolicy {
    type Err = String;

    /// `seeded`, `oracle`, `constant:AC`, or `noisy:0.8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seeded" => return Ok(Self::Seeded),
            "oracle" => return Ok(Self::Oracle),
            _ => {}
        }
        if let Some(letters) = s.strip_prefix("constant:") {
            let set: BTreeSet<char> = letters
                .chars()
                .filter(|c| !matches!(c, ',' | ' '))
                .map(|c| c.to_ascii_uppercase())
                .collect();
            if set.is_empty() || !set.iter().all(char::is_ascii_uppercase) {
                return Err(format!("invalid constant answer '{letters}'"));
            }
            return Ok(Self::Constant(set));
        }
        if let Some(acc) = s.strip_prefix("noisy:") {
            let accuracy: f64 = acc
                .parse()
                .map_err(|_| format!("invalid accuracy '{acc}'"))?;
            if !(0.0..=1.0).contains(&accuracy) {
                return Err(format!("accuracy {accuracy} outside [0, 1]"));
            }
            return Ok(Self::Noisy { accuracy });
        }
        Err(format!(
            "unknown answer policy '{s}' (expected seeded, oracle, constant:<letters> or noisy:<p>)"
        ))
    }
}

pub struct MockBackend {
    script: HashMap<RequestKey, MockReply>,
    seed: u64,
    answers: AnswerPolicy,
    calls: Mutex<Vec<ChatRequest>>,
    patterns: Patterns,
}

struct Patterns {
    num_options: Regex,
    concept: Regex,
    option_line: Regex,
}

impl Patterns {
    fn new() -> Self {
        Self {
            num_options: Regex::new(r"should have (\d+) options").unwrap(),
            concept: Regex::new(r"about the following concept: (.*?)\. Use this question type")
                .unwrap(),
            option_line: Regex::new(r"(?m)^([A-Z])\) (.*)$").unwrap(),
        }
    }
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend")
            .field("script_entries", &self.script.len())
            .field("seed", &self.seed)
            .field("answers", &self.answers)
            .finish_non_exhaustive()
    }
}

impl MockBackend {
    pub fn new(script: HashMap<RequestKey, MockReply>, fallback_seed: u64) -> Self {
        Self {
            script,
            seed: fallback_seed,
            answers: AnswerPolicy::Seeded,
            calls: Mutex::new(Vec::new()),
            patterns: Patterns::new(),
        }
    }

    pub fn seeded(fallback_seed: u64) -> Self {
        Self::new(HashMap::new(), fallback_seed)
    }

    pub fn with_answers(mut self, policy: AnswerPolicy) -> Self {
        self.answers = policy;
        self
    }

    pub fn script(mut self, key: RequestKey, reply: MockReply) -> Self {
        self.script.insert(key, reply);
        self
    }

    /// Every request received so far, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.calls
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap_or_else(PoisonError::into_inner).len()
    }

    pub fn calls_of(&self, kind: TemplateId) -> usize {
        self.calls()
            .iter()
            .filter(|r| r.key.as_ref().map(|k| k.kind) == Some(kind) || (r.key.is_none() && infer_kind(&r.prompt_text) == Some(kind)))
            .count()
    }

    /// The pure response function; `complete` adds call recording.
    pub fn respond(&self, request: &ChatRequest) -> Result<String, BackendError> {
        if let Some(key) = &request.key {
            match self.script.get(key) {
                Some(MockReply::Text(text)) => return Ok(text.clone()),
                Some(MockReply::Fail(status)) => {
                    return Err(BackendError::Status {
                        status: *status,
                        body: "scripted failure".into(),
                    })
                }
                None => {}
            }
        }
        let mut rng = self.rng_for(request);
        let kind = request
            .key
            .as_ref()
            .map(|k| k.kind)
            .or_else(|| infer_kind(&request.prompt_text));
        let text = match kind {
            Some(TemplateId::Explain) => {
                let concept = request
                    .key
                    .as_ref()
                    .map(|k| k.subject.as_str())
                    .unwrap_or("this topic");
                synthetic_explanation(concept, &mut rng)
            }
            Some(TemplateId::Query) => self.synthetic_question(&request.prompt_text, &mut rng),
            Some(TemplateId::Paraphrase) => synthetic_paraphrase(&request.prompt_text, &mut rng),
            Some(TemplateId::Test) => self.synthetic_answer(&request.prompt_text, &mut rng),
            None => pseudo_text(&mut rng, 40),
        };
        Ok(text)
    }

    fn rng_for(&self, request: &ChatRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(request.model_id.as_bytes());
        hasher.update([0]);
        if let Some(key) = &request.key {
            hasher.update(key.kind.as_str().as_bytes());
            hasher.update([0]);
            hasher.update(key.subject.as_bytes());
        }
        hasher.update([0]);
        hasher.update(request.prompt_text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn synthetic_question(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let n = self
            .patterns
            .num_options
            .captures(prompt)
            .and_then(|c| c[1].parse::<usize>().ok())
            .filter(|n| (2..=26).contains(n))
            .unwrap_or(4);
        let concept = self
            .patterns
            .concept
            .captures(prompt)
            .map(|c| c[1].to_string())
            .unwrap_or_else(|| "this topic".to_string());
        let mut correct: BTreeSet<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
        if correct.is_empty() {
            correct.insert(rng.random_range(0..n));
        }
        let tag: u32 = rng.random_range(0x1000..0xffff);
        let mut out = format!(
            "Question: Which of the following statements about {concept} are true (item {tag:x})?\nOptions:\n"
        );
        for i in 0..n {
            let letter = (b'A' + i as u8) as char;
            let a = WORDS.choose(rng).unwrap();
            let b = WORDS.choose(rng).unwrap();
            let mark = if correct.contains(&i) { TRUE_MARK } else { FALSE_MARK };
            out.push_str(&format!("{letter}) The {a} {b} claim number {} {mark}\n", i + 1));
        }
        let letters: BTreeSet<char> = correct.iter().map(|i| (b'A' + *i as u8) as char).collect();
        out.push_str(&format!("Correct Answers: {}", render_letters(&letters)));
        out
    }

    fn synthetic_answer(&self, prompt: &str, rng: &mut ChaCha8Rng) -> String {
        let options: Vec<(char, String)> = self
            .patterns
            .option_line
            .captures_iter(prompt)
            .filter_map(|c| Some((c[1].chars().next()?, c[2].to_string())))
            .collect();
        let letters: Vec<char> = if options.is_empty() {
            vec!['A', 'B', 'C', 'D']
        } else {
            options.iter().map(|(l, _)| *l).collect()
        };
        let oracle = || -> BTreeSet<char> {
            options
                .iter()
                .filter(|(_, text)| text.trim_end().ends_with(TRUE_MARK))
                .map(|(l, _)| *l)
                .collect()
        };
        let random = |rng: &mut ChaCha8Rng| -> BTreeSet<char> {
            let mut set: BTreeSet<char> =
                letters.iter().copied().filter(|_| rng.random_bool(0.35)).collect();
            if set.is_empty() {
                set.insert(*letters.choose(rng).unwrap());
            }
            set
        };
        let picked = match &self.answers {
            AnswerPolicy::Seeded => random(rng),
            AnswerPolicy::Oracle => oracle(),
            AnswerPolicy::Constant(set) => set.clone(),
            AnswerPolicy::Noisy { accuracy } => {
                if rng.random_bool(*accuracy) {
                    oracle()
                } else {
                    random(rng)
                }
            }
        };
        if picked.is_empty() {
            "I am not sure any option is correct.".to_string()
        } else {
            render_answer(&picked)
        }
    }
}

fn infer_kind(prompt: &str) -> Option<TemplateId> {
    if prompt.starts_with("Please provide a comprehensive and detailed explanation") {
        Some(TemplateId::Explain)
    } else if prompt.starts_with("Create a multiple-choice question") {
        Some(TemplateId::Query)
    } else if prompt.starts_with("Paraphrase the following question") {
        Some(TemplateId::Paraphrase)
    } else if prompt.contains("Please select all correct options") {
        Some(TemplateId::Test)
    } else {
        None
    }
}

fn pseudo_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    let mut out = String::new();
    for i in 0..words {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(WORDS.choose(rng).unwrap());
    }
    out.push('.');
    out
}

fn synthetic_explanation(concept: &str, rng: &mut ChaCha8Rng) -> String {
    let mut text = format!("Overview of {concept}.");
    let sentences = rng.random_range(4..8);
    for _ in 0..sentences {
        text.push(' ');
        let len = rng.random_range(8..16);
        let mut sentence = pseudo_text(rng, len);
        sentence[..1].make_ascii_uppercase();
        text.push_str(&sentence);
    }
    text
}

fn synthetic_paraphrase(prompt: &str, rng: &mut ChaCha8Rng) -> String {
    let question = prompt
        .rfind("\n\n'")
        .map(|i| prompt[i + 3..].trim_end().trim_end_matches('\''))
        .unwrap_or("the question above");
    let lead = PARAPHRASE_LEADS.choose(rng).unwrap();
    let ordinal: u16 = rng.random_range(100..1000);
    format!("{lead} {question} (form {ordinal})")
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.calls
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .push(request.clone());
        let text = self.respond(request)?;
        Ok(ChatResponse {
            input_token_count: request.prompt_text.split_whitespace().count() as u64,
            output_token_count: text.split_whitespace().count() as u64,
            text,
            attempts: 1,
        })
    }
}
