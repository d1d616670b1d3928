#![allow(dead_code)]

pub mod fake_server;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use eqt_core::catalog::{parse_catalog, ConceptSet};
use eqt_core::client::{AnswerPolicy, ChatBackend, MockBackend};
use eqt_core::pipeline::{Backends, ModelSpec, Pipeline, RunConfig};
use eqt_core::prompt::Templates;

/// `categories` × `per_category` catalog with predictable names.
pub fn catalog(categories: usize, per_category: usize) -> ConceptSet {
    const NAMES: &[&str] = &[
        "Business", "Law", "Psychology", "Biology", "Chemistry", "History", "Other", "Health",
        "Economics", "Math", "Physics", "Computer Science", "Philosophy", "Engineering",
    ];
    let mut text = String::new();
    for c in 0..categories {
        let name = NAMES[c % NAMES.len()];
        let slug = name.to_ascii_lowercase().replace(' ', "_");
        text.push_str(&format!("# {name} | {slug}\n"));
        for i in 0..per_category {
            text.push_str(&format!("- {name} concept {i}\n"));
        }
    }
    parse_catalog(&text).unwrap()
}

pub fn config(catalog: ConceptSet, models: &[&str], q: usize, k: usize, dir: &Path) -> RunConfig {
    let mut config = RunConfig::new(
        catalog,
        models.iter().map(|m| ModelSpec::new(*m, "mock")).collect(),
        dir,
    );
    config.questions_per_concept = q;
    config.paraphrases_per_question = k;
    config
}

pub fn oracle_mock(seed: u64) -> Arc<MockBackend> {
    Arc::new(MockBackend::seeded(seed).with_answers(AnswerPolicy::Oracle))
}

pub fn pipeline(config: RunConfig, backend: Arc<MockBackend>) -> Pipeline {
    let mut backends: Backends = HashMap::new();
    backends.insert("mock".into(), backend as Arc<dyn ChatBackend>);
    Pipeline::new(config, Templates::embedded(), backends).unwrap()
}

/// Store files with the timestamp and output directory lines of `run.meta` removed.
pub fn store_snapshot(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let text = text
                .lines()
                .filter(|l| !["\"created_at\"", "\"updated_at\"", "\"output_dir\""].iter().any(|k| l.contains(k)))
                .collect::<Vec<_>>()
                .join("\n");
            (p.file_name().unwrap().to_string_lossy().into_owned(), text)
        })
        .collect();
    files.sort();
    files
}
