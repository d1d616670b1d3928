//! Explain-Query-Test: a self-evaluation harness for language models.
//!
//! A model explains each concept of a catalog, turns its own explanation into
//! multiple-choice questions (plus paraphrases), and then answers those
//! questions without the explanation in context. The harness scores full-loop
//! accuracy and answer consistency across paraphrases, and compares the
//! results with an external benchmark.

pub mod catalog;
pub mod cli;
pub mod client;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod report;
