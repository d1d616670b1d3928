//! Parsing model output into questions, answer selections and canonical keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{MAX_OPTIONS, MIN_OPTIONS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected option count must be between {MIN_OPTIONS} and {MAX_OPTIONS}, got {0}")]
    ExpectedOptionsOutOfRange(usize),
    #[error("no 'Question:' marker found")]
    MissingQuestionMarker,
    #[error("question stem is empty")]
    EmptyStem,
    #[error("option {0}) appears more than once")]
    DuplicateOption(char),
    #[error("option {0}) has no text")]
    EmptyOption(char),
    #[error("expected {expected} options, found {found}")]
    OptionCountMismatch { expected: usize, found: usize },
    #[error("option letters are not contiguous from A: expected {expected}, found {found}")]
    NonContiguousOptions { expected: char, found: char },
    #[error("no 'Correct Answers:' marker found")]
    MissingCorrectAnswers,
    #[error("'Correct Answers:' lists no letters")]
    EmptyCorrectAnswers,
    #[error("correct answer {0} is outside the option range")]
    CorrectOutOfRange(char),
    #[error("no 'Answer:' marker found")]
    MissingAnswerMarker,
    #[error("answer lists no option letters")]
    EmptyAnswer,
    #[error("answer letter {0} is not a valid option")]
    InvalidLetter(char),
    #[error("unexpected token '{0}' in letter list")]
    UnexpectedToken(String),
    #[error("strict mode: output must consist of a single 'Answer:' line")]
    StrictFormat,
    #[error("cannot canonicalize an empty letter set")]
    EmptyLetterSet,
}

/// How tolerant answer extraction is of text around the `Answer:` line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Lenient,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuestion {
    pub stem: String,
    pub options: BTreeMap<char, String>,
    pub correct: BTreeSet<char>,
}

impl ParsedQuestion {
    pub fn letters(&self) -> BTreeSet<char> {
        self.options.keys().copied().collect()
    }

    pub fn correct_answer(&self) -> CanonicalAnswer {
        CanonicalAnswer::from_letters(&self.correct)
            .expect("parsed questions always have a nonempty correct set")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub letters: BTreeSet<char>,
}

/// Sorted, uppercase, separator-free letter key, e.g. `"ACD"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CanonicalAnswer(String);

impl CanonicalAnswer {
    pub fn from_letters(letters: &BTreeSet<char>) -> Result<Self, ParseError> {
        if letters.is_empty() {
            return Err(ParseError::EmptyLetterSet);
        }
        Ok(Self(
            letters.iter().map(|c| c.to_ascii_uppercase()).collect::<BTreeSet<_>>().into_iter().collect(),
        ))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn letters(&self) -> BTreeSet<char> {
        self.0.chars().collect()
    }
}

impl TryFrom<String> for CanonicalAnswer {
    type Error = ParseError;

    fn try_from(key: String) -> Result<Self, Self::Error> {
        if let Some(bad) = key.chars().find(|c| !c.is_ascii_uppercase()) {
            return Err(ParseError::InvalidLetter(bad));
        }
        let canonical = Self::from_letters(&key.chars().collect())?;
        if canonical.0 != key {
            return Err(ParseError::UnexpectedToken(key));
        }
        Ok(canonical)
    }
}

impl From<CanonicalAnswer> for String {
    fn from(answer: CanonicalAnswer) -> Self {
        answer.0
    }
}

impl fmt::Display for CanonicalAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn canonicalize(letters: &BTreeSet<char>) -> Result<CanonicalAnswer, ParseError> {
    CanonicalAnswer::from_letters(letters)
}

fn strip_markdown(line: &str) -> String {
    line.replace("**", "").replace("__", "").trim().to_string()
}

/// Returns the text after `marker` when `line` starts with it (ASCII case-insensitive).
fn after_marker<'a>(line: &'a str, marker: &str) -> Option<&'a str> {
    let head = line.get(..marker.len())?;
    head.eq_ignore_ascii_case(marker)
        .then(|| line[marker.len()..].trim())
}

fn correct_marker(line: &str) -> Option<&str> {
    after_marker(line, "correct answers:").or_else(|| after_marker(line, "correct answer:"))
}

/// `A) text`, `A. text` or `(A) text`.
fn option_line(line: &str) -> Option<(char, &str)> {
    let body = line.strip_prefix('(').unwrap_or(line);
    let mut chars = body.char_indices();
    let (_, letter) = chars.next()?;
    let (sep_idx, sep) = chars.next()?;
    if !letter.is_ascii_uppercase() || !(sep == ')' || sep == '.') {
        return None;
    }
    let text = &body[sep_idx + 1..];
    // "A.B" style abbreviations are not option markers.
    if !text.is_empty() && !text.starts_with(char::is_whitespace) {
        return None;
    }
    Some((letter, text.trim()))
}

/// Splits a letter list such as `[A, C and D].` into tokens. In lenient mode
/// the list ends at the first token that is not a single letter.
fn parse_letter_list(text: &str, mode: ParseMode) -> Result<BTreeSet<char>, ParseError> {
    let cleaned: String = text
        .chars()
        .map(|c| match c {
            '[' | ']' | '(' | ')' | '{' | '}' | '"' | '\'' | '*' | '`' | ',' | ';' | '/' | '&' => ' ',
            c => c,
        })
        .collect();
    let mut letters = BTreeSet::new();
    for raw in cleaned.split_whitespace() {
        let token = raw.trim_end_matches(['.', ':', '!']);
        if token.is_empty() || token.eq_ignore_ascii_case("and") {
            continue;
        }
        let mut chars = token.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => {
                letters.insert(c.to_ascii_uppercase());
            }
            _ if mode == ParseMode::Lenient && !letters.is_empty() => break,
            _ => return Err(ParseError::UnexpectedToken(token.to_string())),
        }
    }
    Ok(letters)
}

pub fn parse_question_block(text: &str, expected_options: usize) -> Result<ParsedQuestion, ParseError> {
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&expected_options) {
        return Err(ParseError::ExpectedOptionsOutOfRange(expected_options));
    }
    let lines: Vec<String> = text.lines().map(strip_markdown).collect();

    let start = lines
        .iter()
        .position(|l| after_marker(l, "question:").is_some())
        .ok_or(ParseError::MissingQuestionMarker)?;

    let mut stem_parts: Vec<&str> = Vec::new();
    if let Some(first) = after_marker(&lines[start], "question:") {
        if !first.is_empty() {
            stem_parts.push(first);
        }
    }

    let mut idx = start + 1;
    while idx < lines.len() {
        let line = lines[idx].as_str();
        if after_marker(line, "options:").is_some()
            || option_line(line).is_some()
            || correct_marker(line).is_some()
        {
            break;
        }
        if !line.is_empty() {
            stem_parts.push(line);
        }
        idx += 1;
    }
    let stem = stem_parts.join("\n");
    if stem.is_empty() {
        return Err(ParseError::EmptyStem);
    }

    let mut options: Vec<(char, String)> = Vec::new();
    let mut correct_text: Option<String> = None;
    while idx < lines.len() {
        let line = lines[idx].as_str();
        idx += 1;
        if let Some(rest) = correct_marker(line) {
            let rest = if rest.is_empty() {
                lines[idx..]
                    .iter()
                    .find(|l| !l.is_empty())
                    .map(String::as_str)
                    .unwrap_or("")
            } else {
                rest
            };
            correct_text = Some(rest.to_string());
            break;
        }
        if let Some(rest) = after_marker(line, "options:") {
            if rest.is_empty() {
                continue;
            }
        }
        if let Some((letter, body)) = option_line(line) {
            options.push((letter, body.to_string()));
        } else if !line.is_empty() {
            if let Some((_, body)) = options.last_mut() {
                if !body.is_empty() {
                    body.push(' ');
                }
                body.push_str(line);
            }
        }
    }

    let mut map = BTreeMap::new();
    for (letter, body) in &options {
        if map.insert(*letter, body.clone()).is_some() {
            return Err(ParseError::DuplicateOption(*letter));
        }
    }
    if options.len() != expected_options {
        return Err(ParseError::OptionCountMismatch {
            expected: expected_options,
            found: options.len(),
        });
    }
    for (i, (letter, body)) in options.iter().enumerate() {
        let expected = (b'A' + i as u8) as char;
        if *letter != expected {
            return Err(ParseError::NonContiguousOptions {
                expected,
                found: *letter,
            });
        }
        if body.is_empty() {
            return Err(ParseError::EmptyOption(*letter));
        }
    }

    let correct_text = correct_text.ok_or(ParseError::MissingCorrectAnswers)?;
    let correct = parse_letter_list(&correct_text, ParseMode::Lenient)?;
    if correct.is_empty() {
        return Err(ParseError::EmptyCorrectAnswers);
    }
    if let Some(bad) = correct.iter().find(|c| !map.contains_key(c)) {
        return Err(ParseError::CorrectOutOfRange(*bad));
    }

    Ok(ParsedQuestion {
        stem,
        options: map,
        correct,
    })
}

fn find_last_marker(text: &str) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    lower.rfind("answer:").map(|i| i + "answer:".len())
}

pub fn parse_answer(
    text: &str,
    valid_letters: &BTreeSet<char>,
    mode: ParseMode,
) -> Result<ParsedAnswer, ParseError> {
    if mode == ParseMode::Strict {
        let trimmed = text.trim();
        let single_line = !trimmed.contains('\n');
        let starts = trimmed.starts_with("Answer:");
        let once = trimmed.to_ascii_lowercase().matches("answer:").count() == 1;
        if !(single_line && starts && once) {
            return Err(if find_last_marker(text).is_none() {
                ParseError::MissingAnswerMarker
            } else {
                ParseError::StrictFormat
            });
        }
    }

    let letters = match find_last_marker(text) {
        Some(start) => {
            let mut lines = text[start..].lines();
            let first = lines.next().unwrap_or("").trim();
            let selection = if first.replace(['*', '_'], "").trim().is_empty() {
                lines.map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
            } else {
                first
            };
            parse_letter_list(selection, mode)?
        }
        // A bare one-line list such as "A, C, D" is accepted leniently, but
        // only when every token is a letter.
        None if mode == ParseMode::Lenient && !text.trim().is_empty() && !text.trim().contains('\n') => {
            parse_letter_list(text.trim(), ParseMode::Strict).map_err(|_| ParseError::MissingAnswerMarker)?
        }
        None => return Err(ParseError::MissingAnswerMarker),
    };
    if letters.is_empty() {
        return Err(ParseError::EmptyAnswer);
    }
    if let Some(bad) = letters.iter().find(|c| !valid_letters.contains(c)) {
        return Err(ParseError::InvalidLetter(*bad));
    }
    Ok(ParsedAnswer { letters })
}

/// `A) text` lines joined by newlines, as shown to the model in the Test step.
pub fn render_options(options: &BTreeMap<char, String>) -> String {
    options
        .iter()
        .map(|(letter, text)| format!("{letter}) {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_letters(letters: &BTreeSet<char>) -> String {
    letters
        .iter()
        .map(char::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Renders a question in the format the query prompt asks the model for.
pub fn render_question(question: &ParsedQuestion) -> String {
    format!(
        "Question: {}\nOptions:\n{}\nCorrect Answers: {}",
        question.stem,
        render_options(&question.options),
        render_letters(&question.correct)
    )
}

pub fn render_answer(letters: &BTreeSet<char>) -> String {
    format!("Answer: {}", render_letters(letters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GRAPH_THEORY_BLOCK: &str = include_str!("../tests/fixtures/graph_theory_block.txt");

    fn letters(s: &str) -> BTreeSet<char> {
        s.chars().collect()
    }

    fn a_to(n: usize) -> BTreeSet<char> {
        (0..n).map(|i| (b'A' + i as u8) as char).collect()
    }

    #[test]
    fn parses_sample_block() {
        let q = parse_question_block(GRAPH_THEORY_BLOCK, 10).unwrap();
        assert_eq!(
            q.stem,
            "Explain the key characteristics of graph theory as a mathematical concept."
        );
        assert_eq!(q.options.len(), 10);
        assert_eq!(q.correct, letters("ACDGI"));
        assert!(q.options[&'C'].contains("Königsberg"));
    }

    #[test]
    fn tolerates_chatter_markdown_and_dot_markers() {
        let text = "Sure! Here is a question.\n\n**Question:** What is 2+2?\n\n**Options:**\nA. 3\nB. 4\nC. four\n   spelled out\nD. 5\n\n**Correct Answers:** [B, C]\n\nLet me know if you need more.";
        let q = parse_question_block(text, 4).unwrap();
        assert_eq!(q.stem, "What is 2+2?");
        assert_eq!(q.options[&'C'], "four spelled out");
        assert_eq!(q.correct, letters("BC"));
    }

    #[test]
    fn correct_answers_on_following_line() {
        let text = "Question: Pick.\nA) x\nB) y\nCorrect Answers:\nB";
        assert_eq!(parse_question_block(text, 2).unwrap().correct, letters("B"));
    }

    #[test]
    fn question_block_errors() {
        let four = "Question: Q?\nA) a\nB) b\nC) c\nD) d\nCorrect Answers: A";
        assert_eq!(
            parse_question_block(four, 10),
            Err(ParseError::OptionCountMismatch {
                expected: 10,
                found: 4
            })
        );
        let out_of_range = GRAPH_THEORY_BLOCK.replace("A, C, D, G, I.", "K");
        assert_eq!(
            parse_question_block(&out_of_range, 10),
            Err(ParseError::CorrectOutOfRange('K'))
        );
        assert_eq!(
            parse_question_block("A) a\nB) b\nCorrect Answers: A", 2),
            Err(ParseError::MissingQuestionMarker)
        );
        assert_eq!(
            parse_question_block("Question: Q?\nA) a\nB) b", 2),
            Err(ParseError::MissingCorrectAnswers)
        );
        assert_eq!(
            parse_question_block("Question: Q?\nA) a\nB) b\nCorrect Answers: ", 2),
            Err(ParseError::EmptyCorrectAnswers)
        );
        assert_eq!(
            parse_question_block("Question: Q?\nA) a\nA) b\nCorrect Answers: A", 2),
            Err(ParseError::DuplicateOption('A'))
        );
        assert_eq!(
            parse_question_block("Question: Q?\nA) a\nC) b\nCorrect Answers: A", 2),
            Err(ParseError::NonContiguousOptions {
                expected: 'B',
                found: 'C'
            })
        );
        assert_eq!(
            parse_question_block(four, 1),
            Err(ParseError::ExpectedOptionsOutOfRange(1))
        );
    }

    #[test]
    fn answer_extraction() {
        let valid = a_to(10);
        let p = |t: &str| parse_answer(t, &valid, ParseMode::Lenient).map(|a| a.letters);
        assert_eq!(p("Answer: A, C"), Ok(letters("AC")));
        assert_eq!(
            p("I believe the best choices are...\nAnswer: [B and D]"),
            Ok(letters("BD"))
        );
        assert_eq!(p("The answer is obvious."), Err(ParseError::MissingAnswerMarker));
        assert_eq!(p("I think B"), Err(ParseError::MissingAnswerMarker));
        assert_eq!(p(" A, C, D, G, I \n"), Ok(letters("ACDGI")));
        assert_eq!(p("A\nC"), Err(ParseError::MissingAnswerMarker));
        assert_eq!(p("answer: a c"), Ok(letters("AC")));
        assert_eq!(p("Answer: B\nWait, no.\nFinal Answer: **C**"), Ok(letters("C")));
        assert_eq!(p("**Answer:**\n[A, C, D, G, I]."), Ok(letters("ACDGI")));
        assert_eq!(p("Answer: A) vertices and edges"), Ok(letters("A")));
        assert_eq!(p("Answer: []"), Err(ParseError::EmptyAnswer));
        assert_eq!(p("Answer: K"), Err(ParseError::InvalidLetter('K')));
        assert_eq!(
            p("Answer: none of these"),
            Err(ParseError::UnexpectedToken("none".into()))
        );
    }

    #[test]
    fn strict_mode_rejects_preamble() {
        let valid = a_to(4);
        let s = |t: &str| parse_answer(t, &valid, ParseMode::Strict).map(|a| a.letters);
        assert_eq!(s("Answer: A, C"), Ok(letters("AC")));
        assert_eq!(s("Thinking...\nAnswer: A"), Err(ParseError::StrictFormat));
        assert_eq!(s("Answer: A) text"), Err(ParseError::UnexpectedToken("text".into())));
        assert_eq!(s("no marker"), Err(ParseError::MissingAnswerMarker));
    }

    #[test]
    fn canonical_keys() {
        assert_eq!(canonicalize(&letters("CA")).unwrap().as_str(), "AC");
        assert_eq!(canonicalize(&letters("B")).unwrap().as_str(), "B");
        assert_eq!(
            canonicalize(&letters("AC")).unwrap(),
            canonicalize(&letters("CA")).unwrap()
        );
        assert_eq!(canonicalize(&BTreeSet::new()), Err(ParseError::EmptyLetterSet));
        assert_eq!(canonicalize(&letters("ca")).unwrap().as_str(), "AC");
    }

    fn arb_question() -> impl Strategy<Value = ParsedQuestion> {
        (2usize..=26).prop_flat_map(|n| {
            (
                "[A-Za-z0-9][A-Za-z0-9 ,?']{0,40}",
                prop::collection::vec("[a-z0-9][a-z0-9 ,]{0,20}[a-z0-9]", n),
                prop::collection::btree_set(0..n, 1..=n),
            )
                .prop_map(move |(stem, texts, correct)| ParsedQuestion {
                    stem: stem.trim().to_string(),
                    options: texts
                        .into_iter()
                        .enumerate()
                        .map(|(i, t)| ((b'A' + i as u8) as char, t))
                        .collect(),
                    correct: correct.into_iter().map(|i| (b'A' + i as u8) as char).collect(),
                })
        })
    }

    proptest! {
        #[test]
        fn question_round_trip(q in arb_question()) {
            prop_assume!(!q.stem.is_empty());
            let parsed = parse_question_block(&render_question(&q), q.options.len()).unwrap();
            prop_assert_eq!(parsed, q);
        }

        #[test]
        fn answer_round_trip(n in 2usize..=26, picks in prop::collection::btree_set(0usize..26, 1..6)) {
            let valid = a_to(n);
            let set: BTreeSet<char> = picks.into_iter().filter(|i| *i < n).map(|i| (b'A' + i as u8) as char).collect();
            prop_assume!(!set.is_empty());
            for mode in [ParseMode::Lenient, ParseMode::Strict] {
                let parsed = parse_answer(&render_answer(&set), &valid, mode).unwrap();
                prop_assert_eq!(&parsed.letters, &set);
            }
        }

        #[test]
        fn parsers_never_panic(text in "\\PC{0,400}", n in 0usize..30) {
            let _ = parse_question_block(&text, n);
            let _ = parse_answer(&text, &a_to(5), ParseMode::Lenient);
            let _ = parse_answer(&text, &a_to(5), ParseMode::Strict);
        }

        #[test]
        fn parsers_never_panic_on_near_miss(body in "[A-Z\\)\\.: \\n\\[\\],a-z]{0,200}") {
            let text = format!("Question: {body}\nCorrect Answers: {body}\nAnswer: {body}");
            let _ = parse_question_block(&text, 4);
            let _ = parse_answer(&text, &a_to(4), ParseMode::Lenient);
        }
    }
}
