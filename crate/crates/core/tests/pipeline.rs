mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{catalog, config, oracle_mock, pipeline, store_snapshot};
use eqt_core::client::{AnswerPolicy, MockBackend, MockReply, RequestKey};
use eqt_core::metrics::Prediction;
use eqt_core::pipeline::{FailureEvent, RunStore, Stage};
use eqt_core::prompt::TemplateId;

#[test]
fn counts_for_small_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(2, 2), &["m"], 2, 1, tmp.path());
    let summary = pipeline(cfg, oracle_mock(1)).run_full().unwrap();
    assert_eq!(summary.explanations, 4);
    assert_eq!(summary.question_groups, 8);
    assert_eq!(summary.answer_records, 16);
    assert!(!summary.has_partial_failures());

    let store = RunStore::open(tmp.path()).unwrap();
    for group in store.groups() {
        assert_eq!(group.paraphrased_stems.len(), 1);
        assert_ne!(group.paraphrased_stems[0], group.original.stem);
    }
}

#[test]
fn oracle_answers_every_variant_correctly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(2, 3), &["m"], 5, 3, tmp.path());
    pipeline(cfg, oracle_mock(2)).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    assert_eq!(store.answers().len(), 6 * 20);
    for a in store.answers() {
        assert_eq!(a.predicted.answer(), Some(&a.correct), "{}", a.raw_text);
    }
}

#[test]
fn scripted_explanation_is_stored_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(catalog(1, 1), &["m"], 1, 0, tmp.path());
    cfg.concept_set = eqt_core::catalog::parse_catalog("# Math | math\n- graph theory\n").unwrap();
    let mock = MockBackend::seeded(3).with_answers(AnswerPolicy::Oracle).script(
        RequestKey::new(TemplateId::Explain, "graph theory"),
        MockReply::Text("Graph theory is ...".into()),
    );
    pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    let e = store.explanation("m", "math", "graph theory").unwrap();
    assert_eq!(e.text, "Graph theory is ...");
}

#[test]
fn zero_paraphrases_gives_singleton_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 2), &["m"], 3, 0, tmp.path());
    let mock = oracle_mock(4);
    pipeline(cfg, mock.clone()).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    assert_eq!(store.groups().len(), 6);
    assert!(store.groups().iter().all(|g| g.variant_count() == 1));
    assert_eq!(store.answers().len(), 6);
    assert_eq!(mock.calls_of(TemplateId::Paraphrase), 0);
}

#[test]
fn explanation_failure_skips_concept() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 2), &["m"], 2, 1, tmp.path());
    let mock = MockBackend::seeded(5)
        .with_answers(AnswerPolicy::Oracle)
        .script(RequestKey::new(TemplateId::Explain, "Business concept 1"), MockReply::Fail(400));
    let summary = pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    assert_eq!(summary.explanations, 1);
    assert_eq!(summary.explanation_failures, 1);
    assert_eq!(summary.question_groups, 2);
    assert!(summary.has_partial_failures());
    let store = RunStore::open(tmp.path()).unwrap();
    assert!(store.groups().iter().all(|g| g.concept == "Business concept 0"));
}

#[test]
fn empty_explanation_is_retried_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 2), &["m"], 1, 0, tmp.path());
    let mock = MockBackend::seeded(5)
        .with_answers(AnswerPolicy::Oracle)
        .script(RequestKey::new(TemplateId::Explain, "Business concept 0"), MockReply::Text("  ".into()))
        .script(RequestKey::new(TemplateId::Explain, "Business concept 1"), MockReply::Text("".into()))
        .script(RequestKey::new(TemplateId::Explain, "Business concept 1~retry1"), MockReply::Text("".into()));
    let mock = Arc::new(mock);
    let summary = pipeline(cfg, mock.clone()).run_full().unwrap();
    assert_eq!(mock.calls_of(TemplateId::Explain), 4);
    assert_eq!(summary.explanations, 1);
    assert_eq!(summary.explanation_failures, 1);
    let store = RunStore::open(tmp.path()).unwrap();
    assert_eq!(store.explanations()[0].attempts, 2);
}

#[test]
fn unparseable_question_slot_is_excluded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 1), &["m"], 5, 3, tmp.path());
    let mut mock = MockBackend::seeded(6).with_answers(AnswerPolicy::Oracle);
    for subject in ["Business concept 0#2", "Business concept 0#2~retry1", "Business concept 0#2~retry2"] {
        mock = mock.script(RequestKey::new(TemplateId::Query, subject), MockReply::Text("no question here".into()));
    }
    let mock = Arc::new(mock);
    let summary = pipeline(cfg, mock.clone()).run_full().unwrap();
    assert_eq!(summary.question_groups, 4);
    assert_eq!(summary.question_slot_failures, 1);
    assert_eq!(summary.answer_records, 16);
    assert_eq!(mock.calls_of(TemplateId::Query), 4 + 3);
    let store = RunStore::open(tmp.path()).unwrap();
    let failure = store
        .failures()
        .iter()
        .find(|f| f.event == FailureEvent::QuestionSlotFailed)
        .unwrap();
    assert_eq!(failure.subject, "m/business/0/2");
    assert_eq!(failure.attempts, 3);
}

#[test]
fn regeneration_recovers_a_bad_first_reply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 1), &["m"], 1, 1, tmp.path());
    let mock = MockBackend::seeded(6)
        .with_answers(AnswerPolicy::Oracle)
        .script(RequestKey::new(TemplateId::Query, "Business concept 0#0"), MockReply::Text("garbage".into()));
    let summary = pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    assert_eq!(summary.question_groups, 1);
    assert_eq!(summary.question_slot_failures, 0);
}

#[test]
fn paraphrase_failure_duplicates_original_stem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 1), &["m"], 1, 3, tmp.path());
    let mock = MockBackend::seeded(7)
        .with_answers(AnswerPolicy::Oracle)
        .script(RequestKey::new(TemplateId::Paraphrase, "Business concept 0#0.2"), MockReply::Fail(503))
        .script(RequestKey::new(TemplateId::Paraphrase, "Business concept 0#0.2~retry1"), MockReply::Fail(503));
    let summary = pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    assert_eq!(summary.paraphrase_fallbacks, 1);
    assert!(!summary.has_partial_failures());
    let store = RunStore::open(tmp.path()).unwrap();
    let g = &store.groups()[0];
    assert_eq!(g.paraphrased_stems[1], g.original.stem);
    assert_ne!(g.paraphrased_stems[0], g.original.stem);
    assert_eq!(g.fallback_variants, vec![2]);
    assert_eq!(store.answers().len(), 4);
}

#[test]
fn constant_answers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 2), &["m"], 3, 3, tmp.path());
    let mock = MockBackend::seeded(8).with_answers(AnswerPolicy::Constant(BTreeSet::from(['A'])));
    pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    assert!(store
        .answers()
        .iter()
        .all(|a| a.predicted.answer().map(|x| x.as_str()) == Some("A")));
}

#[test]
fn per_variant_scripting() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 1), &["m"], 1, 3, tmp.path());
    let mut mock = MockBackend::seeded(9).script(
        RequestKey::new(TemplateId::Test, "m/business/0/0#0"),
        MockReply::Text("Answer: A, C".into()),
    );
    for v in 1..=3 {
        mock = mock.script(
            RequestKey::new(TemplateId::Test, format!("m/business/0/0#{v}")),
            MockReply::Text("Answer: A".into()),
        );
    }
    pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    let mut answers: Vec<_> = store.answers().to_vec();
    answers.sort_by_key(|a| a.variant_index);
    let keys: Vec<&str> = answers
        .iter()
        .map(|a| a.predicted.answer().unwrap().as_str())
        .collect();
    assert_eq!(keys, ["AC", "A", "A", "A"]);
}

#[test]
fn unparseable_and_failed_answers_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 1), &["m"], 1, 1, tmp.path());
    let mock = MockBackend::seeded(10)
        .script(RequestKey::new(TemplateId::Test, "m/business/0/0#0"), MockReply::Text("I cannot decide.".into()))
        .script(RequestKey::new(TemplateId::Test, "m/business/0/0#1"), MockReply::Fail(500));
    let summary = pipeline(cfg, Arc::new(mock)).run_full().unwrap();
    assert_eq!(summary.answer_parse_failures, 1);
    assert_eq!(summary.answer_backend_failures, 1);
    assert!(summary.has_partial_failures());
    let store = RunStore::open(tmp.path()).unwrap();
    let a0 = store.answers().iter().find(|a| a.variant_index == 0).unwrap();
    assert_eq!(a0.predicted, Prediction::ParseFailure);
    assert_eq!(a0.raw_text, "I cannot decide.");
    let a1 = store.answers().iter().find(|a| a.variant_index == 1).unwrap();
    assert_eq!(a1.predicted, Prediction::BackendFailure);
    assert!(a1.error.as_deref().unwrap().contains("500"));
}

#[test]
fn resume_after_explain_skips_stored_explanations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(2, 2), &["m"], 2, 1, tmp.path());
    let first = oracle_mock(11);
    let s = pipeline(cfg.clone(), first.clone()).run_until(Some(Stage::Explain)).unwrap();
    assert_eq!(s.stopped_after, Some(Stage::Explain));
    assert_eq!(first.calls_of(TemplateId::Explain), 4);
    assert_eq!(first.call_count(), 4);

    let second = oracle_mock(11);
    let s = pipeline(cfg.clone(), second.clone()).run_full().unwrap();
    assert_eq!(second.calls_of(TemplateId::Explain), 0);
    assert_eq!(s.answer_records, 16);

    let third = oracle_mock(11);
    let s = pipeline(cfg, third.clone()).run_full().unwrap();
    assert_eq!(third.call_count(), 0);
    assert_eq!(s.requests_issued, 0);
}

#[test]
fn interrupted_run_matches_uninterrupted_run() {
    let once = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let mut a = config(catalog(2, 2), &["m"], 2, 2, once.path());
    a.parallelism = 3;
    pipeline(a.clone(), oracle_mock(12)).run_full().unwrap();
    pipeline(a, oracle_mock(12)).run_full().unwrap();

    let b = config(catalog(2, 2), &["m"], 2, 2, split.path());
    pipeline(b.clone(), oracle_mock(12)).run_until(Some(Stage::Query)).unwrap();
    pipeline(b, oracle_mock(12)).run_full().unwrap();

    let strip_dir = |files: Vec<(String, String)>, dir: &std::path::Path| -> Vec<(String, String)> {
        let needle = serde_json::to_string(&dir).unwrap();
        files.into_iter().map(|(n, t)| (n, t.replace(&needle, "\"<dir>\""))).collect()
    };
    let x = strip_dir(store_snapshot(once.path()), once.path());
    let y = strip_dir(store_snapshot(split.path()), split.path());
    // parallelism is part of the recorded config snapshot but not of the hash
    let norm = |files: Vec<(String, String)>| -> Vec<(String, String)> {
        files
            .into_iter()
            .map(|(n, t)| (n, t.lines().filter(|l| !l.contains("\"parallelism\"")).collect::<Vec<_>>().join("\n")))
            .collect()
    };
    assert_eq!(norm(x), norm(y));
}

#[test]
fn same_seed_gives_identical_stores() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = config(catalog(2, 2), &["m1", "m2"], 2, 2, a.path());
    cfg.run_seed = 7;
    pipeline(cfg.clone(), Arc::new(MockBackend::seeded(7))).run_full().unwrap();
    cfg.output_dir = b.path().to_path_buf();
    pipeline(cfg, Arc::new(MockBackend::seeded(7))).run_full().unwrap();
    let logs = |d: &std::path::Path| -> Vec<(String, String)> {
        store_snapshot(d).into_iter().filter(|(n, _)| n.ends_with(".log")).collect()
    };
    assert_eq!(logs(a.path()), logs(b.path()));
    assert_eq!(logs(a.path()).len(), 3);
}

#[test]
fn models_answer_only_their_own_questions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 2), &["m1", "m2"], 2, 1, tmp.path());
    let mock = oracle_mock(13);
    pipeline(cfg, mock.clone()).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    assert_eq!(store.groups().len(), 8);
    assert_eq!(store.answers().len(), 16);
    for a in store.answers() {
        let g = store.group(&a.group_id).unwrap();
        assert_eq!(g.model_id, a.model_id);
    }
    for call in mock.calls() {
        if let Some(key) = &call.key {
            if key.kind == TemplateId::Test {
                assert!(key.subject.starts_with(&format!("{}/", call.model_id)));
            }
        }
    }
}

#[test]
fn cross_model_answering_covers_all_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(catalog(1, 1), &["m1", "m2"], 1, 1, tmp.path());
    cfg.cross_model_answering = true;
    pipeline(cfg, oracle_mock(14)).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    assert_eq!(store.groups().len(), 2);
    assert_eq!(store.answers().len(), 2 * 2 * 2);
}

#[test]
fn test_prompts_never_contain_the_explanation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(2, 2), &["m"], 2, 2, tmp.path());
    let mock = oracle_mock(15);
    pipeline(cfg, mock.clone()).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    let mut checked = 0;
    for call in mock.calls() {
        let key = call.key.as_ref().unwrap();
        if key.kind != TemplateId::Test {
            continue;
        }
        let group = store.group(key.subject.rsplit_once('#').unwrap().0).unwrap();
        let explanation = store
            .explanation(&group.model_id, &group.category, &group.concept)
            .unwrap();
        assert!(!call.prompt_text.contains(&explanation.text));
        checked += 1;
    }
    assert_eq!(checked, 4 * 2 * 3);
}

#[test]
fn variants_share_options_and_correct_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 2), &["m"], 2, 3, tmp.path());
    pipeline(cfg, oracle_mock(16)).run_full().unwrap();
    let store = RunStore::open(tmp.path()).unwrap();
    for a in store.answers() {
        let g = store.group(&a.group_id).unwrap();
        assert_eq!(a.correct, g.correct());
        assert_eq!(g.original.options.len(), 10);
    }
}

#[test]
fn changed_config_is_refused_on_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(catalog(1, 1), &["m"], 1, 1, tmp.path());
    pipeline(cfg.clone(), oracle_mock(17)).run_until(Some(Stage::Explain)).unwrap();
    let mut changed = cfg;
    changed.num_options = 4;
    let err = pipeline(changed, oracle_mock(17)).run_full().unwrap_err();
    assert!(err.to_string().contains("fresh output directory"), "{err}");
}
