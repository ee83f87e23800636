#[path = "support/scripted.rs"]
mod scripted;

use scripted::{corpus, evaluator, offered, scripted_run};
use tabrule_core::rule_loop::{build_report, render_markdown, FinishReason, LoopConfig, Phase, RunStore};
use tabrule_core::stats::Verdict;
use tabrule_core::testkit;

#[test]
fn scripted_loop_is_reproducible_and_bounded() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (log_a, s) = scripted_run(a.path());
    let (log_b, _) = scripted_run(b.path());
    assert_eq!(log_a, log_b, "event logs differ between executions");

    let text = String::from_utf8(log_a).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(a) = v.get("attempt") {
            assert!(a.as_u64().unwrap() <= 2);
        }
    }
    assert!(!text.contains(a.path().to_str().unwrap()));

    let st = s.state();
    assert_eq!(st.rules.texts(), vec![testkit::RULE_PERCENT.to_string(), testkit::RULE_DIFF.to_string()]);
    assert_eq!(st.rules.len(), st.accepted_count());
    assert!(st.history.iter().all(|r| r.attempt <= 2));
    for r in &st.history {
        assert!(r.pairs.iter().all(|p| p.before == 0));
    }
    let report = build_report(st);
    assert_eq!(report.curve.len(), 3);
    assert_eq!(report.curve[0].em_pct, 18.75);
    assert_eq!(report.curve[2].em_pct, 59.38);
    assert_eq!(report.marginal_gains, vec![25.0, 15.63]);
    assert!(report.final_prompt.human.contains("'percentage change' results 'percent' scale\n\n'change in value' is a subtraction\n\nDo not generate"));
    let md = render_markdown(&report);
    assert!(md.contains("| V3 |") || md.contains("| V2 |"));
}

#[test]
fn reopening_replays_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let ev = evaluator(testkit::model());
    let mut s = store.create("r", corpus(), "scripted-fixture", LoopConfig::default()).unwrap();
    s.evaluate(&ev).unwrap();
    let id = s.trial_candidate(&ev, offered(&s), testkit::RULE_NOOP, Some("req-1")).unwrap();
    let before = s.state().clone();
    drop(s);

    let mut s = store.open("r").unwrap();
    assert_eq!(s.state(), &before);
    assert_eq!(s.state().phase, Phase::AwaitingRule);
    // Same request id: no new candidate.
    assert_eq!(s.trial_candidate(&ev, offered(&s), testkit::RULE_NOOP, Some("req-1")).unwrap(), id);
    assert_eq!(s.state().candidates.len(), 1);
    s.commit_candidate(&id, Some("req-2")).unwrap();
    s.commit_candidate(&id, Some("req-2")).unwrap();
    assert_eq!(s.state().history.len(), 1);
    assert_eq!(s.state().attempt, 2);
}

#[test]
fn wrong_phase_and_wrong_cluster_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let ev = evaluator(testkit::model());
    let mut s = store.create("r", corpus(), "scripted-fixture", LoopConfig::default()).unwrap();
    let err = s.submit_candidate(0, "rule", None).unwrap_err();
    assert!(matches!(err, tabrule_core::Error::WrongPhase { .. }));
    s.evaluate(&ev).unwrap();
    assert!(matches!(s.evaluate(&ev).unwrap_err(), tabrule_core::Error::WrongPhase { .. }));
    let other = s.state().clustering().unwrap().ranked[1].label;
    assert!(matches!(s.submit_candidate(other, "rule", None).unwrap_err(), tabrule_core::Error::NotOffered(_)));
    assert!(matches!(s.submit_candidate(offered(&s), " \n ", None).unwrap_err(), tabrule_core::Error::InvalidRule(_)));
    assert!(matches!(store.create("r", corpus(), "m", LoopConfig::default()).err().unwrap(), tabrule_core::Error::Duplicate(_)));
}

#[test]
fn perfect_model_converges_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let mut s = store.create("r", corpus(), "scripted-perfect", LoopConfig::default()).unwrap();
    s.evaluate(&evaluator(testkit::perfect_model())).unwrap();
    assert_eq!(s.state().phase, Phase::Finished);
    assert_eq!(s.state().finish_reason, Some(FinishReason::Converged));
    assert_eq!(s.state().base().unwrap().em(), 1.0);
    let md = render_markdown(&build_report(s.state()));
    assert!(md.contains("converged immediately"));
}

#[test]
fn model_failure_during_gating_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let mut s = store.create("r", corpus(), "scripted-fixture", LoopConfig::default()).unwrap();
    s.evaluate(&evaluator(testkit::model())).unwrap();
    let mut flaky = testkit::model();
    flaky.failing.push(testkit::group("avg")[0].clone());
    let err = s.gate_candidate(&evaluator(flaky), offered(&s), testkit::RULE_NOOP).unwrap_err();
    assert!(matches!(err, tabrule_core::Error::Inconclusive(_)));
    assert_eq!(s.state().phase, Phase::AwaitingRule);
    assert_eq!(s.state().attempt, 1);
    assert!(s.state().history.is_empty());
}

#[test]
fn model_failure_in_global_pass_scores_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let mut s = store.create("r", corpus(), "scripted-perfect", LoopConfig::default()).unwrap();
    let mut m = testkit::perfect_model();
    let failing: Vec<String> = testkit::group("avg");
    m.failing = failing.clone();
    s.evaluate(&evaluator(m)).unwrap();
    let base = s.state().base().unwrap();
    assert_eq!(base.total - base.correct, failing.len());
    let errors = &s.state().clustering().unwrap().errors;
    assert_eq!(errors.len(), 10);
    assert!(errors.iter().all(|e| e.error_type == tabrule_core::scoring::ErrorType::RuntimeError));
    assert!(base.results.iter().filter(|r| r.model_error.is_some()).count() == 10);
}

#[test]
fn global_gate_rolls_back_a_harmful_rule() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path()).unwrap();
    let mut m = testkit::model();
    // The percent rule now breaks every correct `sum` answer and fixes only
    // five of the eight percentage questions: locally +5/-0, globally -1.
    let broken = "def run(v):\n    return (0, '')\n";
    for q in testkit::group("sum") {
        m.set_override(testkit::RULE_PERCENT, &q, broken);
    }
    for q in testkit::group("pct").into_iter().skip(5) {
        m.set_override(testkit::RULE_PERCENT, &q, broken);
    }
    let config = LoopConfig {
        global_gate: true,
        ..LoopConfig::default()
    };
    let ev = evaluator(m);
    let mut s = store.create("r", corpus(), "scripted-fixture", config).unwrap();
    s.evaluate(&ev).unwrap();
    s.gate_candidate(&ev, offered(&s), testkit::RULE_NOOP).unwrap();
    let r = s.gate_candidate(&ev, offered(&s), testkit::RULE_PERCENT).unwrap();
    assert_eq!(r.mcnemar.b, 5);
    assert!(r.delta_global.unwrap() < 0.0);
    assert_eq!(r.verdict, Verdict::Rejected);
    assert!(r.rejected_by_global_gate);
    assert!(s.state().rules.is_empty());
    assert_eq!(s.state().phase, Phase::Finished);
    assert_eq!(s.state().finish_reason, Some(FinishReason::AttemptsExhausted));
    let reopened = store.load_state("r").unwrap();
    assert_eq!(&reopened, s.state());
}
