//! The scripted fixture driven through accept, reject-then-second-cluster
//! and terminate paths.
#![allow(dead_code)]

use std::sync::Arc;

use tabrule_core::agent::{Agent, Generator, PromptTemplate, ScriptedModel};
use tabrule_core::dataset::EvidenceAdapter;
use tabrule_core::rule_loop::{Corpus, Evaluator, LoopConfig, Phase, RunSession, RunStore};
use tabrule_core::sandbox::{Sandbox, SandboxLimits};
use tabrule_core::stats::Verdict;
use tabrule_core::testkit;

pub fn corpus() -> Arc<Corpus> {
    let docs = testkit::documents();
    let hash = Corpus::hash_documents(&docs);
    Arc::new(Corpus::from_documents(&docs, EvidenceAdapter::Strict, hash, 3))
}

pub fn evaluator(model: ScriptedModel) -> Evaluator {
    let sandbox = Arc::new(Sandbox::new(SandboxLimits::default()).unwrap());
    let agent = Agent::new(Arc::new(model) as Arc<dyn Generator>).with_parallelism(4);
    Evaluator::new(agent, sandbox, PromptTemplate::default())
}

pub fn offered(session: &RunSession) -> i32 {
    session.state().offered_cluster().unwrap().label
}

pub fn members(session: &RunSession) -> Vec<String> {
    let mut m: Vec<String> = session.present_cluster(session.state().attempt).unwrap().members.into_iter().map(|m| m.question_id).collect();
    m.sort();
    m
}

pub fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

/// Drives the fixture through all three loop paths and returns the log bytes.
pub fn scripted_run(root: &std::path::Path) -> (Vec<u8>, RunSession) {
    let store = RunStore::new(root).unwrap();
    let ev = evaluator(testkit::model());
    let mut s = store.create("run-0001", corpus(), "scripted-fixture", LoopConfig::default()).unwrap();
    s.evaluate(&ev).unwrap();

    // Iteration 1: the largest cluster is the average group; a no-op rule is
    // rejected and the second cluster (percentage change) gets the fix.
    assert_eq!(s.state().phase, Phase::AwaitingRule);
    assert_eq!(s.state().base().unwrap().correct, testkit::SUM);
    assert_eq!(members(&s), sorted(testkit::group("avg")));
    let r = s.gate_candidate(&ev, offered(&s), testkit::RULE_NOOP).unwrap();
    assert_eq!((r.mcnemar.b, r.verdict), (0, Verdict::Rejected));
    assert_eq!(s.state().attempt, 2);
    assert_eq!(members(&s), sorted(testkit::group("pct")));
    let r = s.gate_candidate(&ev, offered(&s), testkit::RULE_PERCENT).unwrap();
    assert_eq!((r.mcnemar.b, r.mcnemar.c, r.verdict), (8, 0, Verdict::Accepted));
    assert_eq!(r.global_em, Some((testkit::SUM + testkit::PCT) as f64 / 32.0));

    // Iteration 2: the weak average rule fixes 3 of 10 and is rejected; the
    // subtraction rule fixes 5 of 8: ΔEM 62.5 %, p = 0.0625, accepted.
    assert_eq!(s.state().iteration, 2);
    assert_eq!(members(&s), sorted(testkit::group("avg")));
    let r = s.gate_candidate(&ev, offered(&s), testkit::RULE_AVG_WEAK).unwrap();
    assert_eq!((r.mcnemar.b, r.verdict), (testkit::AVG_FIXED as u64, Verdict::Rejected));
    assert_eq!(members(&s), sorted(testkit::group("diff")));
    let r = s.gate_candidate(&ev, offered(&s), testkit::RULE_DIFF).unwrap();
    assert_eq!(r.mcnemar.p_display, "0.06250");
    assert_eq!(r.delta_local.value(), 0.625);
    assert_eq!(r.verdict, Verdict::Accepted);

    // Iteration 3: two rejections end the loop.
    assert_eq!(s.state().iteration, 3);
    s.gate_candidate(&ev, offered(&s), testkit::RULE_NOOP).unwrap();
    if s.state().phase == Phase::AwaitingRule {
        s.gate_candidate(&ev, offered(&s), "Return the answer rounded to two decimals").unwrap();
    }
    assert_eq!(s.state().phase, Phase::Finished);
    let bytes = std::fs::read(s.events_path()).unwrap();
    (bytes, s)
}
