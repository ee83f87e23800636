//! The rule loop: evaluate, cluster the failures, gate one expert rule per
//! offered cluster, and repeat until no candidate is accepted.
//!
//! Run state is a fold over the event log, so replaying the log rebuilds it.

pub mod events;
pub mod pipeline;
pub mod report;
pub mod session;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use events::{Evaluation, Event, EventLog, GateResult};
pub use pipeline::{ClusteringSnapshot, Corpus, Evaluator, InstanceResult};
pub use report::{build_report, render_markdown, Report};
pub use session::{ClusterMember, ClusterMemberRow, ClusterView, EvalJob, GateJob, RunSession, RunStore, Submission};

use crate::agent::{PromptTemplate, Rule, RuleSet};
use crate::error::{Error, Result};
use crate::features::DEFAULT_MIN_FREQ;
use crate::stats::{DeltaEm, McNemarResult, PairedOutcome, Thresholds, Verdict};

/// Candidates tried per outer iteration before the loop stops.
pub const MAX_ATTEMPTS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub thresholds: Thresholds,
    /// Reject an accepted rule when it lowers global EM.
    #[serde(default)]
    pub global_gate: bool,
    pub min_freq: usize,
    pub template: PromptTemplate,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            thresholds: Thresholds::default(),
            global_gate: false,
            min_freq: DEFAULT_MIN_FREQ,
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Evaluating,
    AwaitingRule,
    Gating,
    Finished,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Evaluating => "evaluating",
            Phase::AwaitingRule => "awaiting_rule",
            Phase::Gating => "gating",
            Phase::Finished => "finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// No failed instances left.
    Converged,
    /// Fewer non-noise clusters than the attempt index.
    ClustersExhausted,
    /// Both attempts of an iteration were rejected.
    AttemptsExhausted,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Gated,
    Inconclusive,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub iteration: u32,
    pub attempt: u32,
    pub cluster_id: i32,
    pub members: Vec<String>,
    pub prompt_version: String,
    pub base_version: String,
    pub rule: Rule,
    pub status: CandidateStatus,
    pub gate: Option<GateResult>,
    pub inconclusive_reason: Option<String>,
}

/// A committed candidate: one row of the iteration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub attempt: u32,
    pub candidate_id: String,
    pub prompt_version: String,
    pub base_version: String,
    pub cluster_id: i32,
    pub cluster_size: usize,
    pub members: Vec<String>,
    pub rule: Rule,
    pub pairs: Vec<PairedOutcome>,
    pub mcnemar: McNemarResult,
    pub delta_local: DeltaEm,
    pub global_em: Option<f64>,
    pub delta_global: Option<f64>,
    pub verdict: Verdict,
    #[serde(default)]
    pub rejected_by_global_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub dataset_hash: String,
    pub model: String,
    pub instance_count: usize,
    pub config: LoopConfig,
    pub phase: Phase,
    pub finish_reason: Option<FinishReason>,
    pub rules: RuleSet,
    /// Outer iteration of the current clustering; 0 before the first pass.
    pub iteration: u32,
    /// Attempt index within the iteration, 1 or 2.
    pub attempt: u32,
    pub evaluations: Vec<Evaluation>,
    /// Index into `evaluations` of the pass the current clustering came from.
    pub base_evaluation: Option<usize>,
    pub clusterings: BTreeMap<u32, ClusteringSnapshot>,
    /// Evaluation index each clustering was built from.
    pub clustered_from: BTreeMap<u32, usize>,
    pub candidates: Vec<CandidateRecord>,
    pub history: Vec<IterationRecord>,
    pending_global: Option<usize>,
    versions: u32,
    request_ids: BTreeMap<String, String>,
}

fn corrupt(message: impl Into<String>) -> Error {
    Error::CorruptLog {
        line: 0,
        message: message.into(),
    }
}

impl RunState {
    pub fn replay(events: &[Event]) -> Result<RunState> {
        let (first, rest) = events.split_first().ok_or_else(|| corrupt("empty event log"))?;
        let mut state = match first {
            Event::RunCreated {
                run_id,
                dataset_hash,
                model,
                instance_count,
                config,
            } => RunState {
                run_id: run_id.clone(),
                dataset_hash: dataset_hash.clone(),
                model: model.clone(),
                instance_count: *instance_count,
                config: config.clone(),
                phase: Phase::Evaluating,
                finish_reason: None,
                rules: RuleSet::new(),
                iteration: 0,
                attempt: 1,
                evaluations: Vec::new(),
                base_evaluation: None,
                clusterings: BTreeMap::new(),
                clustered_from: BTreeMap::new(),
                candidates: Vec::new(),
                history: Vec::new(),
                pending_global: None,
                versions: 1,
                request_ids: BTreeMap::new(),
            },
            _ => return Err(corrupt("log does not start with run_created")),
        };
        for (i, e) in rest.iter().enumerate() {
            state.apply(e).map_err(|err| Error::CorruptLog {
                line: i + 2,
                message: err.to_string(),
            })?;
        }
        Ok(state)
    }

    /// Applies one event. Operations validate before emitting, so a failure
    /// here means the log is inconsistent.
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        match event {
            Event::RunCreated { .. } => return Err(corrupt("second run_created")),
            Event::Evaluated(ev) => {
                self.expect_phase(Phase::Evaluating)?;
                let base_em = self.base().map(Evaluation::em);
                self.evaluations.push((**ev).clone());
                if let Some(h) = self.pending_global.take() {
                    let em = ev.em();
                    let delta = base_em.map(|b| em - b);
                    let record = &mut self.history[h];
                    record.global_em = Some(em);
                    record.delta_global = delta;
                    if self.config.global_gate && delta.is_some_and(|d| d < 0.0) {
                        record.verdict = Verdict::Rejected;
                        record.rejected_by_global_gate = true;
                        self.rules.pop();
                        self.advance_after_reject();
                    }
                }
            }
            Event::Clustered { iteration, snapshot } => {
                self.expect_phase(Phase::Evaluating)?;
                if self.evaluations.is_empty() {
                    return Err(corrupt("clustering without evaluation"));
                }
                self.base_evaluation = Some(self.evaluations.len() - 1);
                self.iteration = *iteration;
                self.attempt = 1;
                self.clusterings.insert(*iteration, (**snapshot).clone());
                self.clustered_from.insert(*iteration, self.evaluations.len() - 1);
                if snapshot.errors.is_empty() {
                    self.finish(FinishReason::Converged);
                } else if snapshot.ranked.is_empty() {
                    self.finish(FinishReason::ClustersExhausted);
                } else {
                    self.phase = Phase::AwaitingRule;
                }
            }
            Event::CandidateSubmitted {
                candidate_id,
                request_id,
                iteration,
                attempt,
                cluster_id,
                members,
                prompt_version,
                rule,
            } => {
                self.expect_phase(Phase::AwaitingRule)?;
                let base_version = self.base().map(|e| e.prompt_version.clone()).unwrap_or_default();
                self.candidates.push(CandidateRecord {
                    candidate_id: candidate_id.clone(),
                    iteration: *iteration,
                    attempt: *attempt,
                    cluster_id: *cluster_id,
                    members: members.clone(),
                    prompt_version: prompt_version.clone(),
                    base_version,
                    rule: rule.clone(),
                    status: CandidateStatus::Pending,
                    gate: None,
                    inconclusive_reason: None,
                });
                self.versions += 1;
                if let Some(r) = request_id {
                    self.request_ids.insert(format!("submit:{r}"), candidate_id.clone());
                }
                self.phase = Phase::Gating;
            }
            Event::CandidateGated { candidate_id, gate } => {
                self.expect_phase(Phase::Gating)?;
                let c = self.candidate_mut(candidate_id)?;
                c.status = CandidateStatus::Gated;
                c.gate = Some((**gate).clone());
                self.phase = Phase::AwaitingRule;
            }
            Event::CandidateInconclusive { candidate_id, reason } => {
                self.expect_phase(Phase::Gating)?;
                let c = self.candidate_mut(candidate_id)?;
                c.status = CandidateStatus::Inconclusive;
                c.inconclusive_reason = Some(reason.clone());
                self.phase = Phase::AwaitingRule;
            }
            Event::CandidateCommitted { candidate_id, request_id } => {
                self.expect_phase(Phase::AwaitingRule)?;
                let size = self.offered_cluster().map(|c| c.size).unwrap_or(0);
                let c = self.candidate_mut(candidate_id)?;
                let gate = c.gate.clone().ok_or_else(|| corrupt("commit of ungated candidate"))?;
                c.status = CandidateStatus::Committed;
                let record = IterationRecord {
                    iteration: c.iteration,
                    attempt: c.attempt,
                    candidate_id: c.candidate_id.clone(),
                    prompt_version: c.prompt_version.clone(),
                    base_version: c.base_version.clone(),
                    cluster_id: c.cluster_id,
                    cluster_size: size,
                    members: c.members.clone(),
                    rule: c.rule.clone(),
                    pairs: gate.pairs,
                    mcnemar: gate.mcnemar,
                    delta_local: gate.delta_local,
                    global_em: None,
                    delta_global: None,
                    verdict: gate.verdict,
                    rejected_by_global_gate: false,
                };
                let rule = c.rule.clone();
                if let Some(r) = request_id {
                    self.request_ids.insert(format!("commit:{r}"), candidate_id.clone());
                }
                self.history.push(record);
                if gate.verdict == Verdict::Accepted {
                    self.rules.push(rule)?;
                    self.pending_global = Some(self.history.len() - 1);
                    self.phase = Phase::Evaluating;
                } else {
                    self.advance_after_reject();
                }
            }
            Event::Stopped => {
                if matches!(self.phase, Phase::Gating | Phase::Finished) {
                    return Err(corrupt(format!("stop in phase {}", self.phase.as_str())));
                }
                self.finish(FinishReason::Stopped);
            }
        }
        Ok(())
    }

    fn expect_phase(&self, phase: Phase) -> Result<()> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(corrupt(format!("expected phase {}, found {}", phase.as_str(), self.phase.as_str())))
        }
    }

    fn finish(&mut self, reason: FinishReason) {
        self.phase = Phase::Finished;
        self.finish_reason = Some(reason);
    }

    fn advance_after_reject(&mut self) {
        if self.attempt >= MAX_ATTEMPTS {
            self.finish(FinishReason::AttemptsExhausted);
            return;
        }
        self.attempt += 1;
        if self.offered_cluster().is_none() {
            self.finish(FinishReason::ClustersExhausted);
        } else {
            self.phase = Phase::AwaitingRule;
        }
    }

    fn candidate_mut(&mut self, id: &str) -> Result<&mut CandidateRecord> {
        self.candidates
            .iter_mut()
            .find(|c| c.candidate_id == id)
            .ok_or_else(|| corrupt(format!("unknown candidate {id}")))
    }

    pub fn candidate(&self, id: &str) -> Option<&CandidateRecord> {
        self.candidates.iter().find(|c| c.candidate_id == id)
    }

    /// The pass the current clustering was built from.
    pub fn base(&self) -> Option<&Evaluation> {
        self.base_evaluation.map(|i| &self.evaluations[i])
    }

    /// The pass a recorded clustering was built from.
    pub fn evaluation_for(&self, iteration: u32) -> Option<&Evaluation> {
        self.clustered_from.get(&iteration).map(|&i| &self.evaluations[i])
    }

    pub fn clustering(&self) -> Option<&ClusteringSnapshot> {
        self.clusterings.get(&self.iteration)
    }

    /// The cluster offered at the current attempt.
    pub fn offered_cluster(&self) -> Option<crate::clustering::RankedCluster> {
        self.clustering()?.ranked.get(self.attempt as usize - 1).copied()
    }

    pub fn next_version(&self) -> String {
        format!("V{}", self.versions + 1)
    }

    pub fn current_version(&self) -> String {
        self.base().map(|e| e.prompt_version.clone()).unwrap_or_else(|| "V1".into())
    }

    pub(crate) fn candidate_for_request(&self, kind: &str, request_id: &str) -> Option<&String> {
        self.request_ids.get(&format!("{kind}:{request_id}"))
    }

    pub fn accepted_count(&self) -> usize {
        self.history.iter().filter(|r| r.verdict == Verdict::Accepted).count()
    }
}
