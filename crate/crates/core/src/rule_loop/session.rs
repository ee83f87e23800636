//! Run directories and the operations that move a run through its phases.
//!
//! Each operation checks the phase, emits events and applies them. Long
//! steps are split into begin/compute/complete so a caller can run the
//! compute part without holding the session.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::events::{read_events, Evaluation, Event, EventLog, GateResult};
use super::pipeline::{cluster_errors, error_records, ClusteringSnapshot, Corpus, Evaluator};
use super::{CandidateStatus, IterationRecord, LoopConfig, Phase, RunState};
use crate::agent::{Rule, RuleOrigin};
use crate::error::{Error, Result};
use crate::sandbox::PredNumber;
use crate::scoring::ErrorType;
use crate::stats::{accept_exact, delta_em_local, mcnemar_exact, PairedOutcome};

const EVENTS_FILE: &str = "events.jsonl";
const CONFIG_FILE: &str = "config.json";
const CORPUS_FILE: &str = "corpus.json";
const PROMPTS_DIR: &str = "prompts";

/// Directory holding one subdirectory per run.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    run_id: String,
    dataset_hash: String,
    model: String,
    config: LoopConfig,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        valid_run_id(run_id) && self.run_dir(run_id).join(EVENTS_FILE).is_file()
    }

    /// Run ids in lexical order.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            if let Some(name) = entry.file_name().to_str() {
                if self.exists(name) {
                    ids.push(name.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// `run-0001`, `run-0002`, … skipping ids already on disk.
    pub fn next_run_id(&self) -> Result<String> {
        let existing = self.list()?;
        let mut n = existing.len() + 1;
        loop {
            let id = format!("run-{n:04}");
            if !self.run_dir(&id).exists() {
                return Ok(id);
            }
            n += 1;
        }
    }

    pub fn create(&self, run_id: &str, corpus: Arc<Corpus>, model: &str, config: LoopConfig) -> Result<RunSession> {
        if !valid_run_id(run_id) {
            return Err(Error::InvalidParameter(format!("run id `{run_id}` must be 1-64 of [A-Za-z0-9_-]")));
        }
        let dir = self.run_dir(run_id);
        if dir.exists() {
            return Err(Error::Duplicate(format!("run {run_id} already exists")));
        }
        std::fs::create_dir_all(dir.join(PROMPTS_DIR)).map_err(|e| Error::io(&dir, e))?;
        let cfg = ConfigFile {
            run_id: run_id.to_string(),
            dataset_hash: corpus.dataset_hash.clone(),
            model: model.to_string(),
            config: config.clone(),
        };
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&cfg)?).map_err(|e| Error::io(&path, e))?;
        corpus.save(&dir.join(CORPUS_FILE))?;
        let created = Event::RunCreated {
            run_id: run_id.to_string(),
            dataset_hash: corpus.dataset_hash.clone(),
            model: model.to_string(),
            instance_count: corpus.len(),
            config,
        };
        let mut log = EventLog::create(&dir.join(EVENTS_FILE))?;
        log.append(&created)?;
        let state = RunState::replay(std::slice::from_ref(&created))?;
        let session = RunSession { dir, state, log, corpus };
        session.write_prompt_asset("V1", &[])?;
        Ok(session)
    }

    /// Reopens a run by replaying its log. A candidate left pending by an
    /// interrupted process is marked inconclusive.
    pub fn open(&self, run_id: &str) -> Result<RunSession> {
        if !self.exists(run_id) {
            return Err(Error::NotFound(format!("run {run_id}")));
        }
        let dir = self.run_dir(run_id);
        let (log, events) = EventLog::open(&dir.join(EVENTS_FILE))?;
        let state = RunState::replay(&events)?;
        let corpus = Corpus::open(&dir.join(CORPUS_FILE), state.config.min_freq)?;
        if corpus.dataset_hash != state.dataset_hash {
            return Err(Error::CorruptLog {
                line: 1,
                message: "corpus snapshot does not match the run's dataset hash".into(),
            });
        }
        let mut session = RunSession {
            dir,
            state,
            log,
            corpus: Arc::new(corpus),
        };
        if session.state.phase == Phase::Gating {
            if let Some(c) = session.state.candidates.iter().rev().find(|c| c.status == CandidateStatus::Pending) {
                let event = Event::CandidateInconclusive {
                    candidate_id: c.candidate_id.clone(),
                    reason: "gating interrupted".into(),
                };
                session.emit(event)?;
            }
        }
        Ok(session)
    }

    /// State from the log without opening it for writing.
    pub fn load_state(&self, run_id: &str) -> Result<RunState> {
        if !self.exists(run_id) {
            return Err(Error::NotFound(format!("run {run_id}")));
        }
        RunState::replay(&read_events(&self.run_dir(run_id).join(EVENTS_FILE))?)
    }
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Work order for a global pass.
#[derive(Debug, Clone)]
pub struct EvalJob {
    pub iteration: u32,
    pub prompt_version: String,
    pub rules: Vec<String>,
}

impl EvalJob {
    /// Runs the pass and clusters its failures. Touches no run state.
    pub fn run(&self, evaluator: &Evaluator, corpus: &Corpus) -> Result<(Evaluation, ClusteringSnapshot)> {
        let instances: Vec<_> = corpus.instances.iter().collect();
        let results = evaluator.predict_all(corpus, &instances, &self.rules);
        let correct = results.iter().filter(|r| r.score.em == 1).count();
        let errors = error_records(corpus, &results);
        let evaluation = Evaluation {
            iteration: self.iteration,
            prompt_version: self.prompt_version.clone(),
            rules: self.rules.clone(),
            total: results.len(),
            correct,
            results,
        };
        Ok((evaluation, cluster_errors(errors)?))
    }
}

/// Work order for gating one candidate.
#[derive(Debug, Clone)]
pub struct GateJob {
    pub candidate_id: String,
    pub rules: Vec<String>,
    pub members: Vec<String>,
    /// EM of each member before the rule, from the base pass.
    pub before: BTreeMap<String, u8>,
}

impl GateJob {
    /// Re-predicts the members under the extended rule set. A model failure
    /// on any member makes the candidate inconclusive (`Err` with the reason).
    pub fn run(&self, evaluator: &Evaluator, corpus: &Corpus, config: &LoopConfig) -> std::result::Result<GateResult, String> {
        let instances: Vec<_> = self
            .members
            .iter()
            .map(|q| corpus.instance(q).ok_or_else(|| format!("question {q} is not in the corpus")))
            .collect::<std::result::Result<_, _>>()?;
        let results = evaluator.predict_all(corpus, &instances, &self.rules);
        if let Some(r) = results.iter().find(|r| r.model_error.is_some()) {
            return Err(format!(
                "model failed on {}: {}",
                r.prediction.question_id,
                r.model_error.as_deref().unwrap_or_default()
            ));
        }
        let pairs: Vec<PairedOutcome> = results
            .iter()
            .map(|r| PairedOutcome {
                question_id: r.prediction.question_id.clone(),
                before: self.before.get(&r.prediction.question_id).copied().unwrap_or(0),
                after: r.score.em,
            })
            .collect();
        let mcnemar = mcnemar_exact(&pairs).map_err(|e| e.to_string())?;
        let delta_local = delta_em_local(&pairs).map_err(|e| e.to_string())?;
        let verdict = accept_exact(&delta_local, &mcnemar.p_rational(), &config.thresholds);
        Ok(GateResult {
            results,
            pairs,
            mcnemar,
            delta_local,
            verdict,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Submission {
    /// A new candidate; the job still has to run.
    New(GateJob),
    /// The request id was seen before; nothing was emitted.
    Existing(String),
}

/// One row of the cluster table: question, both patterns, both scales,
/// error code and cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMemberRow {
    pub id: usize,
    pub question: String,
    pub calc_pattern: String,
    pub code_calc_pattern: String,
    pub scale: String,
    pub pred_scale: String,
    pub error_type: ErrorType,
    pub cluster_id: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub row: ClusterMemberRow,
    pub question_id: String,
    pub derivation: String,
    pub program: Option<String>,
    pub predicted_value: Option<String>,
    pub truth_value: String,
    pub value_match: u8,
    pub scale_mismatch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub iteration: u32,
    pub attempt: u32,
    pub cluster_id: i32,
    pub size: usize,
    pub members: Vec<ClusterMember>,
}

/// An open run: its state, its log, and the corpus it evaluates.
pub struct RunSession {
    dir: PathBuf,
    state: RunState,
    log: EventLog,
    corpus: Arc<Corpus>,
}

impl RunSession {
    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn events_path(&self) -> &Path {
        self.log.path()
    }

    fn emit(&mut self, event: Event) -> Result<()> {
        // Apply to a copy first so a rejected event never reaches the log.
        let mut next = self.state.clone();
        next.apply(&event)?;
        self.log.append(&event)?;
        self.state = next;
        Ok(())
    }

    fn require(&self, phase: Phase, action: &str) -> Result<()> {
        if self.state.phase == phase {
            Ok(())
        } else {
            Err(Error::WrongPhase {
                phase: self.state.phase.as_str().into(),
                message: format!("{action} needs phase {}", phase.as_str()),
            })
        }
    }

    fn write_prompt_asset(&self, version: &str, rules: &[String]) -> Result<()> {
        let t = &self.state.config.template;
        let text = format!("{}\n\n{}", t.system, t.human_with_rules(rules));
        let path = self.dir.join(PROMPTS_DIR).join(format!("{version}.txt"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn begin_evaluation(&self) -> Result<EvalJob> {
        self.require(Phase::Evaluating, "evaluation")?;
        let prompt_version = match self.state.history.last() {
            Some(r) if r.global_em.is_none() && r.verdict == crate::stats::Verdict::Accepted => r.prompt_version.clone(),
            _ => "V1".into(),
        };
        Ok(EvalJob {
            iteration: self.state.iteration + 1,
            prompt_version,
            rules: self.state.rules.texts(),
        })
    }

    /// Records a finished pass. The clustering is recorded unless the
    /// global gate rolled the rule back.
    pub fn complete_evaluation(&mut self, job: &EvalJob, evaluation: Evaluation, clustering: ClusteringSnapshot) -> Result<()> {
        self.require(Phase::Evaluating, "completing an evaluation")?;
        if job.rules != self.state.rules.texts() {
            return Err(Error::WrongPhase {
                phase: self.state.phase.as_str().into(),
                message: "rule set changed while the evaluation ran".into(),
            });
        }
        self.emit(Event::Evaluated(Box::new(evaluation)))?;
        if self.state.phase == Phase::Evaluating {
            self.emit(Event::Clustered {
                iteration: job.iteration,
                snapshot: Box::new(clustering),
            })?;
        }
        Ok(())
    }

    pub fn evaluate(&mut self, evaluator: &Evaluator) -> Result<()> {
        let job = self.begin_evaluation()?;
        let (evaluation, clustering) = job.run(evaluator, &self.corpus)?;
        self.complete_evaluation(&job, evaluation, clustering)
    }

    /// The cluster at attempt `attempt` of the current iteration.
    pub fn present_cluster(&self, attempt: u32) -> Result<ClusterView> {
        if !matches!(self.state.phase, Phase::AwaitingRule | Phase::Gating) {
            return Err(Error::WrongPhase {
                phase: self.state.phase.as_str().into(),
                message: "clusters are offered only while awaiting a rule".into(),
            });
        }
        if attempt == 0 || attempt > super::MAX_ATTEMPTS {
            return Err(Error::InvalidParameter(format!("attempt must be 1 or 2, got {attempt}")));
        }
        let clustering = self.state.clustering().ok_or_else(|| Error::NotFound("clustering".into()))?;
        let ranked = clustering
            .ranked
            .get(attempt as usize - 1)
            .ok_or_else(|| Error::NotFound(format!("cluster for attempt {attempt}")))?;
        self.cluster_view(self.state.iteration, ranked.label, attempt)
    }

    /// Any cluster of any recorded iteration.
    pub fn cluster_view(&self, iteration: u32, cluster_id: i32, attempt: u32) -> Result<ClusterView> {
        let clustering = self
            .state
            .clusterings
            .get(&iteration)
            .ok_or_else(|| Error::NotFound(format!("iteration {iteration}")))?;
        cluster_view(&self.state, &self.corpus, iteration, clustering, cluster_id, attempt)
    }

    pub fn submit_candidate(&mut self, cluster_id: i32, rule_text: &str, request_id: Option<&str>) -> Result<Submission> {
        if let Some(r) = request_id {
            if let Some(id) = self.state.candidate_for_request("submit", r) {
                return Ok(Submission::Existing(id.clone()));
            }
        }
        self.require(Phase::AwaitingRule, "submitting a candidate")?;
        let offered = self
            .state
            .offered_cluster()
            .ok_or_else(|| Error::NotOffered("no cluster is offered".into()))?;
        if offered.label != cluster_id {
            return Err(Error::NotOffered(format!(
                "attempt {} offers cluster {}, not {cluster_id}",
                self.state.attempt, offered.label
            )));
        }
        let candidate_id = format!("c{}", self.state.candidates.len() + 1);
        let origin = RuleOrigin::Cluster {
            run_id: self.state.run_id.clone(),
            iteration: self.state.iteration,
            cluster_id,
        };
        let rule = Rule::new(format!("{}-{candidate_id}", self.state.run_id), rule_text, origin)?;
        let rules = self.state.rules.with(rule.clone())?.texts();
        let clustering = self.state.clustering().expect("offered cluster implies a clustering");
        let members: Vec<String> = clustering.members(cluster_id).iter().map(|e| e.question_id.clone()).collect();
        let base = self.state.base().expect("clustering implies a base pass");
        let before = members
            .iter()
            .map(|q| (q.clone(), base.result(q).map(|r| r.score.em).unwrap_or(0)))
            .collect();
        let prompt_version = self.state.next_version();
        self.emit(Event::CandidateSubmitted {
            candidate_id: candidate_id.clone(),
            request_id: request_id.map(str::to_string),
            iteration: self.state.iteration,
            attempt: self.state.attempt,
            cluster_id,
            members: members.clone(),
            prompt_version: prompt_version.clone(),
            rule,
        })?;
        self.write_prompt_asset(&prompt_version, &rules)?;
        Ok(Submission::New(GateJob {
            candidate_id,
            rules,
            members,
            before,
        }))
    }

    pub fn complete_gate(&mut self, candidate_id: &str, outcome: std::result::Result<GateResult, String>) -> Result<()> {
        self.require(Phase::Gating, "completing a gate")?;
        let event = match outcome {
            Ok(gate) => Event::CandidateGated {
                candidate_id: candidate_id.to_string(),
                gate: Box::new(gate),
            },
            Err(reason) => Event::CandidateInconclusive {
                candidate_id: candidate_id.to_string(),
                reason,
            },
        };
        self.emit(event)
    }

    /// Gates a candidate without committing it. Returns its id.
    pub fn trial_candidate(&mut self, evaluator: &Evaluator, cluster_id: i32, rule_text: &str, request_id: Option<&str>) -> Result<String> {
        match self.submit_candidate(cluster_id, rule_text, request_id)? {
            Submission::Existing(id) => Ok(id),
            Submission::New(job) => {
                let outcome = job.run(evaluator, &self.corpus, &self.state.config);
                self.complete_gate(&job.candidate_id, outcome)?;
                Ok(job.candidate_id)
            }
        }
    }

    /// Makes a gated candidate the decision for the current attempt.
    /// Committing the same candidate twice is a no-op.
    pub fn commit_candidate(&mut self, candidate_id: &str, request_id: Option<&str>) -> Result<()> {
        let c = self
            .state
            .candidate(candidate_id)
            .ok_or_else(|| Error::NotFound(format!("candidate {candidate_id}")))?;
        if c.status == CandidateStatus::Committed {
            return Ok(());
        }
        if let Some(r) = request_id {
            if self.state.candidate_for_request("commit", r).is_some() {
                return Ok(());
            }
        }
        self.require(Phase::AwaitingRule, "committing a candidate")?;
        match c.status {
            CandidateStatus::Gated => {}
            CandidateStatus::Inconclusive => {
                return Err(Error::Inconclusive(c.inconclusive_reason.clone().unwrap_or_default()));
            }
            _ => {
                return Err(Error::WrongPhase {
                    phase: self.state.phase.as_str().into(),
                    message: format!("candidate {candidate_id} has not been gated"),
                })
            }
        }
        if c.iteration != self.state.iteration || c.attempt != self.state.attempt {
            return Err(Error::WrongPhase {
                phase: self.state.phase.as_str().into(),
                message: format!("candidate {candidate_id} belongs to an earlier attempt"),
            });
        }
        self.emit(Event::CandidateCommitted {
            candidate_id: candidate_id.to_string(),
            request_id: request_id.map(str::to_string),
        })
    }

    /// Gate and commit in one step; an accepted rule is followed by the
    /// global pass under the new prompt.
    pub fn gate_candidate(&mut self, evaluator: &Evaluator, cluster_id: i32, rule_text: &str) -> Result<IterationRecord> {
        let id = self.trial_candidate(evaluator, cluster_id, rule_text, None)?;
        self.commit_candidate(&id, None)?;
        if self.state.phase == Phase::Evaluating {
            self.evaluate(evaluator)?;
        }
        Ok(self
            .state
            .history
            .iter()
            .rev()
            .find(|r| r.candidate_id == id)
            .cloned()
            .expect("committed candidate has a record"))
    }

    pub fn stop(&mut self) -> Result<()> {
        if matches!(self.state.phase, Phase::Gating | Phase::Finished) {
            return Err(Error::WrongPhase {
                phase: self.state.phase.as_str().into(),
                message: "cannot stop now".into(),
            });
        }
        self.emit(Event::Stopped)
    }
}

fn predicted_text(n: Option<PredNumber>) -> Option<String> {
    n.map(|n| match n {
        PredNumber::Finite(d) => d.normalize().to_string(),
        PredNumber::NaN => "NaN".into(),
    })
}

pub(crate) fn cluster_view(
    state: &RunState,
    corpus: &Corpus,
    iteration: u32,
    clustering: &ClusteringSnapshot,
    cluster_id: i32,
    attempt: u32,
) -> Result<ClusterView> {
    let records = clustering.members(cluster_id);
    if records.is_empty() {
        return Err(Error::NotFound(format!("cluster {cluster_id} in iteration {iteration}")));
    }
    let pass = state.evaluation_for(iteration);
    let members = records
        .iter()
        .map(|e| {
            let inst = corpus.instance(&e.question_id);
            let result = pass.and_then(|p| p.result(&e.question_id));
            let outcome = result.map(|r| &r.prediction.outcome);
            ClusterMember {
                row: ClusterMemberRow {
                    id: corpus.ordinal(&e.question_id).unwrap_or(0),
                    question: inst.map(|i| i.question.clone()).unwrap_or_default(),
                    calc_pattern: e.calc_pattern.as_str().to_string(),
                    code_calc_pattern: e.code_calc_pattern.as_str().to_string(),
                    scale: inst.map(|i| i.truth_scale.as_answer_str().to_string()).unwrap_or_default(),
                    pred_scale: outcome.and_then(|o| o.scale_text.clone()).unwrap_or_default(),
                    error_type: e.error_type,
                    cluster_id,
                },
                question_id: e.question_id.clone(),
                derivation: inst.map(|i| i.derivation.clone()).unwrap_or_default(),
                program: result.and_then(|r| r.prediction.program.clone()),
                predicted_value: predicted_text(outcome.and_then(|o| o.number)),
                truth_value: inst.map(|i| i.truth_value.normalize().to_string()).unwrap_or_default(),
                value_match: e.value_match,
                scale_mismatch: e.scale_mismatch,
            }
        })
        .collect::<Vec<_>>();
    Ok(ClusterView {
        iteration,
        attempt,
        cluster_id,
        size: members.len(),
        members,
    })
}
