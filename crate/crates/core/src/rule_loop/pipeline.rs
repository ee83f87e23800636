//! One pass of the agent over a set of instances: prompt, generate, extract,
//! execute, score, and (for the global pass) features and clustering.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{extract_program, Agent, GenerationRequest, PromptTemplate};
use crate::clustering::{distance_matrix, grid_search_distances, hdbscan_distances, rank_clusters, select_params, ClusterLabeling, GridSearchRow, RankedCluster};
use crate::dataset::{dataset_hash, filter_with_diagnostics, load_dataset, restrict, EvidenceAdapter, SourceDocument, TestInstance};
use crate::error::{Error, Result};
use crate::features::{code_pattern, crosstab, derivation_pattern, extract_operands, group_rare, vectorize, CalcPattern, CrossTab, ErrorRecord};
use crate::restructure::{restructure_table, ValueList};
use crate::sandbox::{ExecutionOutcome, OperandInfluence, OutcomeKind, ProgramSource, Sandbox};
use crate::scoring::{needs_probe, score, ErrorType, Prediction, ScoreRecord};

/// The filtered instances with their value lists.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dataset_hash: String,
    pub adapter: EvidenceAdapter,
    /// Source documents restricted to the kept questions.
    pub documents: Vec<SourceDocument>,
    pub instances: Vec<TestInstance>,
    value_lists: BTreeMap<String, ValueList>,
    /// Grouped derivation pattern per question id, over the whole corpus.
    calc_patterns: BTreeMap<String, CalcPattern>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    dataset_hash: String,
    adapter: EvidenceAdapter,
    documents: Vec<SourceDocument>,
}

impl Corpus {
    pub fn from_documents(docs: &[SourceDocument], adapter: EvidenceAdapter, dataset_hash: String, min_freq: usize) -> Corpus {
        let outcome = filter_with_diagnostics(docs, adapter);
        let documents = restrict(docs, &outcome.instances);
        let value_lists = documents.iter().map(|d| (d.doc_id.clone(), restructure_table(d))).collect();
        let patterns: Vec<CalcPattern> = outcome.instances.iter().map(|i| derivation_pattern(&i.derivation)).collect();
        let grouped = group_rare(&patterns, min_freq);
        let calc_patterns = outcome.instances.iter().map(|i| i.question_id.clone()).zip(grouped).collect();
        Corpus {
            dataset_hash,
            adapter,
            documents,
            instances: outcome.instances,
            value_lists,
            calc_patterns,
            min_freq,
        }
    }

    /// Loads and filters a dataset file.
    pub fn load(path: &Path, adapter: EvidenceAdapter, min_freq: usize) -> Result<Corpus> {
        let docs = load_dataset(path)?;
        Ok(Corpus::from_documents(&docs, adapter, dataset_hash(path)?, min_freq))
    }

    /// Writes the restricted documents so a run can be reopened without the source file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CorpusFile {
            dataset_hash: self.dataset_hash.clone(),
            adapter: self.adapter,
            documents: self.documents.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn open(path: &Path, min_freq: usize) -> Result<Corpus> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: CorpusFile = serde_json::from_slice(&bytes)?;
        Ok(Corpus::from_documents(&file.documents, file.adapter, file.dataset_hash, min_freq))
    }

    /// Hash of the documents' canonical JSON, for corpora built in memory.
    pub fn hash_documents(docs: &[SourceDocument]) -> String {
        let bytes = serde_json::to_vec(docs).expect("documents serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn table_count(&self) -> usize {
        self.documents.len()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, question_id: &str) -> Option<&TestInstance> {
        self.instances.iter().find(|i| i.question_id == question_id)
    }

    /// 1-based position of the question in the corpus.
    pub fn ordinal(&self, question_id: &str) -> Option<usize> {
        self.instances.iter().position(|i| i.question_id == question_id).map(|p| p + 1)
    }

    pub fn value_list(&self, instance: &TestInstance) -> &ValueList {
        &self.value_lists[&instance.doc_id]
    }

    pub fn calc_pattern(&self, question_id: &str) -> CalcPattern {
        self.calc_patterns.get(question_id).cloned().unwrap_or_else(CalcPattern::other)
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }
}

/// Everything recorded about one instance in one pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub prediction: Prediction,
    /// Set when the model call itself failed; the instance then scores as a runtime error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe: Vec<OperandInfluence>,
    pub score: ScoreRecord,
}

/// Clustering of one global pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSnapshot {
    pub errors: Vec<ErrorRecord>,
    pub crosstab: CrossTab,
    pub grid: Vec<GridSearchRow>,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    /// Label per error record, same order as `errors`.
    pub labels: Vec<i32>,
    pub ranked: Vec<RankedCluster>,
}

impl ClusteringSnapshot {
    pub fn members(&self, label: i32) -> Vec<&ErrorRecord> {
        self.errors.iter().zip(&self.labels).filter(|(_, &l)| l == label).map(|(e, _)| e).collect()
    }

    pub fn label_of(&self, question_id: &str) -> Option<i32> {
        self.errors.iter().position(|e| e.question_id == question_id).map(|i| self.labels[i])
    }
}

pub struct Evaluator {
    pub agent: Agent,
    pub sandbox: Arc<Sandbox>,
    pub template: PromptTemplate,
    /// Incremented once per finished instance, for progress reporting.
    pub progress: Option<Arc<AtomicUsize>>,
}

impl Evaluator {
    pub fn new(agent: Agent, sandbox: Arc<Sandbox>, template: PromptTemplate) -> Self {
        Evaluator {
            agent,
            sandbox,
            template,
            progress: None,
        }
    }

    pub fn with_progress(mut self, counter: Arc<AtomicUsize>) -> Self {
        self.progress = Some(counter);
        self
    }

    fn tick(&self) {
        if let Some(p) = &self.progress {
            p.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn predict_one(&self, corpus: &Corpus, instance: &TestInstance, rules: &[String]) -> InstanceResult {
        let vl = corpus.value_list(instance);
        let prompt = self.template.render(&vl.to_json(false), &instance.question, rules);
        let request = GenerationRequest {
            instance_id: &instance.question_id,
            prompt: &prompt,
            rules,
        };
        let mut prediction = Prediction {
            question_id: instance.question_id.clone(),
            outcome: ExecutionOutcome::failure(OutcomeKind::SyntaxError, "no program found in model response"),
            program: None,
            prompt_hash: prompt.hash(),
            model: self.agent.model_tag(),
        };
        let response = match self.agent.respond(&request) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(question = %instance.question_id, error = %e, "model call failed");
                prediction.outcome = ExecutionOutcome::failure(OutcomeKind::RuntimeError, format!("model error: {e}"));
                return InstanceResult {
                    score: ScoreRecord {
                        question_id: instance.question_id.clone(),
                        em: 0,
                        value_match: 2,
                        scale_mismatch: true,
                        error_type: Some(ErrorType::RuntimeError),
                        fallback_classification: false,
                    },
                    prediction,
                    model_error: Some(e.to_string()),
                    probe: Vec::new(),
                };
            }
        };
        let mut probe = Vec::new();
        if let Ok(program) = extract_program(&response) {
            let source = ProgramSource::python(program.clone());
            prediction.outcome = self.sandbox.execute(&source, vl);
            prediction.program = Some(program);
            if needs_probe(&prediction, instance) {
                probe = self.sandbox.sensitivity_probe(&source, vl, &extract_operands(&instance.derivation));
            }
        }
        let score = score(&prediction, instance, &probe);
        InstanceResult {
            prediction,
            model_error: None,
            probe,
            score,
        }
    }

    /// Predicts every instance, keeping input order.
    pub fn predict_all(&self, corpus: &Corpus, instances: &[&TestInstance], rules: &[String]) -> Vec<InstanceResult> {
        self.agent.map_bounded(instances, |inst| {
            let r = self.predict_one(corpus, inst, rules);
            self.tick();
            r
        })
    }
}

/// Error records for the failed instances, with code patterns grouped over
/// the failures of this pass.
pub fn error_records(corpus: &Corpus, results: &[InstanceResult]) -> Vec<ErrorRecord> {
    let failed: Vec<&InstanceResult> = results.iter().filter(|r| r.score.em == 0).collect();
    let code: Vec<CalcPattern> = failed
        .iter()
        .map(|r| r.prediction.program.as_deref().map(code_pattern).unwrap_or_else(CalcPattern::other))
        .collect();
    let code = group_rare(&code, corpus.min_freq());
    failed
        .iter()
        .zip(code)
        .map(|(r, code_calc_pattern)| ErrorRecord {
            question_id: r.score.question_id.clone(),
            calc_pattern: corpus.calc_pattern(&r.score.question_id),
            code_calc_pattern,
            scale_mismatch: r.score.scale_mismatch,
            value_match: r.score.value_match,
            error_type: r.score.error_type.unwrap_or(ErrorType::CalculationError),
        })
        .collect()
}

/// Features, grid search, parameter choice and the final labeling.
pub fn cluster_errors(errors: Vec<ErrorRecord>) -> Result<ClusteringSnapshot> {
    let table = crosstab(&errors);
    if errors.is_empty() {
        return Ok(ClusteringSnapshot {
            errors,
            crosstab: table,
            grid: Vec::new(),
            min_cluster_size: 0,
            min_samples: 0,
            labels: Vec::new(),
            ranked: Vec::new(),
        });
    }
    let matrix = vectorize(&errors)?;
    let d = distance_matrix(&matrix.rows)?;
    let grid = grid_search_distances(&d)?;
    let (mcs, ms) = select_params(&grid, errors.len())?;
    let labeling: ClusterLabeling = hdbscan_distances(&d, mcs, ms)?;
    let ranked = rank_clusters(&labeling);
    Ok(ClusteringSnapshot {
        errors,
        crosstab: table,
        grid,
        min_cluster_size: mcs,
        min_samples: ms,
        labels: labeling.labels,
        ranked,
    })
}
