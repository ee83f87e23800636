//! The append-only run log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{ClusteringSnapshot, InstanceResult};
use super::LoopConfig;
use crate::agent::Rule;
use crate::error::{Error, Result};
use crate::stats::{DeltaEm, McNemarResult, PairedOutcome, Verdict};

/// One global pass under a fixed rule set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub iteration: u32,
    pub prompt_version: String,
    pub rules: Vec<String>,
    pub results: Vec<InstanceResult>,
    pub correct: usize,
    pub total: usize,
}

impl Evaluation {
    pub fn em(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn result(&self, question_id: &str) -> Option<&InstanceResult> {
        self.results.iter().find(|r| r.prediction.question_id == question_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub results: Vec<InstanceResult>,
    pub pairs: Vec<PairedOutcome>,
    pub mcnemar: McNemarResult,
    pub delta_local: DeltaEm,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunCreated {
        run_id: String,
        dataset_hash: String,
        model: String,
        instance_count: usize,
        config: LoopConfig,
    },
    Evaluated(Box<Evaluation>),
    Clustered {
        iteration: u32,
        snapshot: Box<ClusteringSnapshot>,
    },
    CandidateSubmitted {
        candidate_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
        iteration: u32,
        attempt: u32,
        cluster_id: i32,
        members: Vec<String>,
        prompt_version: String,
        rule: Rule,
    },
    CandidateGated {
        candidate_id: String,
        gate: Box<GateResult>,
    },
    CandidateInconclusive {
        candidate_id: String,
        reason: String,
    },
    CandidateCommitted {
        candidate_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_id: Option<String>,
    },
    Stopped,
}

/// Append-only JSON Lines file of [`Event`]s.
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create_new(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Opens an existing log and reads it. A final line without its newline
    /// is an interrupted write and is cut off; any other bad line is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<Event>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut events = Vec::new();
        let mut good_len = 0usize;
        let reader = BufReader::new(&bytes[..]);
        for (i, line) in reader.split(b'\n').enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let end = good_len + line.len();
            let terminated = end < bytes.len();
            if line.iter().all(u8::is_ascii_whitespace) {
                good_len = end + usize::from(terminated);
                continue;
            }
            if !terminated {
                tracing::warn!(path = %path.display(), line = i + 1, "dropping torn final log line");
                break;
            }
            let event = serde_json::from_slice::<Event>(&line).map_err(|e| Error::CorruptLog {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(event);
            good_len = end + 1;
        }
        if good_len < bytes.len() {
            let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
            f.set_len(good_len as u64).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok((
            EventLog {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads all events without opening the log for writing.
pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::CorruptLog {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
