//! Isolated execution of generated programs.
//!
//! Each call writes the program and value list into a private scratch
//! directory and runs the harness driver in its own session and process
//! group, under an address-space limit and (where permitted) a fresh network
//! namespace. The driver's audit hook refuses writes, sockets and process
//! creation; the wall-clock limit is enforced here by killing the group.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::parse_float_text;
use crate::restructure::ValueList;

const HARNESS: &str = include_str!("../assets/harness.py");

const EXIT_SYNTAX: i32 = 65;
const EXIT_RUNTIME: i32 = 66;
const EXIT_PROTOCOL: i32 = 67;
const OUTPUT_CAP: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramSource {
    pub source: String,
    #[serde(default = "default_language")]
    pub language: String,
}

fn default_language() -> String {
    "python".to_string()
}

impl ProgramSource {
    pub fn python(source: impl Into<String>) -> Self {
        ProgramSource {
            source: source.into(),
            language: default_language(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Value,
    SyntaxError,
    RuntimeError,
    Timeout,
    ProtocolError,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Value => "value",
            OutcomeKind::SyntaxError => "syntax_error",
            OutcomeKind::RuntimeError => "runtime_error",
            OutcomeKind::Timeout => "timeout",
            OutcomeKind::ProtocolError => "protocol_error",
        }
    }
}

/// A returned number, or the NaN marker for NaN and infinite results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredNumber {
    Finite(Decimal),
    NaN,
}

impl PredNumber {
    pub fn finite(self) -> Option<Decimal> {
        match self {
            PredNumber::Finite(d) => Some(d),
            PredNumber::NaN => None,
        }
    }
}

impl Serialize for PredNumber {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PredNumber::Finite(d) => s.serialize_str(&d.to_string()),
            PredNumber::NaN => s.serialize_str("NaN"),
        }
    }
}

impl<'de> Deserialize<'de> for PredNumber {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "NaN" {
            return Ok(PredNumber::NaN);
        }
        s.parse::<Decimal>()
            .map(PredNumber::Finite)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number: Option<PredNumber>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_text: Option<String>,
    #[serde(default)]
    pub diagnostic: String,
}

impl ExecutionOutcome {
    pub fn value(number: PredNumber, scale: impl Into<String>) -> Self {
        ExecutionOutcome {
            kind: OutcomeKind::Value,
            number: Some(number),
            scale_text: Some(scale.into()),
            diagnostic: String::new(),
        }
    }

    pub fn failure(kind: OutcomeKind, diagnostic: impl Into<String>) -> Self {
        debug_assert!(kind != OutcomeKind::Value);
        ExecutionOutcome {
            kind,
            number: None,
            scale_text: None,
            diagnostic: diagnostic.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandboxLimits {
    pub timeout: Duration,
    pub memory_bytes: u64,
    /// Cap on concurrently running child processes.
    pub max_concurrent: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        SandboxLimits {
            timeout: Duration::from_secs(10),
            memory_bytes: 512 * 1024 * 1024,
            max_concurrent: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Influence {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandInfluence {
    pub operand: Decimal,
    pub influence: Influence,
}

/// Counting semaphore bounding live child processes.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    interpreter: Vec<String>,
    limits: SandboxLimits,
    harness_dir: Arc<tempfile::TempDir>,
    slots: Arc<Slots>,
}

impl Sandbox {
    /// Sandbox running programs with `python3` under the given limits.
    pub fn new(limits: SandboxLimits) -> Result<Self> {
        Self::with_interpreter(vec!["python3".to_string(), "-I".to_string(), "-S".to_string()], limits)
    }

    pub fn with_interpreter(interpreter: Vec<String>, limits: SandboxLimits) -> Result<Self> {
        if interpreter.is_empty() {
            return Err(Error::Sandbox("empty interpreter command".into()));
        }
        let dir = tempfile::Builder::new()
            .prefix("tabrule-harness")
            .tempdir()
            .map_err(|e| Error::Sandbox(format!("cannot create harness dir: {e}")))?;
        let path = dir.path().join("harness.py");
        std::fs::write(&path, HARNESS).map_err(|e| Error::io(&path, e))?;
        let slots = Slots {
            free: Mutex::new(limits.max_concurrent.max(1)),
            cv: Condvar::new(),
        };
        Ok(Sandbox {
            interpreter,
            limits,
            harness_dir: Arc::new(dir),
            slots: Arc::new(slots),
        })
    }

    pub fn limits(&self) -> &SandboxLimits {
        &self.limits
    }

    fn harness_path(&self) -> PathBuf {
        self.harness_dir.path().join("harness.py")
    }

    /// Runs `prog` against the value list. Every failure is an outcome.
    pub fn execute(&self, prog: &ProgramSource, vl: &ValueList) -> ExecutionOutcome {
        self.execute_json(prog, &vl.to_json(false))
    }

    fn execute_json(&self, prog: &ProgramSource, values_json: &str) -> ExecutionOutcome {
        if prog.source.trim().is_empty() {
            return ExecutionOutcome::failure(OutcomeKind::SyntaxError, "empty program");
        }
        match self.run_child(prog, values_json) {
            Ok(outcome) => outcome,
            Err(e) => ExecutionOutcome::failure(OutcomeKind::RuntimeError, format!("sandbox failure: {e}")),
        }
    }

    fn run_child(&self, prog: &ProgramSource, values_json: &str) -> Result<ExecutionOutcome> {
        let scratch = tempfile::Builder::new()
            .prefix("tabrule-run")
            .tempdir()
            .map_err(|e| Error::Sandbox(format!("cannot create scratch dir: {e}")))?;
        let program_path = scratch.path().join("program.py");
        let values_path = scratch.path().join("values.json");
        std::fs::write(&program_path, &prog.source).map_err(|e| Error::io(&program_path, e))?;
        std::fs::write(&values_path, values_json).map_err(|e| Error::io(&values_path, e))?;
        set_read_only(scratch.path());

        let _slot = self.slots.acquire();
        let mut cmd = Command::new(&self.interpreter[0]);
        cmd.args(&self.interpreter[1..])
            .arg(self.harness_path())
            .arg(&program_path)
            .arg(&values_path)
            .current_dir(scratch.path())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into()))
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let memory = self.limits.memory_bytes;
        let cpu_secs = self.limits.timeout.as_secs() + 2;
        // SAFETY: only async-signal-safe libc calls run between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                if libc::setsid() == -1 {
                    return Err(std::io::Error::last_os_error());
                }
                let limit = |res, value: u64| {
                    let rl = libc::rlimit {
                        rlim_cur: value as libc::rlim_t,
                        rlim_max: value as libc::rlim_t,
                    };
                    libc::setrlimit(res, &rl);
                };
                limit(libc::RLIMIT_AS, memory);
                limit(libc::RLIMIT_CPU, cpu_secs);
                limit(libc::RLIMIT_CORE, 0);
                limit(libc::RLIMIT_FSIZE, 0);
                // Network isolation where the kernel allows it; the driver's
                // audit hook refuses sockets either way.
                libc::unshare(libc::CLONE_NEWNET);
                Ok(())
            });
        }

        let started = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Sandbox(format!("cannot start `{}`: {e}", self.interpreter[0])))?;
        let pid = child.id() as libc::pid_t;
        let stdout = drain(child.stdout.take());
        let stderr = drain(child.stderr.take());

        let deadline = started + self.limits.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => break None,
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(Error::Sandbox(format!("wait failed: {e}"))),
            }
        };
        // The group is killed in every case so nothing outlives the call.
        // SAFETY: plain syscall on the child's process group.
        unsafe {
            libc::killpg(pid, libc::SIGKILL);
        }
        let status = match status {
            Some(s) => s,
            None => {
                let _ = child.wait();
                let _ = stdout.join();
                let _ = stderr.join();
                return Ok(ExecutionOutcome::failure(
                    OutcomeKind::Timeout,
                    format!("exceeded {:.1} s wall-clock limit", self.limits.timeout.as_secs_f64()),
                ));
            }
        };
        let out = stdout.join().unwrap_or_default();
        let err = stderr.join().unwrap_or_default();
        let diagnostic = last_line(&err);
        tracing::trace!(elapsed_ms = started.elapsed().as_millis() as u64, ?status, "program finished");

        Ok(match status.code() {
            Some(0) => parse_result_line(&out),
            Some(EXIT_SYNTAX) => ExecutionOutcome::failure(OutcomeKind::SyntaxError, diagnostic),
            Some(EXIT_RUNTIME) => ExecutionOutcome::failure(OutcomeKind::RuntimeError, diagnostic),
            Some(EXIT_PROTOCOL) => ExecutionOutcome::failure(OutcomeKind::ProtocolError, diagnostic),
            Some(code) => ExecutionOutcome::failure(OutcomeKind::RuntimeError, format!("exit status {code}: {diagnostic}")),
            None => {
                use std::os::unix::process::ExitStatusExt;
                let signal = status.signal().unwrap_or(0);
                let kind = if signal == libc::SIGXCPU {
                    OutcomeKind::Timeout
                } else {
                    OutcomeKind::RuntimeError
                };
                ExecutionOutcome::failure(kind, format!("killed by signal {signal}: {diagnostic}"))
            }
        })
    }

    /// For each distinct operand, whether perturbing the matching cells
    /// changes the program's output. Operands with no matching cell are
    /// `Unknown`.
    pub fn sensitivity_probe(&self, prog: &ProgramSource, vl: &ValueList, operands: &[Decimal]) -> Vec<OperandInfluence> {
        let mut distinct: Vec<Decimal> = Vec::new();
        for o in operands {
            if !distinct.iter().any(|d| d.abs() == o.abs()) {
                distinct.push(*o);
            }
        }
        if distinct.is_empty() {
            return Vec::new();
        }
        let baseline = self.execute(prog, vl);
        let base_number = match (baseline.kind, baseline.number) {
            (OutcomeKind::Value, Some(n)) => n,
            _ => {
                return distinct
                    .into_iter()
                    .map(|operand| OperandInfluence {
                        operand,
                        influence: Influence::Unknown,
                    })
                    .collect()
            }
        };
        distinct
            .into_iter()
            .map(|operand| {
                let positions = vl.positions_of(operand);
                // A constant of the derivation that is not in the table (the 2
                // of an average, a 100) cannot be selected or missed.
                let influence = if positions.is_empty() {
                    Influence::Unknown
                } else {
                    let perturbed = perturb(vl, &positions);
                    let outcome = self.execute(prog, &perturbed);
                    match (outcome.kind, outcome.number) {
                        (OutcomeKind::Value, Some(n)) if n == base_number => Influence::No,
                        (OutcomeKind::Value, Some(_)) => Influence::Yes,
                        _ => Influence::Unknown,
                    }
                };
                OperandInfluence { operand, influence }
            })
            .collect()
    }
}

fn perturb(vl: &ValueList, positions: &[usize]) -> ValueList {
    let factor = Decimal::ONE + Decimal::new(1, 6);
    let mut out = vl.clone();
    for &i in positions {
        let item = &mut out.items[i];
        item.number_value = if item.number_value.is_zero() {
            Decimal::new(1, 6)
        } else {
            item.number_value * factor
        };
    }
    out
}

fn set_read_only(dir: &Path) {
    use std::os::unix::fs::PermissionsExt;
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let _ = std::fs::set_permissions(entry.path(), std::fs::Permissions::from_mode(0o444));
        }
    }
    let _ = std::fs::set_permissions(dir, std::fs::Permissions::from_mode(0o555));
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        if let Some(mut pipe) = pipe {
            let mut buf = [0u8; 8192];
            while let Ok(n) = pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let room = OUTPUT_CAP.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

fn last_line(text: &str) -> String {
    text.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim().to_string()
}

fn parse_result_line(stdout: &str) -> ExecutionOutcome {
    #[derive(Deserialize)]
    struct Line {
        number: serde_json::Value,
        scale: String,
    }
    let line = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    let parsed: Line = match serde_json::from_str(line) {
        Ok(l) => l,
        Err(_) => return ExecutionOutcome::failure(OutcomeKind::ProtocolError, "driver produced no result line"),
    };
    let number = match &parsed.number {
        serde_json::Value::String(s) if s == "NaN" => PredNumber::NaN,
        serde_json::Value::Number(n) => match parse_float_text(&n.to_string()) {
            Some(d) => PredNumber::Finite(d),
            None => {
                let mut o = ExecutionOutcome::value(PredNumber::NaN, parsed.scale);
                o.diagnostic = format!("number {n} is outside the decimal range");
                return o;
            }
        },
        other => {
            return ExecutionOutcome::failure(OutcomeKind::ProtocolError, format!("unexpected number field {other}"));
        }
    };
    ExecutionOutcome::value(number, parsed.scale)
}
