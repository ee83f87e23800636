//! Acceptance run: one PASS / FAIL / SKIP line per primary criterion.
//!
//! Criteria 1 and 2 need the TAT-QA dev file (`TATQA_DATASET`). Without it
//! they report FAIL with an environment note and do not fail the target.
//! Criterion 7 needs a live model (`TABRULE_LIVE_ENDPOINT`) and never gates.

#[path = "support/hdbscan_reference.rs"]
mod reference;
#[path = "support/scripted.rs"]
mod scripted;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabrule_core::agent::{Agent, Generator, ModelConfig, OllamaClient, PromptTemplate};
use tabrule_core::clustering::{hdbscan_distances, GRID_MIN_CLUSTER_SIZE, GRID_MIN_SAMPLES};
use tabrule_core::dataset::{filter_with_diagnostics, load_dataset, EvidenceAdapter};
use tabrule_core::features::{derivation_pattern, group_rare, pattern_frequencies};
use tabrule_core::restructure::{AnnotatedValue, ValueList};
use tabrule_core::rule_loop::{Corpus, Evaluator};
use tabrule_core::sandbox::{OutcomeKind, PredNumber, ProgramSource, Sandbox, SandboxLimits};
use tabrule_core::stats::{mcnemar_from_counts, mcnemar_p_exact};

const INGEST_BUDGET: Duration = Duration::from_secs(10);
const PATTERN_BUDGET: Duration = Duration::from_secs(5);
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_MATRICES: usize = 240;
const P_TOLERANCE: f64 = 1e-8;
const PATTERN_TOLERANCE: i64 = 2;
const TIMEOUT_SECS: u64 = 2;
const TIMEOUT_SLACK: f64 = 1.0;
const LIVE_EM_TOLERANCE: f64 = 5.0;
const LIVE_ERROR_TOLERANCE: i64 = 20;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Failed because the environment lacks an input; recorded, not gating.
    Unavailable(String),
    Skip(String),
}

use Outcome::*;

fn dataset_path() -> Result<PathBuf, Outcome> {
    match std::env::var_os("TATQA_DATASET") {
        Some(p) => Ok(PathBuf::from(p)),
        None => Err(Unavailable("TATQA_DATASET is unset; the TAT-QA dev file is not available in this environment".into())),
    }
}

fn ingest() -> Outcome {
    let path = match dataset_path() {
        Ok(p) => p,
        Err(o) => return o,
    };
    let start = Instant::now();
    let docs = match load_dataset(&path) {
        Ok(d) => d,
        Err(e) => return Fail(format!("cannot load {}: {e}", path.display())),
    };
    let out = filter_with_diagnostics(&docs, EvidenceAdapter::Strict);
    let took = start.elapsed();
    let (tables, questions) = (out.table_count(), out.instances.len());
    let msg = format!("{tables} tables, {questions} questions in {:.2}s", took.as_secs_f64());
    if (tables, questions) == (215, 497) && took < INGEST_BUDGET {
        Pass(msg)
    } else {
        Fail(format!("{msg}; want 215 tables, 497 questions in < {}s", INGEST_BUDGET.as_secs()))
    }
}

/// Published frequencies, largest first; the first four must match exactly.
const TABLE: [(&str, i64); 14] = [
    ("#-#", 134),
    ("(#-#)/#", 100),
    ("(#+#)/#", 89),
    ("#/#", 49),
    ("(#+#+#)/#", 26),
    ("#+#", 21),
    ("#/#-#", 9),
    ("-#-#", 8),
    ("#%-#%", 7),
    ("-(#+#)/#", 5),
    ("(#%+#%)/#", 5),
    ("#+#+#", 4),
    ("[(#+#)/#]-[(#+#)/#]", 4),
    ("other", 36),
];

fn patterns() -> Outcome {
    let path = match dataset_path() {
        Ok(p) => p,
        Err(o) => return o,
    };
    let docs = match load_dataset(&path) {
        Ok(d) => d,
        Err(e) => return Fail(format!("cannot load {}: {e}", path.display())),
    };
    let instances = filter_with_diagnostics(&docs, EvidenceAdapter::Strict).instances;
    let start = Instant::now();
    let raw: Vec<_> = instances.iter().map(|i| derivation_pattern(&i.derivation)).collect();
    let freq = pattern_frequencies(&group_rare(&raw, 3));
    let took = start.elapsed();
    let count = |p: &str| freq.iter().find(|(k, _)| k.as_str() == p).map_or(0, |(_, n)| *n as i64);
    let total: usize = freq.iter().map(|(_, n)| n).sum();
    let mut problems = Vec::new();
    if total != 497 {
        problems.push(format!("total {total} != 497"));
    }
    for (i, (p, want)) in TABLE.iter().enumerate() {
        let got = count(p);
        let tol = if i < 4 { 0 } else { PATTERN_TOLERANCE };
        if (got - want).abs() > tol {
            problems.push(format!("{p}: {got} vs {want}"));
        }
    }
    if took >= PATTERN_BUDGET {
        problems.push(format!("took {:.2}s", took.as_secs_f64()));
    }
    if problems.is_empty() {
        Pass(format!("{total} instances, top four exact, rest within ±{PATTERN_TOLERANCE}, {:.3}s", took.as_secs_f64()))
    } else {
        Fail(problems.join("; "))
    }
}

fn mcnemar() -> Outcome {
    let exact = [((5, 0), (1, 16)), ((3, 0), (1, 4)), ((4, 0), (1, 8)), ((2, 0), (1, 2))];
    for ((b, c), (num, den)) in exact {
        let want = BigRational::new(BigInt::from(num), BigInt::from(den));
        if mcnemar_p_exact(b, c) != want || mcnemar_from_counts(b, c).p_exact != num as f64 / den as f64 {
            return Fail(format!("({b},{c}) gave {}", mcnemar_p_exact(b, c)));
        }
    }
    // Independent oracle: two-sided binomial tail summed in f64.
    let n = 21u64;
    let tail: f64 = (20..=n).map(|k| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)).sum();
    let oracle = 2.0 * tail / 2f64.powi(n as i32);
    let got = mcnemar_from_counts(20, 1).p_exact;
    if (got - 2.098e-5).abs() <= P_TOLERANCE && (got - oracle).abs() <= 1e-15 {
        Pass(format!("exact 1/16, 1/4, 1/8, 1/2; (20,1) → {got:.6e}"))
    } else {
        Fail(format!("(20,1) → {got:e}, oracle {oracle:e}"))
    }
}

fn clustering() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for _ in 0..ORACLE_MATRICES {
        let rows = reference::random_rows(&mut rng);
        let d: Vec<Vec<u32>> = rows.iter().map(|a| rows.iter().map(|b| reference::hamming(a, b)).collect()).collect();
        for mcs in GRID_MIN_CLUSTER_SIZE {
            for ms in GRID_MIN_SAMPLES {
                let got = match hdbscan_distances(&d, mcs, ms) {
                    Ok(g) => g,
                    Err(e) => return Fail(format!("hdbscan failed: {e}")),
                };
                if reference::as_sets(&got.labels) != reference::reference(&rows, mcs, ms) {
                    return Fail(format!("mismatch on {rows:?} at ({mcs}, {ms})"));
                }
                checked += 1;
            }
        }
    }
    let took = start.elapsed();
    let msg = format!("{ORACLE_MATRICES} matrices, {checked} grid cases, {:.2}s", took.as_secs_f64());
    if took < ORACLE_BUDGET {
        Pass(msg)
    } else {
        Fail(format!("{msg}; budget {}s", ORACLE_BUDGET.as_secs()))
    }
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (log_a, _) = scripted::scripted_run(a.path());
    let (log_b, _) = scripted::scripted_run(b.path());
    if log_a != log_b {
        return Fail("event logs differ between executions".into());
    }
    let text = String::from_utf8(log_a).unwrap();
    let mut events = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v.get("attempt").and_then(|a| a.as_u64()).is_some_and(|a| a > 2) {
            return Fail(format!("attempt above 2: {line}"));
        }
        events += 1;
    }
    Pass(format!("{events} events, byte-identical, attempt ≤ 2"))
}

fn sandbox() -> Outcome {
    let sb = Sandbox::new(SandboxLimits {
        timeout: Duration::from_secs(TIMEOUT_SECS),
        ..SandboxLimits::default()
    })
    .unwrap();
    let vl = ValueList {
        doc_id: "t".into(),
        items: vec![AnnotatedValue {
            category: "Revenue".into(),
            header: "2019".into(),
            number_value: "120".parse().unwrap(),
            raw_text: "120".into(),
            scale_hint: None,
        }],
    };
    let scratch = tempfile::tempdir().unwrap();
    let target = scratch.path().join("written.txt");
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let port = listener.local_addr().unwrap().port();
    let battery = [
        ("syntax error", "def run(v)\n    return (1, '')\n".to_string(), OutcomeKind::SyntaxError),
        ("division by zero", "def run(v):\n    return (1/0, '')\n".into(), OutcomeKind::RuntimeError),
        ("nan return", "def run(v):\n    return (float('nan'), '')\n".into(), OutcomeKind::Value),
        (
            "file write",
            format!("def run(v):\n    open({:?}, 'w').write('x')\n    return (1, '')\n", target.to_str().unwrap()),
            OutcomeKind::RuntimeError,
        ),
        (
            "socket",
            format!("import socket\ndef run(v):\n    socket.create_connection(('127.0.0.1', {port})).sendall(b'x')\n    return (1, '')\n"),
            OutcomeKind::RuntimeError,
        ),
        ("wrong arity", "def run(v):\n    return (1, '', 2)\n".into(), OutcomeKind::ProtocolError),
    ];
    for (name, src, want) in &battery {
        let o = sb.execute(&ProgramSource::python(src.as_str()), &vl);
        if o.kind != *want {
            return Fail(format!("{name}: got {:?}, want {want:?}", o.kind));
        }
        if *name == "nan return" && o.number != Some(PredNumber::NaN) {
            return Fail("nan return lost its marker".into());
        }
    }
    std::thread::sleep(Duration::from_millis(200));
    if target.exists() || listener.accept().is_ok() {
        return Fail("program left a host side effect".into());
    }
    let start = Instant::now();
    let o = sb.execute(&ProgramSource::python("def run(v):\n    while True:\n        pass\n"), &vl);
    let took = start.elapsed().as_secs_f64();
    if o.kind != OutcomeKind::Timeout || (took - TIMEOUT_SECS as f64).abs() > TIMEOUT_SLACK {
        return Fail(format!("infinite loop: {:?} after {took:.2}s", o.kind));
    }
    Pass(format!("7 programs classified, no side effects, timeout after {took:.2}s"))
}

const FINAL_RULES: [&str; 3] = [
    "If the question is about calculating the year average, you must calculate the average between the given year and the previous one. ex. 2015_average = (2015_value + 2014_value)/2",
    "'percentage change' results 'percent' scale",
    "'change in percentage' is a subtraction",
];

fn live() -> Outcome {
    let Some(endpoint) = std::env::var_os("TABRULE_LIVE_ENDPOINT") else {
        return Skip("TABRULE_LIVE_ENDPOINT is unset; no model server in this environment".into());
    };
    let path = match dataset_path() {
        Ok(p) => p,
        Err(o) => return o,
    };
    let corpus = match Corpus::load(&path, EvidenceAdapter::Strict, 3) {
        Ok(c) => c,
        Err(e) => return Fail(format!("cannot load {}: {e}", path.display())),
    };
    let client = match OllamaClient::new(ModelConfig {
        endpoint: endpoint.to_string_lossy().into_owned(),
        ..ModelConfig::default()
    }) {
        Ok(c) => c,
        Err(e) => return Fail(format!("model client: {e}")),
    };
    let parallelism = std::env::var("TABRULE_PARALLELISM").ok().and_then(|p| p.parse().ok()).unwrap_or(4);
    let agent = Agent::new(Arc::new(client) as Arc<dyn Generator>).with_parallelism(parallelism);
    let evaluator = Evaluator::new(agent, Arc::new(Sandbox::new(SandboxLimits::default()).unwrap()), PromptTemplate::default());
    let instances: Vec<_> = corpus.instances.iter().collect();
    let run = |rules: &[String]| {
        let results = evaluator.predict_all(&corpus, &instances, rules);
        let correct = results.iter().filter(|r| r.score.em == 1).count();
        (100.0 * correct as f64 / results.len() as f64, (results.len() - correct) as i64)
    };
    let (base_em, base_errors) = run(&[]);
    let rules: Vec<String> = FINAL_RULES.iter().map(|r| r.to_string()).collect();
    let (final_em, _) = run(&rules);
    let msg = format!("V1 EM {base_em:.2} % ({base_errors} errors), final EM {final_em:.2} %");
    let ok = (base_em - 59.96).abs() <= LIVE_EM_TOLERANCE && (final_em - 70.82).abs() <= LIVE_EM_TOLERANCE && (base_errors - 199).abs() <= LIVE_ERROR_TOLERANCE;
    if ok {
        Pass(msg)
    } else {
        Fail(format!("{msg}; want 59.96±5, 70.82±5, 199±20 errors"))
    }
}

/// Name, check, and whether a failure fails the target.
type Criterion = (&'static str, fn() -> Outcome, bool);

fn guarded(f: fn() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Fail(msg)
        }
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("1 dataset filter", ingest, true),
        ("2 calc pattern table", patterns, true),
        ("3 mcnemar exactness", mcnemar, true),
        ("4 clustering oracle", clustering, true),
        ("5 loop determinism", determinism, true),
        ("6 sandbox safety", sandbox, true),
        ("7 live reproduction", live, false),
    ];
    let mut gating_failures = 0;
    for (name, f, gating) in criteria {
        match guarded(f) {
            Pass(m) => println!("PASS  {name}: {m}"),
            Skip(m) => println!("SKIP  {name}: {m}"),
            Unavailable(m) => println!("FAIL  {name}: environment: {m}"),
            Fail(m) => {
                println!("FAIL  {name}: {m}");
                if gating {
                    gating_failures += 1;
                }
            }
        }
    }
    if gating_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
