//! Command line: one subcommand per pipeline stage, plus `serve`.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tabrule_core::agent::{ModelConfig, ScriptedModel};
use tabrule_core::dataset::{filter_with_diagnostics, load_dataset, write_instances, EvidenceAdapter};
use tabrule_core::features::{derivation_pattern, group_rare, pattern_frequencies};
use tabrule_core::rule_loop::{build_report, render_markdown, ClusterView, IterationRecord, LoopConfig, Phase, RunSession};
use tabrule_core::sandbox::SandboxLimits;
use tabrule_core::stats::{Thresholds, Verdict};
use tabrule_core::testkit;

use crate::api::{router, AppState};
use crate::engine::{Backend, Engine, Settings};

#[derive(Debug, Parser)]
#[command(name = "tabrule", version, about = "Error-driven prompt rules for arithmetic table QA")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Directory holding run directories and the response cache.
    #[arg(long, env = "TABRULE_ROOT", default_value = "runs", global = true)]
    pub root: PathBuf,
    /// Chat endpoint of the local model server.
    #[arg(long, env = "TABRULE_ENDPOINT", default_value = "http://127.0.0.1:11434", global = true)]
    pub endpoint: String,
    #[arg(long, env = "TABRULE_MODEL", default_value = "qwen3:4b-q4_K_M", global = true)]
    pub model: String,
    /// Use canned programs from this JSON file instead of a model.
    #[arg(long, env = "TABRULE_SCRIPTED", global = true)]
    pub scripted: Option<PathBuf>,
    /// Concurrent model calls.
    #[arg(long, env = "TABRULE_PARALLELISM", default_value_t = 4, global = true)]
    pub parallelism: usize,
    /// Model request timeout, seconds.
    #[arg(long, env = "TABRULE_MODEL_TIMEOUT", default_value_t = 120, global = true)]
    pub model_timeout: u64,
    /// Program execution timeout, seconds.
    #[arg(long, env = "TABRULE_EXEC_TIMEOUT", default_value_t = 10, global = true)]
    pub exec_timeout: u64,
    /// Minimum local ΔEM to accept a rule.
    #[arg(long, env = "TABRULE_DELTA", default_value_t = 0.5, global = true)]
    pub delta: f64,
    /// Maximum McNemar p to accept a rule.
    #[arg(long, env = "TABRULE_P", default_value_t = 0.0625, global = true)]
    pub p: f64,
    /// Reject accepted rules that lower global EM.
    #[arg(long, env = "TABRULE_GLOBAL_GATE", global = true)]
    pub global_gate: bool,
    #[arg(long, global = true)]
    pub no_cache: bool,
    /// Ignore cached responses (new ones are still stored).
    #[arg(long, global = true)]
    pub bypass_cache: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Adapter {
    Strict,
    AnswerFrom,
    RelParagraphs,
}

impl From<Adapter> for EvidenceAdapter {
    fn from(a: Adapter) -> Self {
        match a {
            Adapter::Strict => EvidenceAdapter::Strict,
            Adapter::AnswerFrom => EvidenceAdapter::AnswerFrom,
            Adapter::RelParagraphs => EvidenceAdapter::RelParagraphs,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Markdown,
    Json,
}

#[derive(Debug, Args)]
pub struct RunOrDataset {
    /// Existing run.
    #[arg(long, conflicts_with = "dataset")]
    pub run: Option<String>,
    /// Start a new run over this dataset file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "strict")]
    pub adapter: Adapter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a dataset to arithmetic, table-only questions.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "strict")]
        adapter: Adapter,
        /// Write the instances as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print calc pattern frequencies.
        #[arg(long)]
        patterns: bool,
    },
    /// Run the global evaluation (and clustering) for a run.
    Eval {
        #[command(flatten)]
        target: RunOrDataset,
    },
    /// Show the clustering of an iteration and the offered cluster.
    Cluster {
        #[arg(long)]
        run: String,
        #[arg(long)]
        iteration: Option<u32>,
    },
    /// Interactive loop: rules are read from standard input, one per line;
    /// an empty line stops the run.
    Loop {
        #[command(flatten)]
        target: RunOrDataset,
    },
    /// Gate one rule against the offered cluster and commit the verdict.
    Gate {
        #[arg(long)]
        run: String,
        #[arg(long)]
        cluster: i32,
        #[arg(long)]
        rule: String,
    },
    Report {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    Serve {
        #[arg(long, env = "TABRULE_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Built workbench bundle, served under /ui.
        #[arg(long, env = "TABRULE_UI_DIR")]
        ui_dir: Option<PathBuf>,
    },
    /// Write the synthetic demo corpus and its scripted model.
    Fixture {
        #[arg(long)]
        out: PathBuf,
    },
}

type CliResult<T = ()> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn settings(g: &Global) -> CliResult<Settings> {
    let backend = match &g.scripted {
        Some(path) => Backend::Scripted(ScriptedModel::from_file(path).map_err(err)?),
        None => Backend::Live(ModelConfig {
            endpoint: g.endpoint.clone(),
            model: g.model.clone(),
            timeout_secs: g.model_timeout,
            ..ModelConfig::default()
        }),
    };
    Ok(Settings {
        root: g.root.clone(),
        backend,
        parallelism: g.parallelism,
        limits: SandboxLimits {
            timeout: Duration::from_secs(g.exec_timeout),
            ..SandboxLimits::default()
        },
        loop_config: LoopConfig {
            thresholds: Thresholds {
                delta_min: g.delta,
                p_max: g.p,
                delta_inclusive: false,
            },
            global_gate: g.global_gate,
            ..LoopConfig::default()
        },
        cache: !g.no_cache,
        bypass_cache: g.bypass_cache,
    })
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest {
            dataset,
            adapter,
            out,
            patterns,
        } => ingest(&dataset, adapter.into(), out.as_deref(), patterns),
        Command::Fixture { out } => fixture(&out),
        Command::Serve { addr, ui_dir } => serve(&cli.global, addr, ui_dir),
        Command::Eval { target } => {
            let engine = Engine::new(settings(&cli.global)?).map_err(err)?;
            let mut s = open_or_create(&engine, &target)?;
            evaluate(&engine, &mut s)?;
            Ok(())
        }
        Command::Cluster { run, iteration } => {
            let engine = Engine::new(settings(&cli.global)?).map_err(err)?;
            let s = engine.store().open(&run).map_err(err)?;
            show_clustering(&s, iteration)
        }
        Command::Loop { target } => {
            let engine = Engine::new(settings(&cli.global)?).map_err(err)?;
            let mut s = open_or_create(&engine, &target)?;
            interactive(&engine, &mut s, std::io::stdin().lock())
        }
        Command::Gate { run, cluster, rule } => {
            let engine = Engine::new(settings(&cli.global)?).map_err(err)?;
            let mut s = engine.store().open(&run).map_err(err)?;
            let ev = engine.evaluator(&s.state().config.template);
            let record = s.gate_candidate(&ev, cluster, &rule).map_err(err)?;
            print_verdict(&record);
            print_phase(&s);
            Ok(())
        }
        Command::Report { run, format } => {
            let engine = Engine::new(settings(&cli.global)?).map_err(err)?;
            let state = engine.store().load_state(&run).map_err(err)?;
            let report = build_report(&state);
            match format {
                Format::Markdown => print!("{}", render_markdown(&report)),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(err)?),
            }
            Ok(())
        }
    }
}

fn ingest(path: &Path, adapter: EvidenceAdapter, out: Option<&Path>, patterns: bool) -> CliResult {
    let docs = load_dataset(path).map_err(err)?;
    let outcome = filter_with_diagnostics(&docs, adapter);
    println!("{} tables, {} questions", outcome.table_count(), outcome.instances.len());
    if let Some(out) = out {
        write_instances(out, &outcome.instances).map_err(err)?;
    }
    if patterns {
        let raw: Vec<_> = outcome.instances.iter().map(|i| derivation_pattern(&i.derivation)).collect();
        for (p, n) in pattern_frequencies(&group_rare(&raw, 3)) {
            println!("{n:>5}  {}", p.as_str());
        }
    }
    Ok(())
}

fn fixture(out: &Path) -> CliResult {
    std::fs::create_dir_all(out).map_err(err)?;
    std::fs::write(out.join("dataset.json"), testkit::dataset_json()).map_err(err)?;
    let model = serde_json::to_string_pretty(&testkit::model()).map_err(err)?;
    std::fs::write(out.join("scripted.json"), model).map_err(err)?;
    println!("wrote {} and {}", out.join("dataset.json").display(), out.join("scripted.json").display());
    Ok(())
}

fn open_or_create(engine: &Engine, target: &RunOrDataset) -> CliResult<RunSession> {
    match (&target.run, &target.dataset) {
        (Some(id), _) => engine.store().open(id).map_err(err),
        (None, Some(path)) => {
            let s = engine
                .create_run(path, target.adapter.into(), None, engine.defaults().clone())
                .map_err(err)?;
            println!("created run {} ({} instances)", s.state().run_id, s.state().instance_count);
            Ok(s)
        }
        (None, None) => Err("give --run or --dataset".into()),
    }
}

fn evaluate(engine: &Engine, s: &mut RunSession) -> CliResult {
    let ev = engine.evaluator(&s.state().config.template);
    s.evaluate(&ev).map_err(err)?;
    let e = s.state().evaluations.last().expect("evaluation recorded");
    println!(
        "{}: EM {:.2} % ({}/{}), {} errors",
        e.prompt_version,
        e.em() * 100.0,
        e.correct,
        e.total,
        e.total - e.correct
    );
    print_phase(s);
    Ok(())
}

fn print_phase(s: &RunSession) {
    let st = s.state();
    match st.phase {
        Phase::Finished => {
            let reason = st.finish_reason.and_then(|r| serde_json::to_value(r).ok());
            println!("run {} finished: {}", st.run_id, reason.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown"));
        }
        Phase::AwaitingRule => {
            if let Some(c) = st.offered_cluster() {
                println!("run {} awaiting a rule: iteration {}, attempt {}, cluster {} ({} errors)", st.run_id, st.iteration, st.attempt, c.label, c.size);
            }
        }
        p => println!("run {} phase {}", st.run_id, p.as_str()),
    }
}

fn show_clustering(s: &RunSession, iteration: Option<u32>) -> CliResult {
    let st = s.state();
    let k = iteration.unwrap_or(st.iteration);
    let c = st.clusterings.get(&k).ok_or_else(|| format!("iteration {k} has no clustering"))?;
    println!("iteration {k}: {} errors, parameters ({}, {})", c.errors.len(), c.min_cluster_size, c.min_samples);
    println!("\n| min_cluster_size | min_samples | clusters | noise ratio |\n|---|---|---|---|");
    for g in &c.grid {
        println!("| {} | {} | {} | {:.6} |", g.min_cluster_size, g.min_samples, g.cluster_count, g.noise_ratio);
    }
    println!("\n| rank | cluster | size |\n|---|---|---|");
    for (i, r) in c.ranked.iter().enumerate() {
        println!("| {} | {} | {} |", i + 1, r.label, r.size);
    }
    if k == st.iteration && st.phase == Phase::AwaitingRule {
        let view = s.present_cluster(st.attempt).map_err(err)?;
        print_cluster(&view);
    }
    Ok(())
}

fn print_cluster(v: &ClusterView) {
    println!("\ncluster {} (attempt {}, {} members)\n", v.cluster_id, v.attempt, v.size);
    println!("| id | question | calc_pattern | code_calc_pattern | scale | pred_scale | error | cluster |");
    println!("|---|---|---|---|---|---|---|---|");
    for m in &v.members {
        let r = &m.row;
        println!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.id,
            r.question,
            r.calc_pattern,
            r.code_calc_pattern,
            r.scale,
            r.pred_scale,
            r.error_type.as_str(),
            r.cluster_id
        );
    }
}

fn print_verdict(r: &IterationRecord) {
    let verdict = match r.verdict {
        Verdict::Accepted => "accepted",
        Verdict::Rejected => "rejected",
    };
    print!(
        "{}: cluster {} n={} +{} -{} ΔEM {:.2} % p {} → {verdict}",
        r.prompt_version,
        r.cluster_id,
        r.mcnemar.n,
        r.mcnemar.b,
        r.mcnemar.c,
        r.delta_local.value() * 100.0,
        r.mcnemar.p_display
    );
    if let (Some(em), Some(d)) = (r.global_em, r.delta_global) {
        print!(", global EM {:.2} % ({:+.2})", em * 100.0, d * 100.0);
    }
    if r.rejected_by_global_gate {
        print!(" (rolled back by the global gate)");
    }
    println!();
}

/// Drives the loop from `input`, one rule per line.
pub fn interactive(engine: &Engine, s: &mut RunSession, input: impl BufRead) -> CliResult {
    let ev = engine.evaluator(&s.state().config.template);
    if s.state().phase == Phase::Evaluating {
        evaluate(engine, s)?;
    }
    let mut lines = input.lines();
    while s.state().phase == Phase::AwaitingRule {
        let view = s.present_cluster(s.state().attempt).map_err(err)?;
        print_cluster(&view);
        print!("\nrule for cluster {} (empty line stops)> ", view.cluster_id);
        std::io::stdout().flush().map_err(err)?;
        let line = match lines.next() {
            Some(l) => l.map_err(err)?,
            None => String::new(),
        };
        let text = line.trim();
        if text.is_empty() {
            println!();
            s.stop().map_err(err)?;
            break;
        }
        println!();
        match s.gate_candidate(&ev, view.cluster_id, text) {
            Ok(record) => print_verdict(&record),
            Err(e) => println!("not gated: {e}"),
        }
    }
    print_phase(s);
    print!("\n{}", render_markdown(&build_report(s.state())));
    Ok(())
}

fn serve(g: &Global, addr: SocketAddr, ui_dir: Option<PathBuf>) -> CliResult {
    let engine = Engine::new(settings(g)?).map_err(err)?;
    let app = router(AppState::new(engine), ui_dir);
    let rt = tokio::runtime::Runtime::new().map_err(err)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(err)?;
        tracing::info!(%addr, "listening");
        println!("listening on http://{}", listener.local_addr().map_err(err)?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(err)
    })
}
