//! Final report: rule set, final prompt, iteration table and EM curve.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{FinishReason, Phase, RunState};
use crate::stats::Verdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub prompt_version: String,
    pub base_version: Option<String>,
    pub iteration: u32,
    pub attempt: Option<u32>,
    pub cluster_id: Option<i32>,
    /// Cluster size (re-predicted members).
    pub n: Option<usize>,
    /// Members fixed by the rule (b).
    pub plus: Option<u64>,
    /// Members broken by the rule (c).
    pub minus: Option<u64>,
    pub delta_local_pct: Option<f64>,
    pub p_value: Option<String>,
    pub em_pct: Option<f64>,
    pub delta_global_pct: Option<f64>,
    pub verdict: Option<Verdict>,
    pub rule: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rule_count: usize,
    pub prompt_version: String,
    pub em_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPrompt {
    pub system: String,
    pub human: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub model: String,
    pub dataset_hash: String,
    pub phase: Phase,
    pub finished: bool,
    pub finish_reason: Option<FinishReason>,
    pub instance_count: usize,
    pub rules: Vec<String>,
    pub final_prompt: FinalPrompt,
    pub rows: Vec<ReportRow>,
    /// Global EM after each accepted rule, starting with the base prompt.
    pub curve: Vec<CurvePoint>,
    /// EM gain of the K-th accepted rule over the prompt before it, in points.
    pub marginal_gains: Vec<f64>,
}

fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

pub fn build_report(state: &RunState) -> Report {
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    if let Some(base) = state.evaluations.first() {
        rows.push(ReportRow {
            prompt_version: base.prompt_version.clone(),
            base_version: None,
            iteration: base.iteration,
            attempt: None,
            cluster_id: None,
            n: None,
            plus: None,
            minus: None,
            delta_local_pct: None,
            p_value: None,
            em_pct: Some(pct(base.em())),
            delta_global_pct: None,
            verdict: None,
            rule: None,
        });
        curve.push(CurvePoint {
            rule_count: 0,
            prompt_version: base.prompt_version.clone(),
            em_pct: pct(base.em()),
        });
    }
    for r in &state.history {
        rows.push(ReportRow {
            prompt_version: r.prompt_version.clone(),
            base_version: Some(r.base_version.clone()),
            iteration: r.iteration,
            attempt: Some(r.attempt),
            cluster_id: Some(r.cluster_id),
            n: Some(r.members.len()),
            plus: Some(r.mcnemar.b),
            minus: Some(r.mcnemar.c),
            delta_local_pct: Some(pct(r.delta_local.value())),
            p_value: Some(r.mcnemar.p_display.clone()),
            em_pct: r.global_em.map(pct),
            delta_global_pct: r.delta_global.map(pct),
            verdict: Some(r.verdict),
            rule: Some(r.rule.text.clone()),
        });
        if r.verdict == Verdict::Accepted {
            if let Some(em) = r.global_em {
                curve.push(CurvePoint {
                    rule_count: curve.len(),
                    prompt_version: r.prompt_version.clone(),
                    em_pct: pct(em),
                });
            }
        }
    }
    let marginal_gains = curve.windows(2).map(|w| ((w[1].em_pct - w[0].em_pct) * 100.0).round() / 100.0).collect();
    let rules = state.rules.texts();
    let template = &state.config.template;
    Report {
        run_id: state.run_id.clone(),
        model: state.model.clone(),
        dataset_hash: state.dataset_hash.clone(),
        phase: state.phase,
        finished: state.phase == Phase::Finished,
        finish_reason: state.finish_reason,
        instance_count: state.instance_count,
        final_prompt: FinalPrompt {
            system: template.system.clone(),
            human: template.human_with_rules(&rules),
        },
        rules,
        rows,
        curve,
        marginal_gains,
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

/// Markdown rendering: iteration table, curve, gains, rules and prompt.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run {}\n", report.run_id);
    let _ = writeln!(out, "- model: {}", report.model);
    let _ = writeln!(out, "- instances: {}", report.instance_count);
    let _ = writeln!(out, "- phase: {}", report.phase.as_str());
    if let Some(reason) = report.finish_reason {
        let _ = writeln!(out, "- finished: {}", serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
    }
    if report.finish_reason == Some(FinishReason::Converged) && report.rules.is_empty() {
        let _ = writeln!(out, "- converged immediately: no failed instances under the base prompt");
    }
    let _ = writeln!(out, "\n## Iterations\n");
    let _ = writeln!(out, "| Prompt | Base | Iter | Attempt | Cluster | N | + | - | ΔEM local % | p | EM % | ΔEM global % | Verdict |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|---|---|---|");
    for r in &report.rows {
        let verdict = match r.verdict {
            Some(Verdict::Accepted) => "accepted",
            Some(Verdict::Rejected) => "rejected",
            None => "",
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.prompt_version,
            opt(&r.base_version),
            r.iteration,
            opt(&r.attempt),
            opt(&r.cluster_id),
            opt(&r.n),
            opt(&r.plus),
            opt(&r.minus),
            opt_pct(r.delta_local_pct),
            opt(&r.p_value),
            opt_pct(r.em_pct),
            opt_pct(r.delta_global_pct),
            verdict
        );
    }
    let _ = writeln!(out, "\n## EM by rule count\n");
    let _ = writeln!(out, "| Rules | Prompt | EM % | Gain |");
    let _ = writeln!(out, "|---|---|---|---|");
    for (i, p) in report.curve.iter().enumerate() {
        let gain = if i == 0 { String::new() } else { format!("{:+.2}", report.marginal_gains[i - 1]) };
        let _ = writeln!(out, "| {} | {} | {:.2} | {} |", p.rule_count, p.prompt_version, p.em_pct, gain);
    }
    let _ = writeln!(out, "\n## Rules\n");
    if report.rules.is_empty() {
        let _ = writeln!(out, "(none)");
    }
    for (i, r) in report.rules.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, r);
    }
    let _ = writeln!(out, "\n## Final prompt\n\n```text\n{}\n\n{}\n```", report.final_prompt.system, report.final_prompt.human);
    out
}
