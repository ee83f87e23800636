//! A small synthetic corpus and a scripted model with planted failure
//! groups. Used by the end-to-end tests and the `--scripted` demo mode.
//!
//! Groups, in corpus order:
//! - `pct` (8): percentage change; the base program gets the value right but
//!   answers in `million`. [`RULE_PERCENT`] fixes all eight.
//! - `avg` (10): two-year average; the base program ignores the earlier
//!   year. [`RULE_AVG_WEAK`] fixes three, [`RULE_NOOP`] none.
//! - `diff` (8): change in value; the base program adds instead of
//!   subtracting. [`RULE_DIFF`] fixes five of the eight.
//! - `sum` (6): answered correctly from the start.

use serde_json::json;

use crate::agent::ScriptedModel;
use crate::dataset::{parse_dataset, SourceDocument};

pub const RULE_PERCENT: &str = "'percentage change' results 'percent' scale";
pub const RULE_DIFF: &str = "'change in value' is a subtraction";
pub const RULE_AVG_WEAK: &str = "If the question is about calculating the year average, you must calculate the average between the given year and the previous one.";
pub const RULE_NOOP: &str = "Use exact category or header value to select a number value; number value is in property 'number_value'";

pub const PCT: usize = 8;
pub const AVG: usize = 10;
pub const DIFF: usize = 8;
pub const SUM: usize = 6;
/// Members of `diff` fixed by [`RULE_DIFF`].
pub const DIFF_FIXED: usize = 5;
/// Members of `avg` fixed by [`RULE_AVG_WEAK`].
pub const AVG_FIXED: usize = 3;

fn program(row: &str, expr: &str, scale: &str) -> String {
    format!(
        "def run(value_list):\n    v = {{}}\n    for item in value_list:\n        v[(item['category'], item['header'])] = item['number_value']\n    a = v[('{row}', '2019')]\n    b = v[('{row}', '2018')]\n    return ({expr}, '{scale}')\n"
    )
}

struct Planted {
    qid: String,
    question: String,
    derivation: String,
    answer: f64,
    scale: &'static str,
    table: Vec<Vec<String>>,
}

fn planted() -> Vec<(Planted, &'static str, usize)> {
    let mut out = Vec::new();
    let table = |r19: i64, r18: i64, c19: i64, c18: i64| {
        vec![
            vec![String::new(), "2019".into(), "2018".into()],
            vec!["Revenue".into(), format!("{r19}"), format!("{r18}")],
            vec!["Cost".into(), format!("{c19}"), format!("{c18}")],
        ]
    };
    for i in 0..PCT as i64 {
        let r18 = 1000 * (i + 1);
        let r19 = 10 * (i + 1) * (110 + i);
        out.push((
            Planted {
                qid: format!("pct-{i}"),
                question: "What was the percentage change in Revenue from 2018 to 2019?".into(),
                derivation: format!("({r19} - {r18}) / {r18}"),
                answer: (10 + i) as f64,
                scale: "percent",
                table: table(r19, r18, 70 + i, 50 + i),
            },
            "pct",
            i as usize,
        ));
    }
    for i in 0..AVG as i64 {
        let c19 = 300 + 2 * i;
        let c18 = 200 + 4 * i;
        out.push((
            Planted {
                qid: format!("avg-{i}"),
                question: "What is the average Cost for 2019 and 2018?".into(),
                derivation: format!("({c19} + {c18}) / 2"),
                answer: (c19 + c18) as f64 / 2.0,
                scale: "thousand",
                table: table(900 + i, 800 + i, c19, c18),
            },
            "avg",
            i as usize,
        ));
    }
    for i in 0..DIFF as i64 {
        let r19 = 500 + 7 * i;
        let r18 = 400 + 3 * i;
        out.push((
            Planted {
                qid: format!("diff-{i}"),
                question: "What is the change in Revenue from 2018 to 2019?".into(),
                derivation: format!("{r19} - {r18}"),
                answer: (r19 - r18) as f64,
                scale: "",
                table: table(r19, r18, 60 + i, 30 + i),
            },
            "diff",
            i as usize,
        ));
    }
    for i in 0..SUM as i64 {
        let r19 = 250 + i;
        let r18 = 120 + i;
        out.push((
            Planted {
                qid: format!("sum-{i}"),
                question: "What is the total Revenue in 2019 and 2018?".into(),
                derivation: format!("{r19} + {r18}"),
                answer: (r19 + r18) as f64,
                scale: "million",
                table: table(r19, r18, 40 + i, 20 + i),
            },
            "sum",
            i as usize,
        ));
    }
    out
}

/// The corpus as TAT-QA JSON: one table per question.
pub fn dataset_json() -> String {
    let docs: Vec<_> = planted()
        .into_iter()
        .enumerate()
        .map(|(n, (p, _, _))| {
            json!({
                "table": {"uid": format!("table-{n:02}"), "table": p.table},
                "paragraphs": [],
                "questions": [{
                    "uid": p.qid,
                    "order": 1,
                    "question": p.question,
                    "answer": p.answer,
                    "derivation": p.derivation,
                    "answer_type": "arithmetic",
                    "answer_from": "table",
                    "rel_paragraphs": [],
                    "req_comparison": false,
                    "scale": p.scale,
                }]
            })
        })
        .collect();
    serde_json::to_string_pretty(&docs).expect("fixture serializes")
}

pub fn documents() -> Vec<SourceDocument> {
    parse_dataset(dataset_json().as_bytes()).expect("fixture parses")
}

/// Question ids of one group, in corpus order.
pub fn group(name: &str) -> Vec<String> {
    planted().into_iter().filter(|(_, g, _)| *g == name).map(|(p, _, _)| p.qid).collect()
}

/// The scripted model for the fixture.
pub fn model() -> ScriptedModel {
    let mut m = ScriptedModel::new();
    m.tag = "scripted-fixture".into();
    for (p, g, i) in planted() {
        let q = p.qid.as_str();
        match g {
            "pct" => {
                m.set_default(q, &program("Revenue", "(a - b) / b * 100", "million"));
                m.set_override(RULE_PERCENT, q, &program("Revenue", "(a - b) / b * 100", "percent"));
            }
            "avg" => {
                m.set_default(q, &program("Cost", "a / 2", "thousand"));
                if i < AVG_FIXED {
                    m.set_override(RULE_AVG_WEAK, q, &program("Cost", "(a + b) / 2", "thousand"));
                }
            }
            "diff" => {
                m.set_default(q, &program("Revenue", "a + b", ""));
                if i < DIFF_FIXED {
                    m.set_override(RULE_DIFF, q, &program("Revenue", "a - b", ""));
                }
            }
            _ => {
                m.set_default(q, &program("Revenue", "a + b", "million"));
            }
        }
    }
    m
}

/// A model that answers every fixture question correctly.
pub fn perfect_model() -> ScriptedModel {
    let mut m = ScriptedModel::new();
    m.tag = "scripted-perfect".into();
    for (p, g, _) in planted() {
        let prog = match g {
            "pct" => program("Revenue", "(a - b) / b * 100", "percent"),
            "avg" => program("Cost", "(a + b) / 2", "thousand"),
            "diff" => program("Revenue", "a - b", ""),
            _ => program("Revenue", "a + b", "million"),
        };
        m.set_default(&p.qid, &prog);
    }
    m
}
