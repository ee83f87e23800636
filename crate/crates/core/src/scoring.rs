//! Exact match, value-match codes and the six-way error classification.

use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ScaleTag, TestInstance};
use crate::error::{Error, Result};
use crate::numeric::round2;
use crate::sandbox::{ExecutionOutcome, Influence, OperandInfluence, OutcomeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    SelectionError,
    CalculationError,
    ScaleError,
    SignError,
    SyntaxError,
    RuntimeError,
}

impl ErrorType {
    pub const ALL: [ErrorType; 6] = [
        ErrorType::SelectionError,
        ErrorType::CalculationError,
        ErrorType::ScaleError,
        ErrorType::SignError,
        ErrorType::SyntaxError,
        ErrorType::RuntimeError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::SelectionError => "selection_error",
            ErrorType::CalculationError => "calculation_error",
            ErrorType::ScaleError => "scale_error",
            ErrorType::SignError => "sign_error",
            ErrorType::SyntaxError => "syntax_error",
            ErrorType::RuntimeError => "runtime_error",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorType::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::NotFound(format!("error type `{s}`")))
    }
}

/// One model answer to one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub outcome: ExecutionOutcome,
    /// Program text as extracted from the response; `None` when no program was found.
    pub program: Option<String>,
    pub prompt_hash: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub question_id: String,
    pub em: u8,
    pub value_match: u8,
    pub scale_mismatch: bool,
    pub error_type: Option<ErrorType>,
    /// Set when the error type fell back to calculation_error because the
    /// derivation had no extractable operands.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback_classification: bool,
}

/// Lowercased, trimmed scale text; empty and "none" are the same.
pub fn normalize_scale(text: &str) -> String {
    let t = text.trim().to_lowercase();
    if t == "none" {
        String::new()
    } else {
        t
    }
}

fn scale_matches(outcome: &ExecutionOutcome, truth: ScaleTag) -> bool {
    match &outcome.scale_text {
        Some(s) => normalize_scale(s) == truth.as_answer_str(),
        None => false,
    }
}

/// Scale mismatch; a failed execution has no scale and so always mismatches.
pub fn scale_mismatch(outcome: &ExecutionOutcome, truth: ScaleTag) -> bool {
    !scale_matches(outcome, truth)
}

pub fn value_match_code(outcome: &ExecutionOutcome, truth_value: Decimal) -> u8 {
    let number = match (outcome.kind, outcome.number.and_then(|n| n.finite())) {
        (OutcomeKind::Value, Some(n)) => n,
        _ => return 2,
    };
    let p = round2(number);
    let t = round2(truth_value);
    if p == t {
        0
    } else if p.abs() == t.abs() && !t.is_zero() {
        1
    } else {
        3
    }
}

pub fn exact_match(outcome: &ExecutionOutcome, truth_value: Decimal, truth_scale: ScaleTag) -> u8 {
    u8::from(value_match_code(outcome, truth_value) == 0 && scale_matches(outcome, truth_scale))
}

/// Error type of a failed prediction, by fixed precedence. `probe` holds the
/// per-operand influence flags; an empty probe means no operands were found.
pub fn classify_error(pred: &Prediction, instance: &TestInstance, probe: &[OperandInfluence]) -> (ErrorType, bool) {
    let outcome = &pred.outcome;
    if pred.program.is_none() || outcome.kind == OutcomeKind::SyntaxError {
        return (ErrorType::SyntaxError, false);
    }
    if matches!(outcome.kind, OutcomeKind::RuntimeError | OutcomeKind::Timeout | OutcomeKind::ProtocolError) {
        return (ErrorType::RuntimeError, false);
    }
    let vm = value_match_code(outcome, instance.truth_value);
    if vm == 0 {
        return (ErrorType::ScaleError, false);
    }
    if vm == 1 {
        return (ErrorType::SignError, false);
    }
    if probe.is_empty() {
        return (ErrorType::CalculationError, true);
    }
    if probe.iter().any(|p| p.influence == Influence::No) {
        (ErrorType::SelectionError, false)
    } else {
        (ErrorType::CalculationError, false)
    }
}

/// Scores a prediction. The probe is consulted only for wrong values.
pub fn score(pred: &Prediction, instance: &TestInstance, probe: &[OperandInfluence]) -> ScoreRecord {
    let em = exact_match(&pred.outcome, instance.truth_value, instance.truth_scale);
    let vm = value_match_code(&pred.outcome, instance.truth_value);
    let (error_type, fallback) = if em == 1 {
        (None, false)
    } else {
        let (t, f) = classify_error(pred, instance, probe);
        (Some(t), f)
    };
    ScoreRecord {
        question_id: pred.question_id.clone(),
        em,
        value_match: vm,
        scale_mismatch: scale_mismatch(&pred.outcome, instance.truth_scale),
        error_type,
        fallback_classification: fallback,
    }
}

/// True when classification needs the sensitivity probe.
pub fn needs_probe(pred: &Prediction, instance: &TestInstance) -> bool {
    pred.program.is_some() && pred.outcome.kind == OutcomeKind::Value && value_match_code(&pred.outcome, instance.truth_value) == 3
}

pub fn aggregate_em(records: &[ScoreRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("score records"));
    }
    let correct = records.iter().filter(|r| r.em == 1).count();
    Ok(correct as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::PredNumber;

    fn dec(s: &str) -> Decimal {
        s.parse().unwrap()
    }

    fn value(n: &str, scale: &str) -> ExecutionOutcome {
        ExecutionOutcome::value(PredNumber::Finite(dec(n)), scale)
    }

    fn instance(v: &str, scale: ScaleTag) -> TestInstance {
        TestInstance {
            question_id: "q".into(),
            question: "?".into(),
            doc_id: "d".into(),
            derivation: "(5,100 - 4,900)/4,900".into(),
            truth_value: dec(v),
            truth_scale: scale,
        }
    }

    fn pred(outcome: ExecutionOutcome) -> Prediction {
        Prediction {
            question_id: "q".into(),
            outcome,
            program: Some("def run(v): pass".into()),
            prompt_hash: "h".into(),
            model: "m".into(),
        }
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match(&value("5.07", "percent"), dec("5.07"), ScaleTag::Percent), 1);
        assert_eq!(exact_match(&value("5.07", "million"), dec("5.07"), ScaleTag::Percent), 0);
        assert_eq!(exact_match(&value("5.074", "percent"), dec("5.07"), ScaleTag::Percent), 1);
        assert_eq!(exact_match(&value("5.075", "percent"), dec("5.07"), ScaleTag::Percent), 0);
        assert_eq!(exact_match(&value("12", " Thousand "), dec("12"), ScaleTag::Thousand), 1);
        assert_eq!(exact_match(&value("12", ""), dec("12"), ScaleTag::None), 1);
        assert_eq!(exact_match(&value("12", "none"), dec("12"), ScaleTag::None), 1);
        assert_eq!(exact_match(&value("0.0507", "percent"), dec("5.07"), ScaleTag::Percent), 0);
    }

    #[test]
    fn value_match_examples() {
        assert_eq!(value_match_code(&value("5.07", ""), dec("5.07")), 0);
        assert_eq!(value_match_code(&value("-5.07", ""), dec("5.07")), 1);
        assert_eq!(value_match_code(&ExecutionOutcome::failure(OutcomeKind::Timeout, ""), dec("5.07")), 2);
        assert_eq!(value_match_code(&ExecutionOutcome::value(PredNumber::NaN, ""), dec("5.07")), 2);
        assert_eq!(value_match_code(&value("6", ""), dec("5.07")), 3);
        assert_eq!(value_match_code(&value("0.001", ""), dec("0")), 0);
    }

    #[test]
    fn precedence() {
        let inst = instance("5.07", ScaleTag::Percent);
        let no_program = Prediction {
            program: None,
            ..pred(ExecutionOutcome::failure(OutcomeKind::SyntaxError, ""))
        };
        assert_eq!(classify_error(&no_program, &inst, &[]).0, ErrorType::SyntaxError);
        let rt = pred(ExecutionOutcome::failure(OutcomeKind::RuntimeError, "ZeroDivisionError"));
        assert_eq!(classify_error(&rt, &inst, &[]).0, ErrorType::RuntimeError);
        let proto = pred(ExecutionOutcome::failure(OutcomeKind::ProtocolError, ""));
        assert_eq!(classify_error(&proto, &inst, &[]).0, ErrorType::RuntimeError);
        let scale = pred(value("5.07", "million"));
        assert_eq!(classify_error(&scale, &inst, &[]).0, ErrorType::ScaleError);
        let sign = pred(value("-5.07", "million"));
        assert_eq!(classify_error(&sign, &inst, &[]).0, ErrorType::SignError);
        let wrong = pred(value("9", "percent"));
        let insensitive = [
            OperandInfluence { operand: dec("5100"), influence: Influence::Yes },
            OperandInfluence { operand: dec("4900"), influence: Influence::No },
        ];
        assert_eq!(classify_error(&wrong, &inst, &insensitive).0, ErrorType::SelectionError);
        let sensitive = [OperandInfluence { operand: dec("5100"), influence: Influence::Yes }];
        assert_eq!(classify_error(&wrong, &inst, &sensitive).0, ErrorType::CalculationError);
        let unknown = [OperandInfluence { operand: dec("5100"), influence: Influence::Unknown }];
        assert_eq!(classify_error(&wrong, &inst, &unknown).0, ErrorType::CalculationError);
        assert_eq!(classify_error(&wrong, &inst, &[]), (ErrorType::CalculationError, true));
    }

    #[test]
    fn score_invariants() {
        let inst = instance("5.07", ScaleTag::Percent);
        let ok = score(&pred(value("5.07", "Percent")), &inst, &[]);
        assert_eq!((ok.em, ok.value_match, ok.scale_mismatch, ok.error_type), (1, 0, false, None));
        let failed = score(&pred(ExecutionOutcome::failure(OutcomeKind::Timeout, "")), &inst, &[]);
        assert_eq!(failed.em, 0);
        assert_eq!(failed.value_match, 2);
        assert!(failed.scale_mismatch);
        assert_eq!(failed.error_type, Some(ErrorType::RuntimeError));
    }

    fn record(em: u8) -> ScoreRecord {
        ScoreRecord {
            question_id: String::new(),
            em,
            value_match: 0,
            scale_mismatch: false,
            error_type: None,
            fallback_classification: false,
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut rs: Vec<ScoreRecord> = (0..497).map(|i| record(u8::from(i < 298))).collect();
        assert_eq!(format!("{:.4}", aggregate_em(&rs).unwrap()), "0.5996");
        assert_eq!(rs.iter().filter(|r| r.em == 0).count(), 199);
        for r in rs.iter_mut().take(352) {
            r.em = 1;
        }
        assert_eq!(format!("{:.4}", aggregate_em(&rs).unwrap()), "0.7082");
        assert_eq!(aggregate_em(&[record(1)]).unwrap(), 1.0);
        assert!(aggregate_em(&[]).is_err());
    }
}
