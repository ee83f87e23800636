//! TAT-QA ingestion and the arithmetic/table-only filter.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::parse_numeric_cell;

/// The dataset's tag for answers produced by a calculation.
pub const ARITHMETIC_ANSWER_TYPE: &str = "arithmetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleTag {
    Thousand,
    Million,
    Billion,
    Percent,
    None,
}

impl ScaleTag {
    pub const ALL: [ScaleTag; 5] = [
        ScaleTag::Thousand,
        ScaleTag::Million,
        ScaleTag::Billion,
        ScaleTag::Percent,
        ScaleTag::None,
    ];

    /// The string the model is asked to return for this scale.
    pub fn as_answer_str(self) -> &'static str {
        match self {
            ScaleTag::Thousand => "thousand",
            ScaleTag::Million => "million",
            ScaleTag::Billion => "billion",
            ScaleTag::Percent => "percent",
            ScaleTag::None => "",
        }
    }
}

impl fmt::Display for ScaleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleTag::None => f.write_str("none"),
            other => f.write_str(other.as_answer_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownScale(pub String);

impl fmt::Display for UnknownScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown scale `{}`", self.0)
    }
}

impl std::error::Error for UnknownScale {}

impl FromStr for ScaleTag {
    type Err = UnknownScale;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thousand" => Ok(ScaleTag::Thousand),
            "million" => Ok(ScaleTag::Million),
            "billion" => Ok(ScaleTag::Billion),
            "percent" => Ok(ScaleTag::Percent),
            "" | "none" => Ok(ScaleTag::None),
            _ => Err(UnknownScale(s.to_string())),
        }
    }
}

/// A question exactly as it appears in the source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub uid: String,
    pub question: String,
    pub answer_type: String,
    pub answer: Value,
    pub scale: String,
    pub derivation: String,
    pub answer_from: Option<String>,
    pub rel_paragraphs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    /// Rectangular grid; short rows are padded with empty cells on load.
    pub table: Vec<Vec<String>>,
    pub paragraphs: Vec<String>,
    pub questions: Vec<RawQuestion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestInstance {
    pub question_id: String,
    pub question: String,
    pub doc_id: String,
    pub derivation: String,
    pub truth_value: Decimal,
    pub truth_scale: ScaleTag,
}

/// How "the answer needs only the table" is read off a question record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceAdapter {
    /// `answer_from == "table"` and no related paragraphs.
    #[default]
    Strict,
    /// Only `answer_from == "table"`.
    AnswerFrom,
    /// Only an empty `rel_paragraphs` list.
    RelParagraphs,
}

impl EvidenceAdapter {
    fn table_only(self, q: &RawQuestion) -> bool {
        let from_table = q.answer_from.as_deref().map(|s| s.trim() == "table");
        let no_paragraphs = q.rel_paragraphs.is_empty();
        match self {
            EvidenceAdapter::Strict => from_table.unwrap_or(true) && no_paragraphs,
            EvidenceAdapter::AnswerFrom => from_table.unwrap_or(no_paragraphs),
            EvidenceAdapter::RelParagraphs => no_paragraphs,
        }
    }
}

/// Reads a TAT-QA file: a JSON array of `{table, paragraphs, questions}`.
pub fn load_dataset(path: &Path) -> Result<Vec<SourceDocument>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Vec<SourceDocument>> {
    let root: Value = serde_json::from_slice(bytes)?;
    let docs = root.as_array().ok_or_else(|| Error::MalformedRecord {
        doc_index: 0,
        field: "<root>".into(),
        message: "expected a JSON array of documents".into(),
    })?;
    docs.iter()
        .enumerate()
        .map(|(i, d)| parse_document(i, d))
        .collect()
}

fn malformed(doc_index: usize, field: &str, message: impl Into<String>) -> Error {
    Error::MalformedRecord {
        doc_index,
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, idx: usize, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| malformed(idx, name, "missing field"))
}

fn string_field(obj: &Map<String, Value>, idx: usize, name: &str) -> Result<String> {
    match field(obj, idx, name)? {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(malformed(idx, name, format!("expected string, got {other}"))),
    }
}

fn optional_string(obj: &Map<String, Value>, idx: usize, name: &str) -> Result<Option<String>> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(_) => string_field(obj, idx, name).map(Some),
    }
}

fn parse_document(idx: usize, doc: &Value) -> Result<SourceDocument> {
    let obj = doc
        .as_object()
        .ok_or_else(|| malformed(idx, "<document>", "expected object"))?;

    let table_obj = field(obj, idx, "table")?
        .as_object()
        .ok_or_else(|| malformed(idx, "table", "expected object"))?;
    let doc_id = string_field(table_obj, idx, "uid")
        .map_err(|_| malformed(idx, "table.uid", "missing or not a string"))?;
    let rows = field(table_obj, idx, "table")?
        .as_array()
        .ok_or_else(|| malformed(idx, "table.table", "expected array of rows"))?;
    let mut table = Vec::with_capacity(rows.len());
    for row in rows {
        let cells = row
            .as_array()
            .ok_or_else(|| malformed(idx, "table.table", "row is not an array"))?;
        table.push(
            cells
                .iter()
                .map(|c| match c {
                    Value::String(s) => s.clone(),
                    Value::Null => String::new(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>(),
        );
    }
    let width = table.iter().map(Vec::len).max().unwrap_or(0);
    if width == 0 {
        return Err(malformed(idx, "table.table", "table grid is empty"));
    }
    for row in &mut table {
        row.resize(width, String::new());
    }

    let paragraphs = match obj.get("paragraphs") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(ps)) => ps
            .iter()
            .map(|p| match p {
                Value::Object(m) => string_field(m, idx, "text"),
                Value::String(s) => Ok(s.clone()),
                _ => Err(malformed(idx, "paragraphs", "unexpected paragraph shape")),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(malformed(idx, "paragraphs", "expected array")),
    };

    let questions = field(obj, idx, "questions")?
        .as_array()
        .ok_or_else(|| malformed(idx, "questions", "expected array"))?
        .iter()
        .map(|q| parse_question(idx, q))
        .collect::<Result<Vec<_>>>()?;

    Ok(SourceDocument {
        doc_id,
        table,
        paragraphs,
        questions,
    })
}

fn parse_question(idx: usize, q: &Value) -> Result<RawQuestion> {
    let obj = q
        .as_object()
        .ok_or_else(|| malformed(idx, "questions", "question is not an object"))?;
    let rel_paragraphs = match obj.get("rel_paragraphs") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|x| match x {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect(),
        Some(_) => return Err(malformed(idx, "questions.rel_paragraphs", "expected array")),
    };
    Ok(RawQuestion {
        uid: string_field(obj, idx, "uid").map_err(|_| malformed(idx, "questions.uid", "missing or not a string"))?,
        question: string_field(obj, idx, "question")
            .map_err(|_| malformed(idx, "questions.question", "missing or not a string"))?,
        answer_type: string_field(obj, idx, "answer_type")
            .map_err(|_| malformed(idx, "questions.answer_type", "missing or not a string"))?,
        answer: obj.get("answer").cloned().unwrap_or(Value::Null),
        scale: optional_string(obj, idx, "scale")?.unwrap_or_default(),
        derivation: optional_string(obj, idx, "derivation")?.unwrap_or_default(),
        answer_from: optional_string(obj, idx, "answer_from")?,
        rel_paragraphs,
    })
}

/// Parses the numeric answer and scale of a question.
pub fn parse_ground_truth(q: &RawQuestion) -> Result<(Decimal, ScaleTag)> {
    let bad = || Error::BadAnswer {
        question_id: q.uid.clone(),
        answer: q.answer.to_string(),
    };
    let value = match &q.answer {
        Value::Number(n) => {
            let s = n.to_string();
            Decimal::from_str(&s)
                .or_else(|_| Decimal::from_scientific(&s))
                .map_err(|_| bad())?
        }
        Value::String(s) => parse_numeric_cell(s).ok_or_else(bad)?.value,
        Value::Array(xs) if xs.len() == 1 => {
            let single = RawQuestion {
                answer: xs[0].clone(),
                ..q.clone()
            };
            return parse_ground_truth(&single);
        }
        _ => return Err(bad()),
    };
    let scale = ScaleTag::from_str(&q.scale).map_err(|_| bad())?;
    Ok((value, scale))
}

/// A question the filter admitted but whose answer could not be read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub question_id: String,
    pub diagnostic: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub instances: Vec<TestInstance>,
    pub rejected: Vec<Rejection>,
}

impl FilterOutcome {
    pub fn table_count(&self) -> usize {
        self.instances
            .iter()
            .map(|i| i.doc_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

pub fn filter_with_diagnostics(docs: &[SourceDocument], adapter: EvidenceAdapter) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for doc in docs {
        for q in &doc.questions {
            if q.answer_type.trim() != ARITHMETIC_ANSWER_TYPE || !adapter.table_only(q) {
                continue;
            }
            if q.derivation.trim().is_empty() {
                out.rejected.push(Rejection {
                    question_id: q.uid.clone(),
                    diagnostic: "arithmetic question without derivation".into(),
                });
                continue;
            }
            match parse_ground_truth(q) {
                Ok((truth_value, truth_scale)) => out.instances.push(TestInstance {
                    question_id: q.uid.clone(),
                    question: q.question.clone(),
                    doc_id: doc.doc_id.clone(),
                    derivation: q.derivation.clone(),
                    truth_value,
                    truth_scale,
                }),
                Err(e) => {
                    tracing::warn!(question = %q.uid, "rejected: {e}");
                    out.rejected.push(Rejection {
                        question_id: q.uid.clone(),
                        diagnostic: e.to_string(),
                    });
                }
            }
        }
    }
    out
}

/// Arithmetic questions answerable from the table alone, using the strict adapter.
pub fn filter_arithmetic_table_only(docs: &[SourceDocument]) -> Vec<TestInstance> {
    filter_with_diagnostics(docs, EvidenceAdapter::Strict).instances
}

/// Keeps only documents and questions that survived the filter.
pub fn restrict(docs: &[SourceDocument], instances: &[TestInstance]) -> Vec<SourceDocument> {
    let keep: BTreeSet<&str> = instances.iter().map(|i| i.question_id.as_str()).collect();
    docs.iter()
        .filter_map(|d| {
            let questions: Vec<_> = d
                .questions
                .iter()
                .filter(|q| keep.contains(q.uid.as_str()))
                .cloned()
                .collect();
            (!questions.is_empty()).then(|| SourceDocument {
                questions,
                ..d.clone()
            })
        })
        .collect()
}

/// Hex SHA-256 of the dataset file, recorded in every run.
pub fn dataset_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_instances(path: &Path, instances: &[TestInstance]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for inst in instances {
        let line = serde_json::to_string(inst)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<TestInstance>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
