//! Error features and their one-hot encoding.

pub mod code_pattern;
pub mod pattern;
pub mod pyast;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use code_pattern::code_pattern;
pub use pattern::{derivation_pattern, extract_operands, normalize, CalcPattern};

use crate::error::{Error, Result};
use crate::scoring::ErrorType;

pub const DEFAULT_MIN_FREQ: usize = 3;

/// A failed prediction described by its five clustering features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub question_id: String,
    pub calc_pattern: CalcPattern,
    pub code_calc_pattern: CalcPattern,
    pub scale_mismatch: bool,
    pub value_match: u8,
    pub error_type: ErrorType,
}

/// Renames every pattern seen fewer than `min_freq` times in `population` to `other`.
pub fn group_rare(population: &[CalcPattern], min_freq: usize) -> Vec<CalcPattern> {
    let mut counts: BTreeMap<&CalcPattern, usize> = BTreeMap::new();
    for p in population {
        *counts.entry(p).or_default() += 1;
    }
    population
        .iter()
        .map(|p| if counts[p] < min_freq { CalcPattern::other() } else { p.clone() })
        .collect()
}

/// Frequency table sorted by count descending, then pattern, with `other` last.
pub fn pattern_frequencies(patterns: &[CalcPattern]) -> Vec<(CalcPattern, usize)> {
    let mut counts: BTreeMap<CalcPattern, usize> = BTreeMap::new();
    for p in patterns {
        *counts.entry(p.clone()).or_default() += 1;
    }
    let mut rows: Vec<(CalcPattern, usize)> = counts.into_iter().collect();
    rows.sort_by(|a, b| a.0.is_other().cmp(&b.0.is_other()).then(b.1.cmp(&a.1)).then(a.0.cmp(&b.0)));
    rows
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<u8>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }
}

fn categorical(r: &ErrorRecord) -> [(&'static str, String); 4] {
    [
        ("calc_pattern", r.calc_pattern.as_str().to_string()),
        ("code_calc_pattern", r.code_calc_pattern.as_str().to_string()),
        ("error_type", r.error_type.as_str().to_string()),
        ("value_match", r.value_match.to_string()),
    ]
}

/// One-hot encodes the records. Columns are ordered by feature name, then by
/// category; `scale_mismatch` is a single binary column.
pub fn vectorize(errors: &[ErrorRecord]) -> Result<FeatureMatrix> {
    if errors.is_empty() {
        return Err(Error::Empty("error records"));
    }
    let mut columns: BTreeSet<(String, Option<String>)> = BTreeSet::new();
    columns.insert(("scale_mismatch".to_string(), None));
    for r in errors {
        for (name, value) in categorical(r) {
            columns.insert((name.to_string(), Some(value)));
        }
    }
    let index: BTreeMap<&(String, Option<String>), usize> = columns.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let rows = errors
        .iter()
        .map(|r| {
            let mut row = vec![0u8; columns.len()];
            for (name, value) in categorical(r) {
                row[index[&(name.to_string(), Some(value))]] = 1;
            }
            row[index[&("scale_mismatch".to_string(), None)]] = u8::from(r.scale_mismatch);
            row
        })
        .collect();
    let columns = columns
        .into_iter()
        .map(|(name, value)| match value {
            Some(v) => format!("{name}={v}"),
            None => name,
        })
        .collect();
    Ok(FeatureMatrix { columns, rows })
}

/// Counts of calc pattern by error type; rows sorted like [`pattern_frequencies`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTab {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

pub fn crosstab(errors: &[ErrorRecord]) -> CrossTab {
    let patterns: Vec<CalcPattern> = errors.iter().map(|e| e.calc_pattern.clone()).collect();
    let rows = pattern_frequencies(&patterns);
    let row_index: BTreeMap<&CalcPattern, usize> = rows.iter().enumerate().map(|(i, (p, _))| (p, i)).collect();
    let mut counts = vec![vec![0usize; ErrorType::ALL.len()]; rows.len()];
    for e in errors {
        let col = ErrorType::ALL.iter().position(|t| *t == e.error_type).unwrap_or(0);
        counts[row_index[&e.calc_pattern]][col] += 1;
    }
    CrossTab {
        row_labels: rows.iter().map(|(p, _)| p.as_str().to_string()).collect(),
        col_labels: ErrorType::ALL.iter().map(|t| t.as_str().to_string()).collect(),
        counts,
    }
}
