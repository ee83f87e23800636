//! Flattens a table grid into labeled numeric cells.
//!
//! The grid is read in three parts:
//!
//! * a leading header block: rows whose non-label cells are all text or
//!   year-like (`2019`). Stacked header cells of one column are joined with a
//!   single space. Label-only rows inside the block are captions.
//! * column 0 is the label column and never produces values.
//! * body rows. A row with a label and no other content is a section heading
//!   and prefixes the category of the rows below it (`Heading / Label`).
//!   Consecutive headings nest; a heading after a data row starts a new path.
//!   A body row with an empty label and only text/year cells re-labels the
//!   columns for the rows below it.
//!
//! Every other cell that parses under the numeric grammar becomes one
//! [`AnnotatedValue`], in row-major order.

use std::collections::BTreeMap;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ScaleTag, SourceDocument, TestInstance};
use crate::features::extract_operands;
use crate::numeric::{decimal_json, is_year_like, parse_numeric_cell};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedValue {
    pub category: String,
    pub header: String,
    #[serde(with = "decimal_json")]
    pub number_value: Decimal,
    pub raw_text: String,
    pub scale_hint: Option<ScaleTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueList {
    pub doc_id: String,
    pub items: Vec<AnnotatedValue>,
}

#[derive(Serialize)]
struct PromptItem<'a> {
    category: &'a str,
    header: &'a str,
    #[serde(with = "decimal_json")]
    number_value: &'a Decimal,
    #[serde(skip_serializing_if = "Option::is_none")]
    raw_text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale_hint: Option<String>,
}

impl ValueList {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// The JSON array substituted into the prompt and handed to programs.
    ///
    /// Only `category`, `header` and `number_value` are written unless
    /// `verbose` is set.
    pub fn to_json(&self, verbose: bool) -> String {
        let items: Vec<PromptItem<'_>> = self
            .items
            .iter()
            .map(|v| PromptItem {
                category: &v.category,
                header: &v.header,
                number_value: &v.number_value,
                raw_text: verbose.then_some(v.raw_text.as_str()),
                scale_hint: if verbose {
                    v.scale_hint.map(|s| s.to_string())
                } else {
                    None
                },
            })
            .collect();
        serde_json::to_string(&items).expect("value list serializes")
    }

    /// Values equal in magnitude to `operand`.
    pub fn positions_of(&self, operand: Decimal) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, v)| v.number_value.abs() == operand.abs())
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
enum RowKind {
    Blank,
    /// Label present, every other cell empty.
    LabelOnly,
    /// Only text or year-like cells outside the label column.
    HeaderLike,
    Data,
}

fn classify(row: &[String]) -> RowKind {
    let label = row.first().map(|s| s.trim()).unwrap_or("");
    let rest: Vec<&str> = row
        .iter()
        .skip(1)
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect();
    if rest.is_empty() {
        return if label.is_empty() {
            RowKind::Blank
        } else {
            RowKind::LabelOnly
        };
    }
    let has_measure = rest
        .iter()
        .any(|c| parse_numeric_cell(c).is_some() && !is_year_like(c));
    if has_measure {
        RowKind::Data
    } else {
        RowKind::HeaderLike
    }
}

/// Number of leading rows forming the header block.
fn header_block_len(grid: &[Vec<String>]) -> usize {
    let mut saw_header = false;
    for (i, row) in grid.iter().enumerate() {
        match classify(row) {
            RowKind::Data => return if saw_header { i } else { 0 },
            RowKind::LabelOnly if saw_header => return i,
            RowKind::HeaderLike => saw_header = true,
            RowKind::LabelOnly | RowKind::Blank => {}
        }
    }
    if saw_header {
        grid.len()
    } else {
        0
    }
}

fn column_headers(rows: &[Vec<String>], width: usize) -> Vec<String> {
    (0..width)
        .map(|j| {
            let parts: Vec<&str> = rows
                .iter()
                .filter_map(|r| r.get(j))
                .map(|c| c.trim())
                .filter(|c| !c.is_empty())
                .collect();
            if parts.is_empty() {
                format!("col_{j}")
            } else {
                parts.join(" ")
            }
        })
        .collect()
}

fn scale_from_text(text: &str) -> Option<ScaleTag> {
    let t = text.to_lowercase();
    if t.contains("billion") {
        Some(ScaleTag::Billion)
    } else if t.contains("million") {
        Some(ScaleTag::Million)
    } else if t.contains("thousand") || t.contains("'000") || t.contains("’000") {
        Some(ScaleTag::Thousand)
    } else if t.contains('%') || t.contains("percent") {
        Some(ScaleTag::Percent)
    } else {
        None
    }
}

pub fn restructure_table(doc: &SourceDocument) -> ValueList {
    let grid = &doc.table;
    let width = grid.iter().map(Vec::len).max().unwrap_or(0);
    let header_len = header_block_len(grid);
    let (head, body) = grid.split_at(header_len);

    let header_rows: Vec<Vec<String>> = head
        .iter()
        .filter(|r| classify(r) == RowKind::HeaderLike)
        .cloned()
        .collect();
    let caption: String = head
        .iter()
        .flat_map(|r| r.iter())
        .map(|c| c.trim())
        .filter(|c| !c.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    let table_scale = scale_from_text(&caption);
    let mut headers = column_headers(&header_rows, width);

    let mut items = Vec::new();
    let mut path: Vec<String> = Vec::new();
    let mut heading_run = false;

    for (offset, row) in body.iter().enumerate() {
        let row_index = header_len + offset;
        match classify(row) {
            RowKind::Blank => continue,
            RowKind::LabelOnly => {
                if !heading_run {
                    path.clear();
                }
                path.push(row[0].trim().to_string());
                heading_run = true;
                continue;
            }
            RowKind::HeaderLike if row[0].trim().is_empty() => {
                headers = column_headers(std::slice::from_ref(row), width);
                heading_run = false;
                continue;
            }
            RowKind::HeaderLike | RowKind::Data => {}
        }
        heading_run = false;

        let label = row[0].trim();
        let label = if label.is_empty() {
            format!("row_{row_index}")
        } else {
            label.to_string()
        };
        let category = if path.is_empty() {
            label
        } else {
            format!("{} / {}", path.join(" / "), label)
        };

        for (j, cell) in row.iter().enumerate().skip(1) {
            let Some(num) = parse_numeric_cell(cell) else {
                continue;
            };
            let scale_hint = if num.is_percent {
                Some(ScaleTag::Percent)
            } else {
                scale_from_text(&headers[j])
                    .or_else(|| scale_from_text(&category).filter(|s| *s == ScaleTag::Percent))
                    .or(table_scale)
            };
            items.push(AnnotatedValue {
                category: category.clone(),
                header: headers[j].clone(),
                number_value: num.value,
                raw_text: cell.clone(),
                scale_hint,
            });
        }
    }

    ValueList {
        doc_id: doc.doc_id.clone(),
        items,
    }
}

/// Whether every derivation operand of each instance occurs in its value list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: usize,
    pub total: usize,
    /// Question ids with at least one operand missing from the value list.
    pub shortfalls: Vec<String>,
}

impl CoverageReport {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.covered as f64 / self.total as f64
        }
    }
}

pub fn operand_coverage(
    instances: &[TestInstance],
    lists: &BTreeMap<String, ValueList>,
) -> CoverageReport {
    let mut report = CoverageReport::default();
    for inst in instances {
        report.total += 1;
        let ok = lists.get(&inst.doc_id).is_some_and(|vl| {
            extract_operands(&inst.derivation)
                .iter()
                .all(|o| !vl.positions_of(*o).is_empty())
        });
        if ok {
            report.covered += 1;
        } else {
            report.shortfalls.push(inst.question_id.clone());
        }
    }
    report
}
