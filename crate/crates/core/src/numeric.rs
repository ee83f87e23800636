//! Numeric grammar shared by table cells, ground-truth answers and program output.

use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};

const CURRENCY: &[char] = &['$', '€', '£', '¥'];
const MINUS: &[char] = &['-', '−', '–'];

/// A numeral read out of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellNumber {
    pub value: Decimal,
    pub is_percent: bool,
}

/// Reads a table cell as a number.
///
/// Currency symbols, thousands separators and surrounding whitespace are
/// dropped, `(x)` reads as `-x` and a trailing `%` sets `is_percent`.
pub fn parse_numeric_cell(text: &str) -> Option<CellNumber> {
    let mut s = text.trim();
    let mut is_percent = false;
    let mut negative = false;

    if let Some(rest) = s.strip_suffix('%') {
        is_percent = true;
        s = rest.trim_end();
    }
    s = s.trim_start_matches(|c: char| CURRENCY.contains(&c) || c.is_whitespace());
    if let Some(inner) = s.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
        negative = true;
        s = inner.trim();
    }
    if !is_percent {
        if let Some(rest) = s.strip_suffix('%') {
            is_percent = true;
            s = rest.trim_end();
        }
    }
    s = s.trim_start_matches(|c: char| CURRENCY.contains(&c) || c.is_whitespace());
    if let Some(rest) = s.strip_prefix(MINUS) {
        negative = !negative;
        s = rest;
    } else if let Some(rest) = s.strip_prefix('+') {
        s = rest;
    }
    s = s.trim_start_matches(|c: char| CURRENCY.contains(&c) || c.is_whitespace());

    let value = parse_plain_numeral(s)?;
    Some(CellNumber {
        value: if negative { -value } else { value },
        is_percent,
    })
}

/// Unsigned numeral with optional comma grouping and decimal part.
pub(crate) fn parse_plain_numeral(s: &str) -> Option<Decimal> {
    if s.is_empty() || !s.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    if let Some(f) = frac_part {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    if int_part.is_empty() {
        frac_part?;
    } else if int_part.contains(',') {
        let mut groups = int_part.split(',');
        let head = groups.next()?;
        if head.is_empty() || head.len() > 3 || !head.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        for g in groups {
            if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
        }
    } else if !int_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let cleaned: String = s.chars().filter(|&c| c != ',').collect();
    let cleaned = if cleaned.starts_with('.') {
        format!("0{cleaned}")
    } else {
        cleaned
    };
    Decimal::from_str(&cleaned).ok()
}

/// Parses a float rendering such as Python's `repr`, including exponents.
pub fn parse_float_text(s: &str) -> Option<Decimal> {
    let s = s.trim();
    if s.contains(['e', 'E']) {
        Decimal::from_scientific(s).ok()
    } else {
        Decimal::from_str(s).ok()
    }
}

/// Rounds to two decimals, half away from zero.
pub fn round2(value: Decimal) -> Decimal {
    value.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

/// True for cells like `2019` that label a period rather than measure one.
pub fn is_year_like(text: &str) -> bool {
    let t = text.trim();
    t.len() == 4 && t.bytes().all(|b| b.is_ascii_digit()) && (1900..=2100).contains(&t.parse::<u32>().unwrap_or(0))
}

pub(crate) mod decimal_json {
    //! Serializes decimals as plain JSON numbers (`1204`, `5.07`), never strings.
    use std::str::FromStr;

    use rust_decimal::prelude::ToPrimitive;
    use rust_decimal::Decimal;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Decimal, s: S) -> Result<S::Ok, S::Error> {
        let v = value.normalize();
        if v.scale() == 0 {
            if let Some(i) = v.to_i64() {
                return s.serialize_i64(i);
            }
        }
        s.serialize_f64(v.to_f64().unwrap_or(f64::NAN))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
        let n = serde_json::Number::deserialize(d)?;
        Decimal::from_str(&n.to_string())
            .or_else(|_| Decimal::from_scientific(&n.to_string()))
            .map_err(de::Error::custom)
    }
}
