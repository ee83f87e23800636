//! Paired before/after comparison: exact binomial McNemar test and ΔEM.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub question_id: String,
    pub before: u8,
    pub after: u8,
}

/// Joins before/after EM values on question id. Every id in `after` must
/// appear in `before`.
pub fn align_pairs(before: &BTreeMap<String, u8>, after: &BTreeMap<String, u8>) -> Result<Vec<PairedOutcome>> {
    after
        .iter()
        .map(|(qid, &a)| {
            let b = *before
                .get(qid)
                .ok_or_else(|| Error::NotFound(format!("no earlier prediction for question {qid}")))?;
            Ok(PairedOutcome {
                question_id: qid.clone(),
                before: b,
                after: a,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Pairs that went 0 → 1.
    pub b: u64,
    /// Pairs that went 1 → 0.
    pub c: u64,
    pub n: u64,
    pub p_exact: f64,
    /// `p_exact` to four significant digits.
    pub p_display: String,
    /// Exact value as `numerator/denominator`.
    pub p_fraction: String,
}

fn check_unique(pairs: &[PairedOutcome]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for p in pairs {
        if !seen.insert(p.question_id.as_str()) {
            return Err(Error::Duplicate(format!("question {} paired twice", p.question_id)));
        }
    }
    Ok(())
}

fn binomial(n: u64, k: u64) -> BigInt {
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Two-sided exact p for discordant counts `b`, `c`:
/// min(1, 2 · Σ_{k=max(b,c)}^{n} C(n,k) / 2^n).
pub fn mcnemar_p_exact(b: u64, c: u64) -> BigRational {
    let n = b + c;
    if n == 0 {
        return BigRational::one();
    }
    let tail: BigInt = (b.max(c)..=n).map(|k| binomial(n, k)).sum();
    let p = BigRational::new(tail * 2, BigInt::one() << n);
    if p > BigRational::one() {
        BigRational::one()
    } else {
        p
    }
}

fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| {
        // Fall back to digit counting for values outside f64's direct conversion.
        let num = r.numer().to_string().len() as i32;
        let den = r.denom().to_string().len() as i32;
        10f64.powi(num - den)
    })
}

/// Four significant digits; scientific notation below 0.001.
pub fn format_p(p: f64) -> String {
    if p == 0.0 {
        return "0".into();
    }
    if p >= 1e-3 {
        let magnitude = p.log10().floor() as i32;
        let decimals = (3 - magnitude).max(0) as usize;
        format!("{p:.decimals$}")
    } else {
        format!("{p:.3e}")
    }
}

pub fn mcnemar_exact(pairs: &[PairedOutcome]) -> Result<McNemarResult> {
    check_unique(pairs)?;
    let b = pairs.iter().filter(|p| p.before == 0 && p.after == 1).count() as u64;
    let c = pairs.iter().filter(|p| p.before == 1 && p.after == 0).count() as u64;
    Ok(mcnemar_from_counts(b, c))
}

pub fn mcnemar_from_counts(b: u64, c: u64) -> McNemarResult {
    let p = mcnemar_p_exact(b, c);
    let p_exact = rational_to_f64(&p);
    McNemarResult {
        b,
        c,
        n: b + c,
        p_exact,
        p_display: format_p(p_exact),
        p_fraction: format!("{}/{}", p.numer(), p.denom()),
    }
}

impl McNemarResult {
    pub fn p_rational(&self) -> BigRational {
        let (num, den) = self.p_fraction.split_once('/').unwrap_or(("1", "1"));
        BigRational::new(num.parse().unwrap_or_else(|_| BigInt::one()), den.parse().unwrap_or_else(|_| BigInt::one()))
    }
}

/// Local ΔEM as an exact fraction `(Σ after − Σ before) / n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaEm {
    pub gained: i64,
    pub n: u64,
}

impl DeltaEm {
    pub fn value(&self) -> f64 {
        self.gained as f64 / self.n as f64
    }

    fn rational(&self) -> BigRational {
        BigRational::new(BigInt::from(self.gained), BigInt::from(self.n))
    }
}

pub fn delta_em_local(pairs: &[PairedOutcome]) -> Result<DeltaEm> {
    if pairs.is_empty() {
        return Err(Error::Empty("paired outcomes"));
    }
    check_unique(pairs)?;
    let after: i64 = pairs.iter().map(|p| i64::from(p.after)).sum();
    let before: i64 = pairs.iter().map(|p| i64::from(p.before)).sum();
    Ok(DeltaEm {
        gained: after - before,
        n: pairs.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub delta_min: f64,
    pub p_max: f64,
    /// Accept ΔEM equal to `delta_min` as well.
    #[serde(default)]
    pub delta_inclusive: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            delta_min: 0.5,
            p_max: 0.0625,
            delta_inclusive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected,
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap_or_else(BigRational::zero)
}

/// Compares exactly: the p threshold sits on a reachable value (1/16).
pub fn accept_exact(delta: &DeltaEm, p: &BigRational, t: &Thresholds) -> Verdict {
    let d = delta.rational();
    let delta_ok = if t.delta_inclusive { d >= exact(t.delta_min) } else { d > exact(t.delta_min) };
    if delta_ok && *p <= exact(t.p_max) {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    }
}

/// Float form for reported values.
pub fn accept_candidate(delta: f64, p: f64, t: &Thresholds) -> Verdict {
    let delta_ok = if t.delta_inclusive { delta >= t.delta_min } else { delta > t.delta_min };
    if delta_ok && p <= t.p_max {
        Verdict::Accepted
    } else {
        Verdict::Rejected
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(b: usize, c: usize, same: usize) -> Vec<PairedOutcome> {
        let mut out = Vec::new();
        for i in 0..b {
            out.push(PairedOutcome { question_id: format!("b{i}"), before: 0, after: 1 });
        }
        for i in 0..c {
            out.push(PairedOutcome { question_id: format!("c{i}"), before: 1, after: 0 });
        }
        for i in 0..same {
            out.push(PairedOutcome { question_id: format!("s{i}"), before: 0, after: 0 });
        }
        out
    }

    #[test]
    fn exact_values() {
        assert_eq!(mcnemar_p_exact(5, 0), BigRational::new(1.into(), 16.into()));
        assert_eq!(mcnemar_p_exact(3, 0), BigRational::new(1.into(), 4.into()));
        assert_eq!(mcnemar_p_exact(4, 0), BigRational::new(1.into(), 8.into()));
        assert_eq!(mcnemar_p_exact(2, 0), BigRational::new(1.into(), 2.into()));
        assert_eq!(mcnemar_p_exact(0, 0), BigRational::one());
        assert_eq!(mcnemar_p_exact(20, 1), BigRational::new(44.into(), BigInt::one() << 21u32));
        assert_eq!(mcnemar_p_exact(3, 3), BigRational::one());
    }

    #[test]
    fn rendering() {
        assert_eq!(mcnemar_from_counts(5, 0).p_display, "0.06250");
        assert_eq!(mcnemar_from_counts(2, 0).p_display, "0.5000");
        assert_eq!(mcnemar_from_counts(0, 0).p_display, "1.000");
        assert_eq!(mcnemar_from_counts(20, 1).p_display, "2.098e-5");
        assert_eq!(mcnemar_from_counts(20, 0).p_display, "1.907e-6");
    }

    #[test]
    fn counts_from_pairs() {
        let r = mcnemar_exact(&pairs(20, 1, 1)).unwrap();
        assert_eq!((r.b, r.c, r.n), (20, 1, 21));
        assert!((r.p_exact - 2.098e-5).abs() < 1e-8);
        let mut dup = pairs(1, 0, 0);
        dup.push(dup[0].clone());
        assert!(mcnemar_exact(&dup).is_err());
    }

    #[test]
    fn delta_examples() {
        let d = delta_em_local(&pairs(20, 0, 2)).unwrap();
        assert_eq!(format!("{:.2}", d.value() * 100.0), "90.91");
        let d = delta_em_local(&pairs(5, 0, 3)).unwrap();
        assert_eq!(format!("{:.2}", d.value() * 100.0), "62.50");
        assert_eq!(delta_em_local(&pairs(0, 0, 4)).unwrap().value(), 0.0);
        assert!(delta_em_local(&[]).is_err());
    }

    #[test]
    fn verdicts() {
        let t = Thresholds::default();
        assert_eq!(accept_candidate(0.9091, 2.1e-5, &t), Verdict::Accepted);
        assert_eq!(accept_candidate(0.5714, 0.125, &t), Verdict::Rejected);
        assert_eq!(accept_candidate(0.5, 0.01, &t), Verdict::Rejected);
        let half = DeltaEm { gained: 4, n: 8 };
        assert_eq!(accept_exact(&half, &mcnemar_p_exact(4, 0), &t), Verdict::Rejected);
        let v3 = DeltaEm { gained: 5, n: 8 };
        assert_eq!(accept_exact(&v3, &mcnemar_p_exact(5, 0), &t), Verdict::Accepted);
        let inclusive = Thresholds { delta_inclusive: true, ..t };
        assert_eq!(accept_exact(&DeltaEm { gained: 5, n: 10 }, &mcnemar_p_exact(5, 0), &inclusive), Verdict::Accepted);
    }

    #[test]
    fn alignment() {
        let before: BTreeMap<String, u8> = [("a".to_string(), 0), ("b".to_string(), 0)].into();
        let after: BTreeMap<String, u8> = [("a".to_string(), 1)].into();
        let p = align_pairs(&before, &after).unwrap();
        assert_eq!(p, vec![PairedOutcome { question_id: "a".into(), before: 0, after: 1 }]);
        let stray: BTreeMap<String, u8> = [("z".to_string(), 1)].into();
        assert!(align_pairs(&before, &stray).is_err());
    }
}
