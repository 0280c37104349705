//! Property and oracle checks with a pass/fail report.
//!
//! Every check returns one or more measurements, each compared against an
//! explicit bound. Checks are selected by substring match on their name.

mod masks;
mod models;
mod support;
mod tensors;
mod training;

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::error::Result;

/// Acceptance region for a measured value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    /// `value < limit`
    Below { limit: f64 },
    /// `value > limit`
    Above { limit: f64 },
    /// `value >= limit`
    AtLeast { limit: f64 },
    /// `lo <= value <= hi`
    Within { lo: f64, hi: f64 },
    /// `value == target`
    Equals { target: f64 },
}

impl Bound {
    pub fn below(limit: f64) -> Self {
        Bound::Below { limit }
    }
    pub fn above(limit: f64) -> Self {
        Bound::Above { limit }
    }
    pub fn at_least(limit: f64) -> Self {
        Bound::AtLeast { limit }
    }
    pub fn within(lo: f64, hi: f64) -> Self {
        Bound::Within { lo, hi }
    }
    pub fn equals(target: f64) -> Self {
        Bound::Equals { target }
    }

    pub fn admits(&self, v: f64) -> bool {
        match *self {
            Bound::Below { limit } => v < limit,
            Bound::Above { limit } => v > limit,
            Bound::AtLeast { limit } => v >= limit,
            Bound::Within { lo, hi } => (lo..=hi).contains(&v),
            Bound::Equals { target } => v == target,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Bound::Below { limit } => write!(f, "< {limit:e}"),
            Bound::Above { limit } => write!(f, "> {limit:e}"),
            Bound::AtLeast { limit } => write!(f, ">= {limit}"),
            Bound::Within { lo, hi } => write!(f, "in [{lo}, {hi}]"),
            Bound::Equals { target } => write!(f, "== {target}"),
        }
    }
}

/// One measured quantity.
#[derive(Clone, Debug, Serialize)]
pub struct Measurement {
    pub label: String,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

impl Measurement {
    pub fn new(label: impl Into<String>, value: f64, bound: Bound) -> Self {
        Measurement {
            label: label.into(),
            value,
            passed: bound.admits(value),
            bound,
        }
    }
}

type CheckFn = fn() -> Result<Vec<Measurement>>;

/// A named check.
#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    pub description: &'static str,
    run: CheckFn,
}

impl Check {
    pub(crate) const fn new(name: &'static str, description: &'static str, run: CheckFn) -> Self {
        Check { name, description, run }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub description: String,
    pub passed: bool,
    pub seconds: f64,
    pub measurements: Vec<Measurement>,
    /// Set when the check could not run to completion.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Report {
    pub passed: usize,
    pub failed: usize,
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {} ({:.2}s) {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.seconds,
                r.description
            )?;
            for m in &r.measurements {
                writeln!(
                    f,
                    "    {} {} = {:e} (want {})",
                    if m.passed { "ok " } else { "BAD" },
                    m.label,
                    m.value,
                    m.bound
                )?;
            }
            if let Some(e) = &r.error {
                writeln!(f, "    error: {e}")?;
            }
        }
        write!(f, "{} passed, {} failed", self.passed, self.failed)
    }
}

/// Every registered check, in report order.
pub fn registry() -> Vec<Check> {
    let mut all = Vec::new();
    all.extend_from_slice(tensors::CHECKS);
    all.extend_from_slice(models::CHECKS);
    all.extend_from_slice(masks::CHECKS);
    all.extend_from_slice(training::CHECKS);
    all
}

/// Checks whose name contains `filter` (all when `None`).
pub fn select(filter: Option<&str>) -> Vec<Check> {
    registry()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect()
}

pub fn run_check(check: &Check) -> CheckResult {
    let start = Instant::now();
    let outcome = (check.run)();
    let seconds = start.elapsed().as_secs_f64();
    let (measurements, error) = match outcome {
        Ok(m) => (m, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let passed = error.is_none() && !measurements.is_empty() && measurements.iter().all(|m| m.passed);
    CheckResult {
        name: check.name.to_string(),
        description: check.description.to_string(),
        passed,
        seconds,
        measurements,
        error,
    }
}

/// Runs the selected checks, calling `progress` after each.
pub fn run(filter: Option<&str>, mut progress: impl FnMut(&CheckResult)) -> Report {
    let mut report = Report::default();
    for check in select(filter) {
        let r = run_check(&check);
        progress(&r);
        if r.passed {
            report.passed += 1;
        } else {
            report.failed += 1;
        }
        report.results.push(r);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn filter_selects_by_substring() {
        let demod = select(Some("demodulation"));
        assert!(!demod.is_empty());
        assert!(demod.iter().all(|c| c.name.starts_with("demodulation.")));
    }

    #[test]
    fn bounds() {
        assert!(Bound::below(1.0).admits(0.5));
        assert!(!Bound::below(1.0).admits(1.0));
        assert!(Bound::within(0.9, 1.1).admits(1.1));
        assert!(!Bound::above(0.0).admits(0.0));
        assert!(Bound::equals(0.0).admits(0.0));
    }
}
