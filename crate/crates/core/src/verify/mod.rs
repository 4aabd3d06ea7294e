//! Self-verification: finite-difference gradient checks and brute-force
//! reference implementations used by the `gradcheck` and `selftest`
//! commands and by the test suites.

pub mod gradcheck;
pub mod oracles;

use std::fmt;

/// Outcome of one verification suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    /// Worst observed error (relative or absolute, per suite).
    pub max_err: f64,
    pub tol: f64,
    /// Count of instances that disagreed, for exact-match suites.
    pub mismatches: usize,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, tol: f64) -> Self {
        CheckReport {
            name: name.into(),
            cases: 0,
            max_err: 0.0,
            tol,
            mismatches: 0,
        }
    }

    pub fn record(&mut self, err: f64) {
        self.cases += 1;
        if !(err <= self.max_err) {
            self.max_err = err;
        }
        if !(err < self.tol || (self.tol == 0.0 && err == 0.0)) {
            self.mismatches += 1;
        }
    }

    pub fn record_match(&mut self, ok: bool) {
        self.record(if ok { 0.0 } else { 1.0 });
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.mismatches == 0
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>5} cases  max_err {:>10.3e}  tol {:>8.1e}  {}",
            self.name,
            self.cases,
            self.max_err,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}
