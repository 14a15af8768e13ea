//! Zipf access distributions calibrated to a hot-set mass.

use serde::{Deserialize, Serialize};

use super::{LocalityKind, LocalityProfile};
use crate::error::{Error, Result};

/// Fraction of rows that defines the "hot set" used for calibration.
pub const HOT_FRACTION: f64 = 0.02;

const EXACT_TERMS: u64 = 10_000;
const MAX_EXPONENT: f64 = 64.0;

/// Number of rows in the top `fraction` of a table, at least one.
pub fn hot_row_count(rows: u64, fraction: f64) -> u64 {
    ((fraction * rows as f64).ceil() as u64).clamp(1, rows)
}

/// Zipf PDF over ranks: `p(r) = (r + 1)^-s / H(R, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessPdf {
    kind: LocalityKind,
    rows: u64,
    exponent: f64,
    norm: f64,
}

impl AccessPdf {
    pub fn zipf(kind: LocalityKind, rows: u64, exponent: f64) -> Self {
        Self {
            kind,
            rows,
            exponent,
            norm: generalized_harmonic(rows, exponent),
        }
    }

    pub fn uniform(rows: u64) -> Self {
        Self::zipf(LocalityKind::Random, rows, 0.0)
    }

    pub fn kind(&self) -> LocalityKind {
        self.kind
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn prob(&self, rank: u64) -> f64 {
        debug_assert!(rank < self.rows);
        ((rank + 1) as f64).powf(-self.exponent) / self.norm
    }

    /// Probability mass of the `k` most likely ranks.
    pub fn top_mass(&self, k: u64) -> f64 {
        let k = k.min(self.rows);
        if k == self.rows {
            return 1.0;
        }
        generalized_harmonic(k, self.exponent) / self.norm
    }

    pub fn top_fraction_mass(&self, fraction: f64) -> f64 {
        self.top_mass(hot_row_count(self.rows, fraction))
    }

    /// Materializes the PDF. Only sensible for modest row counts.
    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.prob(r)).collect()
    }
}

/// `H(n, s) = sum_{r=1..n} r^-s`. Exact for the leading terms, Euler-Maclaurin
/// for the tail.
pub fn generalized_harmonic(n: u64, s: f64) -> f64 {
    if s == 0.0 {
        return n as f64;
    }
    let exact_to = n.min(EXACT_TERMS);
    // smallest terms first
    let head: f64 = (1..=exact_to).rev().map(|r| (r as f64).powf(-s)).sum();
    if n <= EXACT_TERMS {
        return head;
    }
    head + euler_maclaurin_tail((EXACT_TERMS + 1) as f64, n as f64, s)
}

/// `sum_{r=a..b} r^-s` for integer bounds with `a` large.
fn euler_maclaurin_tail(a: f64, b: f64, s: f64) -> f64 {
    let f = |x: f64| x.powf(-s);
    let d1 = |x: f64| -s * x.powf(-s - 1.0);
    let d3 = |x: f64| -s * (s + 1.0) * (s + 2.0) * x.powf(-s - 3.0);
    let t = 1.0 - s;
    let ln_ratio = (b / a).ln();
    let integral = if t.abs() < 1e-9 {
        ln_ratio * (1.0 + 0.5 * t * (a.ln() + b.ln()))
    } else {
        a.powf(t) * (t * ln_ratio).exp_m1() / t
    };
    integral + 0.5 * (f(a) + f(b)) + (d1(b) - d1(a)) / 12.0 - (d3(b) - d3(a)) / 720.0
}

/// Builds the access PDF for a profile over `rows` ranks, solving the Zipf
/// exponent by bisection so the top-2% mass matches the profile target.
pub fn build_pdf(profile: &LocalityProfile, rows: u64) -> Result<AccessPdf> {
    if rows < 50 {
        return Err(Error::Calibration(format!(
            "need at least 50 rows to define a hot set, got {rows}"
        )));
    }
    if profile.kind == LocalityKind::Random {
        return Ok(AccessPdf::uniform(rows));
    }
    let target = profile.target_top2pct_mass;
    let k = hot_row_count(rows, HOT_FRACTION);
    let floor = k as f64 / rows as f64;
    if !target.is_finite() || target < floor - 1e-12 || target >= 1.0 {
        return Err(Error::Calibration(format!(
            "top-2% mass {target} is unreachable: must lie in [{floor:.6}, 1)"
        )));
    }
    let mass = |s: f64| generalized_harmonic(k, s) / generalized_harmonic(rows, s);

    let mut hi = 1.0;
    while mass(hi) < target {
        hi *= 2.0;
        if hi > MAX_EXPONENT {
            return Err(Error::Calibration(format!(
                "top-2% mass {target} needs an exponent above {MAX_EXPONENT}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(AccessPdf::zipf(profile.kind, rows, 0.5 * (lo + hi)))
}
