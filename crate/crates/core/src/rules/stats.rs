use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use statrs::function::factorial::ln_binomial;

use super::ContingencyTable;
use crate::eval::Metric;

/// Significance level used when counting replications.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestUsed {
    ChiSquare,
    FisherExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTestResult {
    pub table: ContingencyTable,
    /// Pearson χ² (reported for both test paths).
    pub statistic: Metric,
    pub p_value: Metric,
    /// Sign of `a/(a+b) − c/(c+d)`.
    pub direction: i8,
    pub test_used: Option<TestUsed>,
    /// Why the result is `NA`.
    pub reason: Option<String>,
}

impl RuleTestResult {
    pub fn is_significant(&self) -> bool {
        self.p_value.get().is_some_and(|p| p < ALPHA)
    }
}

/// Representative of the table under row swap, column swap and transpose.
/// Every test quantity is symmetric under these, so computing on the
/// representative makes the symmetry exact in floating point too.
fn canonical(a: u64, b: u64, c: u64, d: u64) -> [u64; 4] {
    let forms = [
        [a, b, c, d],
        [c, d, a, b],
        [b, a, d, c],
        [d, c, b, a],
        [a, c, b, d],
        [b, d, a, c],
        [c, a, d, b],
        [d, b, c, a],
    ];
    forms.into_iter().min().expect("non-empty")
}

fn chi_square([a, b, c, d]: [u64; 4]) -> f64 {
    let n = (a + b + c + d) as f64;
    let det = a as f64 * d as f64 - b as f64 * c as f64;
    let den = (a + b) as f64 * (c + d) as f64 * (a + c) as f64 * (b + d) as f64;
    n * det * det / den
}

/// Two-sided Fisher exact p: total probability of tables with the same
/// margins that are no more likely than the observed one.
fn fisher_exact([a, b, c, _d]: [u64; 4], n: u64) -> f64 {
    let r1 = a + b;
    let c1 = a + c;
    let r2 = n - r1;
    let ln_total = ln_binomial(n, c1);
    let prob = |x: u64| (ln_binomial(r1, x) + ln_binomial(r2, c1 - x) - ln_total).exp();
    let observed = prob(a);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let p: f64 = (lo..=hi)
        .map(prob)
        .filter(|&q| q <= observed * (1.0 + 1e-7))
        .sum();
    p.min(1.0)
}

/// χ² test of association, switching to Fisher's exact test when any
/// expected count is below 5.
pub fn test_rule(table: &ContingencyTable) -> RuleTestResult {
    let (a, b, c, d) = (table.a, table.b, table.c, table.d);
    let n = a + b + c + d;
    let direction = (a as i128 * d as i128 - b as i128 * c as i128).signum() as i8;
    let na = |reason: &str| RuleTestResult {
        table: table.clone(),
        statistic: Metric::NA,
        p_value: Metric::NA,
        direction,
        test_used: None,
        reason: Some(reason.to_string()),
    };
    if n == 0 {
        return na("empty table");
    }
    let margins = [a + b, c + d, a + c, b + d];
    if margins.contains(&0) {
        return na("a zero margin leaves the association undefined");
    }

    let cells = canonical(a, b, c, d);
    let statistic = chi_square(cells);
    let nf = n as f64;
    let min_expected = [
        margins[0] as f64 * margins[2] as f64,
        margins[0] as f64 * margins[3] as f64,
        margins[1] as f64 * margins[2] as f64,
        margins[1] as f64 * margins[3] as f64,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
        / nf;
    let (p, used) = if min_expected < 5.0 {
        (fisher_exact(cells, n), TestUsed::FisherExact)
    } else {
        (erfc((statistic / 2.0).sqrt()).min(1.0), TestUsed::ChiSquare)
    };
    RuleTestResult {
        table: table.clone(),
        statistic: Metric::value(statistic),
        p_value: Metric::value(p),
        direction,
        test_used: Some(used),
        reason: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_sessions: usize,
    /// Sessions whose test was undefined.
    pub n_undefined: usize,
    /// Majority sign among sessions with a non-zero direction; ties go to +1.
    pub modal_direction: i8,
    pub n_significant_same_direction: usize,
    pub n_significant_opposite: usize,
    /// Stouffer combination of signed per-session z-scores.
    pub combined_z: Metric,
    pub combined_p: Metric,
    pub sessions: Vec<RuleTestResult>,
}

fn signed_z(r: &RuleTestResult) -> Option<f64> {
    let p = r.p_value.get()?;
    let normal = Normal::standard();
    let z = -normal.inverse_cdf((p / 2.0).max(f64::MIN_POSITIVE));
    Some(f64::from(r.direction) * z.max(0.0))
}

pub fn aggregate_results(results: Vec<RuleTestResult>) -> AggregateReport {
    let positive = results
        .iter()
        .filter(|r| r.direction > 0 && r.p_value.get().is_some())
        .count();
    let negative = results
        .iter()
        .filter(|r| r.direction < 0 && r.p_value.get().is_some())
        .count();
    let modal_direction = if negative > positive { -1 } else { 1 };
    let n_significant_same_direction = results
        .iter()
        .filter(|r| r.is_significant() && r.direction == modal_direction)
        .count();
    let n_significant_opposite = results
        .iter()
        .filter(|r| r.is_significant() && r.direction == -modal_direction)
        .count();
    let zs: Vec<f64> = results.iter().filter_map(signed_z).collect();
    let (combined_z, combined_p) = if zs.is_empty() {
        (Metric::NA, Metric::NA)
    } else {
        let z = zs.iter().sum::<f64>() / (zs.len() as f64).sqrt();
        (
            Metric::value(z),
            Metric::value(erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)),
        )
    };
    AggregateReport {
        n_sessions: results.len(),
        n_undefined: results.len() - zs.len(),
        modal_direction,
        n_significant_same_direction,
        n_significant_opposite,
        combined_z,
        combined_p,
        sessions: results,
    }
}

impl AggregateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table, one line per session plus a summary.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:>6} {:>6} {:>6} {:>6} {:>10} {:>12} {:>4}  test",
            "course", "session", "a", "b", "c", "d", "chi2", "p", "dir"
        );
        for r in &self.sessions {
            let t = &r.table;
            let fmt = |m: Metric| m.get().map_or("NA".to_string(), |v| format!("{v:.4}"));
            let p = r
                .p_value
                .get()
                .map_or("NA".to_string(), |v| format!("{v:.3e}"));
            let test = match r.test_used {
                Some(TestUsed::ChiSquare) => "chi_square",
                Some(TestUsed::FisherExact) => "fisher_exact",
                None => r.reason.as_deref().unwrap_or("NA"),
            };
            let _ = writeln!(
                out,
                "{:<12} {:<10} {:>6} {:>6} {:>6} {:>6} {:>10} {:>12} {:>+4}  {}",
                t.course_id,
                t.session_id,
                t.a,
                t.b,
                t.c,
                t.d,
                fmt(r.statistic),
                p,
                r.direction,
                test
            );
        }
        let _ = writeln!(
            out,
            "sessions: {}  significant (same direction {:+}): {}  significant (opposite): {}  undefined: {}",
            self.n_sessions,
            self.modal_direction,
            self.n_significant_same_direction,
            self.n_significant_opposite,
            self.n_undefined
        );
        let _ = writeln!(
            out,
            "stouffer z: {}  combined p: {}",
            self.combined_z, self.combined_p
        );
        out
    }
}
