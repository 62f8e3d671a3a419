use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{EvalError, MetricReport};

/// Fewest non-zero pairs accepted by [`compare_jobs`].
pub const MIN_PAIRS: usize = 5;
/// Largest pair count handled with the exact null distribution.
const EXACT_MAX: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AHigher,
    BHigher,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Sum of ranks of positive differences (W+).
    pub statistic: f64,
    pub p_value: f64,
    pub direction: Direction,
    /// Pairs entering the test after dropping zero differences.
    pub n_courses: usize,
    pub exact: bool,
}

/// Mid-ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            ranks[k] = (i + 1 + j + 1) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
pub fn signed_rank_test(diffs: &[f64]) -> Result<TestResult, EvalError> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n < MIN_PAIRS {
        return Err(EvalError::TooFewPairs {
            found: n,
            needed: MIN_PAIRS,
        });
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w_plus2: u64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let direction = match (2 * w_plus2).cmp(&total) {
        Ordering::Greater => Direction::AHigher,
        Ordering::Less => Direction::BHigher,
        Ordering::Equal => Direction::Tie,
    };

    let exact = n <= EXACT_MAX;
    let p_value = if exact {
        // counts[s] = number of sign patterns with doubled W+ = s
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let w = w_plus2 as usize;
        let lower: f64 = counts[..=w].iter().sum();
        let upper: f64 = counts[w..].iter().sum();
        (2.0 * lower.min(upper) / all).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        for group in sorted.chunk_by(|a, b| a == b) {
            let t = group.len() as f64;
            tie_term += t * t * t - t;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = (w_plus2 as f64 / 2.0 - mean) / var.sqrt();
            erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
        }
    };

    Ok(TestResult {
        statistic: w_plus2 as f64 / 2.0,
        p_value,
        direction,
        n_courses: n,
        exact,
    })
}

/// Paired signed-rank comparison of two jobs on one metric across the
/// courses both were tested on. Courses where either value is `NA` are
/// dropped along with zero differences.
pub fn compare_jobs(
    a: &MetricReport,
    b: &MetricReport,
    metric: &str,
) -> Result<TestResult, EvalError> {
    let courses_a: BTreeSet<&str> = a.rows.iter().map(|r| r.course_id.as_str()).collect();
    let courses_b: BTreeSet<&str> = b.rows.iter().map(|r| r.course_id.as_str()).collect();
    if courses_a != courses_b {
        return Err(EvalError::CourseSetMismatch);
    }
    let mut diffs = Vec::new();
    for course in courses_a {
        let va = a.value(course, metric)?.and_then(|m| m.get());
        let vb = b.value(course, metric)?.and_then(|m| m.get());
        if let (Some(x), Some(y)) = (va, vb) {
            diffs.push(x - y);
        }
    }
    signed_rank_test(&diffs)
}
