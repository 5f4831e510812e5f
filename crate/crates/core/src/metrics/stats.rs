//! Paired two-sided significance tests over per-image scores.
//!
//! The Wilcoxon signed-rank test drops zero differences and ranks the
//! absolute remainder (average ranks for ties). Without ties and with at
//! most [`EXACT_MAX_PAIRS`] usable pairs the p-value comes from the exact
//! null distribution of `W+`; otherwise from the normal approximation with
//! the tie-corrected variance.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Fewer pairs than this (before or after dropping zero differences) is an error.
pub const MIN_PAIRS: usize = 6;
/// Largest sample for which the exact null distribution is enumerated.
pub const EXACT_MAX_PAIRS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignificanceTest {
    #[default]
    Wilcoxon,
    TTest,
}

impl std::str::FromStr for SignificanceTest {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wilcoxon" => Ok(SignificanceTest::Wilcoxon),
            "ttest" => Ok(SignificanceTest::TTest),
            _ => Err(format!("unknown test `{s}` (wilcoxon|ttest)")),
        }
    }
}

impl std::fmt::Display for SignificanceTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignificanceTest::Wilcoxon => "wilcoxon",
            SignificanceTest::TTest => "ttest",
        })
    }
}

pub fn paired_pvalue(a: &[f64], b: &[f64], test: SignificanceTest) -> Result<f64> {
    match test {
        SignificanceTest::Wilcoxon => wilcoxon_signed_rank(a, b),
        SignificanceTest::TTest => paired_t_test(a, b),
    }
}

fn check_pairs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < MIN_PAIRS {
        return Err(Error::Stats(format!("{} pairs, need at least {MIN_PAIRS}", a.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite score in paired samples".into()));
    }
    Ok(d)
}

/// Average 1-based ranks of `v` (ascending) and the tie group sizes.
fn average_ranks(v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        idx[i..j].iter().for_each(|&k| ranks[k] = r);
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Number of subsets of `{1..n}` with each rank sum `0..=n(n+1)/2`.
fn rank_sum_counts(n: usize) -> Vec<f64> {
    let max = n * (n + 1) / 2;
    let mut c = vec![0.0; max + 1];
    c[0] = 1.0;
    for k in 1..=n {
        for s in (k..=max).rev() {
            c[s] += c[s - k];
        }
    }
    c
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
///
/// Returns 1 when every difference is zero.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = check_pairs(a, b)?;
    let nz: Vec<f64> = d.into_iter().filter(|&v| v != 0.0).collect();
    if nz.is_empty() {
        return Ok(1.0);
    }
    let n = nz.len();
    if n < MIN_PAIRS {
        return Err(Error::Stats(format!("{n} non-zero differences, need at least {MIN_PAIRS}")));
    }
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    let p = if ties.is_empty() && n <= EXACT_MAX_PAIRS {
        let counts = rank_sum_counts(n);
        let total = 2f64.powi(n as i32);
        let w = w_plus.round() as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
        let upper: f64 = counts[w..].iter().sum::<f64>() / total;
        2.0 * lower.min(upper)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::standard();
        2.0 * normal.cdf(-z.abs())
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Two-sided paired Student t-test p-value.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = check_pairs(a, b)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Stats(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
}
