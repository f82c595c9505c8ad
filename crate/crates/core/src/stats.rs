//! Paired Wilcoxon signed-rank test and Bonferroni correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this many non-zero differences the normal approximation is used.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences `a − b`.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Non-zero differences and their average ranks by absolute value.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("paired lengths differ: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("differences contain NaN".into()));
    }
    if d.is_empty() {
        return Err(Error::AllDifferencesZero);
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    Ok((d, ranks))
}

fn w_plus(d: &[f64], ranks: &[f64]) -> f64 {
    d.iter().zip(ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum()
}

/// Exact two-sided p-value from the sign-flip null distribution of `W+`,
/// counted by dynamic programming over doubled (integer) ranks.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (d, ranks) = signed_ranks(a, b)?;
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = w_plus(&d, &ranks);
    let w2 = (w * 2.0).round() as usize;
    let all = 2f64.powi(d.len() as i32);
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
    Ok(WilcoxonResult { n: d.len(), w_plus: w, p_value: (2.0 * lower.min(upper)).min(1.0), exact: true })
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (d, ranks) = signed_ranks(a, b)?;
    let n = d.len() as f64;
    let w = w_plus(&d, &ranks);
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult { n: d.len(), w_plus: w, p_value: p, exact: false })
}

/// Two-sided signed-rank test on `a − b`; zero differences are dropped first.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (d, _) = signed_ranks(a, b)?;
    if d.len() < MIN_PAIRS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_PAIRS} non-zero differences, got {}",
            d.len()
        )));
    }
    if d.len() <= EXACT_MAX_N {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corrected {
    pub p: f64,
    pub significant: bool,
}

pub fn bonferroni_threshold(alpha: f64, m: usize) -> f64 {
    alpha / m as f64
}

/// Flags each p-value significant iff `p < α/m`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<Corrected>> {
    if p_values.is_empty() {
        return Err(Error::InvalidArgument("no p-values".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    let cut = bonferroni_threshold(alpha, p_values.len());
    Ok(p_values.iter().map(|&p| Corrected { p, significant: p < cut }).collect())
}
