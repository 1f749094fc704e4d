//! Pairwise earth mover's distance utility over per-series aggregate vectors.

use serde::Serialize;

use crate::error::{Error, Result};

/// A probability vector, flagged when the input had no mass and was replaced by uniform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normalized {
    pub probs: Vec<f64>,
    pub degenerate: bool,
}

/// Shifts by `-min` if any entry is negative, then divides by the sum. A zero sum yields
/// the uniform distribution with `degenerate` set.
pub fn normalize(v: &[f64]) -> Normalized {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let sum: f64 = v.iter().map(|x| x + shift).sum();
    if v.is_empty() || sum <= 0.0 || !sum.is_finite() {
        let d = v.len().max(1) as f64;
        return Normalized {
            probs: vec![1.0 / d; v.len()],
            degenerate: true,
        };
    }
    Normalized {
        probs: v.iter().map(|x| (x + shift) / sum).collect(),
        degenerate: false,
    }
}

/// 1-D EMD with unit spacing: the sum of absolute differences of the two CDFs.
pub fn emd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    let mut cdf = 0.0;
    let mut total = 0.0;
    for i in 0..p.len().saturating_sub(1) {
        cdf += p[i] - q[i];
        total += cdf.abs();
    }
    Ok(total)
}

/// Scores a set of per-series vectors. Only the EMD strategy ships; the trait is the slot
/// for alternatives.
pub trait ScoringStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, series: &[Vec<f64>]) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EmdScore;

impl ScoringStrategy for EmdScore {
    fn name(&self) -> &'static str {
        "emd"
    }

    fn score(&self, series: &[Vec<f64>]) -> f64 {
        utility(series)
    }
}

/// Mean pairwise EMD between the normalized vectors; 0 for fewer than two series.
/// Vectors must share one length.
pub fn utility(series: &[Vec<f64>]) -> f64 {
    let v = series.len();
    if v < 2 {
        return 0.0;
    }
    let dists: Vec<Vec<f64>> = series.iter().map(|s| normalize(s).probs).collect();
    let mut total = 0.0;
    for i in 0..v {
        for j in i + 1..v {
            total += emd(&dists[i], &dists[j]).expect("series vectors share the domain length");
        }
    }
    2.0 * total / (v * (v - 1)) as f64
}

/// [`utility`] over `v` rows of length `d` stored back to back. Rows are normalized in
/// place.
pub fn utility_flat(rows: &mut [f64], v: usize, d: usize) -> f64 {
    if v < 2 {
        return 0.0;
    }
    for row in rows.chunks_mut(d.max(1)) {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let shift = if min < 0.0 { -min } else { 0.0 };
        let sum: f64 = row.iter().map(|x| x + shift).sum();
        if row.is_empty() || sum <= 0.0 || !sum.is_finite() {
            let u = 1.0 / row.len().max(1) as f64;
            row.fill(u);
        } else {
            row.iter_mut().for_each(|x| *x = (*x + shift) / sum);
        }
    }
    let mut total = 0.0;
    for i in 0..v {
        for j in i + 1..v {
            let (p, q) = (&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]);
            let mut cdf = 0.0;
            let mut acc = 0.0;
            for k in 0..d.saturating_sub(1) {
                cdf += p[k] - q[k];
                acc += cdf.abs();
            }
            total += acc;
        }
    }
    2.0 * total / (v * (v - 1)) as f64
}

/// Replaces absent entries with 0.
pub fn impute(values: &[Option<f64>]) -> Vec<f64> {
    values.iter().map(|x| x.unwrap_or(0.0)).collect()
}
