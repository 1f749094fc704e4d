//! Distribution fitting and Pearson chi-square goodness-of-fit testing for series creation.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::hashing::tokens;
use crate::table::{DType, TypedColumn};

/// Equi-probable buckets used when the expected side is continuous.
pub const CONTINUOUS_BUCKETS: usize = 10;
/// Minimum expected count per bucket; smaller buckets are pooled.
pub const MIN_EXPECTED: f64 = 5.0;
/// Skewness above which a non-negative sample is fitted as exponential.
pub const EXPONENTIAL_SKEW: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    Normal {
        mean: f64,
        var: f64,
    },
    Exponential {
        rate: f64,
    },
    /// Probability per token.
    Multinomial {
        probs: BTreeMap<String, f64>,
    },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal { .. } => "normal",
            Family::Exponential { .. } => "exponential",
            Family::Multinomial { .. } => "multinomial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedStats {
    pub family: Family,
    /// Number of sampled cells the fit used.
    pub sample_size: usize,
    /// Non-null cells in the fitted columns; the weight used when merging multinomials.
    pub cardinality: usize,
}

/// A sample of cells drawn from one or more columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Numbers(Vec<f64>),
    Tokens(Vec<String>),
}

impl Sample {
    pub fn len(&self) -> usize {
        match self {
            Sample::Numbers(v) => v.len(),
            Sample::Tokens(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `min(w, non-null)` cells without replacement from the concatenation of `columns`.
///
/// Textual cells are expanded into their word tokens after sampling.
pub fn sample_cells<R: Rng + ?Sized>(
    columns: &[&TypedColumn],
    w: usize,
    rng: &mut R,
) -> Result<Sample> {
    let Some(first) = columns.first() else {
        return Err(Error::EmptyColumn);
    };
    let dtype = first.dtype;
    if let Some(bad) = columns.iter().find(|c| c.dtype != dtype) {
        return Err(Error::DtypeMismatch(dtype, bad.dtype));
    }
    let total: usize = columns.iter().map(|c| c.non_null()).sum();
    if total == 0 {
        return Err(Error::EmptyColumn);
    }
    let amount = w.min(total);

    // Row lists are only materialized for columns that contain nulls.
    let rows: Vec<Option<Vec<u32>>> = columns
        .iter()
        .map(|c| (c.null_count() > 0).then(|| c.non_null_rows()))
        .collect();
    let mut offsets = Vec::with_capacity(columns.len());
    let mut acc = 0usize;
    for c in columns {
        offsets.push(acc);
        acc += c.non_null();
    }
    let locate = |i: usize| -> (usize, usize) {
        let col = offsets.partition_point(|&o| o <= i) - 1;
        let local = i - offsets[col];
        let row = match &rows[col] {
            Some(r) => r[local] as usize,
            None => local,
        };
        (col, row)
    };

    let picks = index::sample(rng, total, amount);
    Ok(match dtype {
        DType::Numerical => Sample::Numbers(
            picks
                .iter()
                .map(|i| {
                    let (c, r) = locate(i);
                    columns[c].numbers().expect("numerical")[r].expect("non-null row")
                })
                .collect(),
        ),
        DType::Categorical => Sample::Tokens(
            picks
                .iter()
                .map(|i| {
                    let (c, r) = locate(i);
                    columns[c].strings().expect("string")[r]
                        .as_deref()
                        .expect("non-null row")
                        .to_string()
                })
                .collect(),
        ),
        DType::Textual => Sample::Tokens(
            picks
                .iter()
                .flat_map(|i| {
                    let (c, r) = locate(i);
                    let text = columns[c].strings().expect("string")[r]
                        .as_deref()
                        .expect("non-null row");
                    tokens(text).collect::<Vec<_>>()
                })
                .collect(),
        ),
    })
}

fn moments(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let skew = if var > 0.0 { m3 / var.powf(1.5) } else { 0.0 };
    (mean, var, skew)
}

/// Maximum-likelihood fit of a sample.
///
/// Numbers fit a normal by sample mean and (biased) variance, switching to an exponential
/// with rate `1/mean` when every value is non-negative and the skewness exceeds 1.5.
/// Tokens fit a multinomial from observed frequencies.
pub fn fit_sample(sample: &Sample, cardinality: usize) -> Result<FittedStats> {
    if sample.is_empty() {
        return Err(Error::EmptyColumn);
    }
    let family = match sample {
        Sample::Numbers(xs) => {
            let (mean, var, skew) = moments(xs);
            let non_negative = xs.iter().all(|&x| x >= 0.0);
            if non_negative && skew > EXPONENTIAL_SKEW && mean > 0.0 {
                Family::Exponential { rate: 1.0 / mean }
            } else {
                Family::Normal { mean, var }
            }
        }
        Sample::Tokens(ts) => {
            let mut counts: BTreeMap<String, f64> = BTreeMap::new();
            for t in ts {
                *counts.entry(t.clone()).or_default() += 1.0;
            }
            let n = ts.len() as f64;
            counts.values_mut().for_each(|c| *c /= n);
            Family::Multinomial { probs: counts }
        }
    };
    Ok(FittedStats {
        family,
        sample_size: sample.len(),
        cardinality,
    })
}

/// Samples `min(w, non-null)` cells and fits them.
pub fn fit_stats<R: Rng + ?Sized>(
    columns: &[&TypedColumn],
    w: usize,
    rng: &mut R,
) -> Result<FittedStats> {
    let sample = sample_cells(columns, w, rng)?;
    fit_sample(&sample, columns.iter().map(|c| c.non_null()).sum())
}

/// Combines the statistics of two merged series.
///
/// Normals combine as `N(μ1+μ2, σ1²+σ2²)`; exponentials by pooled mean; multinomials by a
/// cardinality-weighted average.
pub fn merge_stats(a: &FittedStats, b: &FittedStats) -> Result<FittedStats> {
    let family = match (&a.family, &b.family) {
        (Family::Normal { mean: m1, var: v1 }, Family::Normal { mean: m2, var: v2 }) => {
            Family::Normal {
                mean: m1 + m2,
                var: v1 + v2,
            }
        }
        (Family::Exponential { rate: r1 }, Family::Exponential { rate: r2 }) => {
            Family::Exponential {
                rate: 2.0 / (1.0 / r1 + 1.0 / r2),
            }
        }
        (Family::Multinomial { probs: p1 }, Family::Multinomial { probs: p2 }) => {
            let (w1, w2) = (a.cardinality.max(1) as f64, b.cardinality.max(1) as f64);
            let mut probs: BTreeMap<String, f64> = BTreeMap::new();
            for (k, p) in p1 {
                *probs.entry(k.clone()).or_default() += p * w1;
            }
            for (k, p) in p2 {
                *probs.entry(k.clone()).or_default() += p * w2;
            }
            probs.values_mut().for_each(|p| *p /= w1 + w2);
            Family::Multinomial { probs }
        }
        (x, y) => return Err(Error::FamilyMismatch(x.name(), y.name())),
    };
    Ok(FittedStats {
        family,
        sample_size: a.sample_size + b.sample_size,
        cardinality: a.cardinality + b.cardinality,
    })
}

/// Upper tail `P(X > x)` of a chi-square distribution, via the regularized upper
/// incomplete gamma function.
pub fn chi_square_sf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

/// Critical value `c` with `P(X > c) = delta` for `dof` degrees of freedom.
pub fn chi_square_critical(dof: usize, delta: f64) -> f64 {
    assert!(dof >= 1, "chi-square needs at least one degree of freedom");
    assert!(delta > 0.0 && delta < 1.0, "significance must be in (0, 1)");
    let mut hi = dof as f64 + 10.0;
    while chi_square_sf(hi, dof) > delta {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_sf(mid, dof) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `Σ (O_i − E_i)² / E_i`.
pub fn chi_square_statistic(observed: &[f64], expected: &[f64]) -> Result<f64> {
    if observed.len() != expected.len() {
        return Err(Error::LengthMismatch(observed.len(), expected.len()));
    }
    Ok(observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub pass: bool,
    /// Fewer than two usable buckets; the test failed closed.
    pub degenerate: bool,
}

impl ChiSquareOutcome {
    fn failed_closed() -> Self {
        Self {
            statistic: f64::INFINITY,
            dof: 0,
            critical: f64::NAN,
            pass: false,
            degenerate: true,
        }
    }
}

/// Runs the decision on already-bucketed counts, pooling buckets in order until each
/// expected count is at least [`MIN_EXPECTED`].
pub fn chi_square_buckets(
    observed: &[f64],
    expected: &[f64],
    delta: f64,
) -> Result<ChiSquareOutcome> {
    if observed.len() != expected.len() {
        return Err(Error::LengthMismatch(observed.len(), expected.len()));
    }
    let (obs, exp) = pool_small_buckets(observed, expected);
    if exp.len() < 2 {
        return Ok(ChiSquareOutcome::failed_closed());
    }
    let statistic = chi_square_statistic(&obs, &exp)?;
    let dof = exp.len() - 1;
    let critical = chi_square_critical(dof, delta);
    Ok(ChiSquareOutcome {
        statistic,
        dof,
        critical,
        pass: statistic < critical,
        degenerate: false,
    })
}

fn pool_small_buckets(observed: &[f64], expected: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o;
        e_acc += e;
        if e_acc >= MIN_EXPECTED {
            obs.push(o_acc);
            exp.push(e_acc);
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match (obs.last_mut(), exp.last_mut()) {
            (Some(o), Some(e)) => {
                *o += o_acc;
                *e += e_acc;
            }
            _ => {
                obs.push(o_acc);
                exp.push(e_acc);
            }
        }
    }
    (obs, exp)
}

pub(crate) fn normal_quantile(p: f64, mean: f64, sd: f64) -> f64 {
    mean + sd * std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0)
}

/// Buckets a sample against a fitted distribution and returns (observed, expected).
///
/// Continuous families use [`CONTINUOUS_BUCKETS`] equi-probable buckets; multinomials use
/// one bucket per category (most probable first) plus a trailing bucket for unseen tokens.
/// Returns `None` when the expected side cannot be bucketed (zero variance).
pub fn bucket_counts(
    sample: &Sample,
    expected: &FittedStats,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let n = sample.len() as f64;
    match (sample, &expected.family) {
        (Sample::Numbers(xs), Family::Normal { .. } | Family::Exponential { .. }) => {
            let k = CONTINUOUS_BUCKETS;
            let edges: Vec<f64> = match expected.family {
                Family::Normal { mean, var } => {
                    if var <= 0.0 {
                        return Ok(None);
                    }
                    let sd = var.sqrt();
                    (1..k)
                        .map(|i| normal_quantile(i as f64 / k as f64, mean, sd))
                        .collect()
                }
                Family::Exponential { rate } => (1..k)
                    .map(|i| -(1.0 - i as f64 / k as f64).ln() / rate)
                    .collect(),
                Family::Multinomial { .. } => unreachable!(),
            };
            let mut obs = vec![0.0; k];
            for &x in xs {
                obs[edges.partition_point(|&e| e <= x)] += 1.0;
            }
            Ok(Some((obs, vec![n / k as f64; k])))
        }
        (Sample::Tokens(ts), Family::Multinomial { probs }) => {
            let mut cats: Vec<(&String, f64)> = probs.iter().map(|(k, &p)| (k, p)).collect();
            cats.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            let index: BTreeMap<&str, usize> = cats
                .iter()
                .enumerate()
                .map(|(i, (k, _))| (k.as_str(), i))
                .collect();
            let mut obs = vec![0.0; cats.len() + 1];
            for t in ts {
                let slot = index.get(t.as_str()).copied().unwrap_or(cats.len());
                obs[slot] += 1.0;
            }
            let mut exp: Vec<f64> = cats.iter().map(|(_, p)| p * n).collect();
            exp.push(0.0);
            Ok(Some((obs, exp)))
        }
        (Sample::Numbers(_), f) => Err(Error::FamilyMismatch("numeric sample", f.name())),
        (Sample::Tokens(_), f) => Err(Error::FamilyMismatch("token sample", f.name())),
    }
}

/// Tests whether a sample of `w` cells from `observed` is consistent with `expected`
/// at significance `delta`.
pub fn chi_square_test<R: Rng + ?Sized>(
    observed: &[&TypedColumn],
    expected: &FittedStats,
    w: usize,
    delta: f64,
    rng: &mut R,
) -> Result<ChiSquareOutcome> {
    if w < 2 {
        return Err(Error::Domain(format!(
            "chi-square sample size must be ≥ 2, got {w}"
        )));
    }
    let sample = sample_cells(observed, w, rng)?;
    chi_square_sample(&sample, expected, delta)
}

pub fn chi_square_sample(
    sample: &Sample,
    expected: &FittedStats,
    delta: f64,
) -> Result<ChiSquareOutcome> {
    match bucket_counts(sample, expected)? {
        Some((obs, exp)) => chi_square_buckets(&obs, &exp, delta),
        None => Ok(ChiSquareOutcome::failed_closed()),
    }
}
