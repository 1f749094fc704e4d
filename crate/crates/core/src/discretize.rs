//! Turns a dimension-attribute column (plus its aligned columns) into an ordered,
//! finite domain and maps every non-null cell onto it.
//!
//! Categorical columns pass through as sorted distinct tokens, numerical columns are
//! cut into equi-width bins, and textual columns are clustered over hashed
//! bag-of-token embeddings. The domain order is the ground order used by EMD.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::hashing::{fnv1a, tokens};
use crate::table::{DType, TableId, TypedColumn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DimensionValue {
    Category {
        token: String,
    },
    /// `[lo, hi)`, except the last bin which is closed.
    Bin {
        lo: f64,
        hi: f64,
        closed: bool,
    },
    Cluster {
        id: usize,
        label: String,
    },
}

impl DimensionValue {
    pub fn label(&self) -> String {
        match self {
            DimensionValue::Category { token } => token.clone(),
            DimensionValue::Bin { lo, hi, closed } => {
                format!("[{lo}, {hi}{}", if *closed { "]" } else { ")" })
            }
            DimensionValue::Cluster { label, .. } => label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionDomain {
    pub values: Vec<DimensionValue>,
}

impl DimensionDomain {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.values.iter().map(DimensionValue::label).collect()
    }
}

/// Per table, the domain index of each row of that table's dimension column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellAssignment {
    by_table: BTreeMap<TableId, Vec<Option<u32>>>,
}

impl CellAssignment {
    pub fn rows(&self, table: TableId) -> Option<&[Option<u32>]> {
        self.by_table.get(&table).map(Vec::as_slice)
    }

    pub fn tables(&self) -> impl Iterator<Item = TableId> + '_ {
        self.by_table.keys().copied()
    }

    /// Reorders each table's rows to `orders[table]`.
    pub fn with_row_order(&self, orders: &[Vec<u32>]) -> Self {
        let by_table = self
            .by_table
            .iter()
            .map(|(&t, rows)| {
                (
                    t,
                    orders[t.index()]
                        .iter()
                        .map(|&r| rows[r as usize])
                        .collect(),
                )
            })
            .collect();
        Self { by_table }
    }

    fn insert(&mut self, table: TableId, rows: Vec<Option<u32>>) {
        self.by_table.insert(table, rows);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizeConfig {
    pub bin_count: usize,
    pub text_dim: usize,
    pub text_kmax: usize,
    pub seed: u64,
}

impl Default for DiscretizeConfig {
    fn default() -> Self {
        Self::from(&EngineConfig::default())
    }
}

impl From<&EngineConfig> for DiscretizeConfig {
    fn from(c: &EngineConfig) -> Self {
        Self {
            bin_count: c.bin_count.max(1),
            text_dim: c.text_dim.max(1),
            text_kmax: c.text_kmax.max(1),
            seed: c.seed,
        }
    }
}

/// Strategy for discretizing textual columns. Each distinct text (with its cell count)
/// is mapped to an index into the returned domain values.
pub trait TextDiscretizer: Send + Sync {
    fn discretize(&self, texts: &[(&str, usize)]) -> (Vec<DimensionValue>, Vec<u32>);
}

/// Signed feature hashing of lowercase alphanumeric tokens, L2-normalized.
pub fn embed_text(cell: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim.max(1)];
    for tok in tokens(cell) {
        let h = fnv1a(0, tok.as_bytes());
        let bucket = (h % v.len() as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means over hashed embeddings with seeded k-means++ initialization.
#[derive(Debug, Clone)]
pub struct ClusterDiscretizer {
    pub dim: usize,
    pub kmax: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl ClusterDiscretizer {
    pub fn new(cfg: &DiscretizeConfig) -> Self {
        Self {
            dim: cfg.text_dim,
            kmax: cfg.text_kmax,
            seed: cfg.seed,
            max_iter: 25,
        }
    }

    fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, c) in centroids.iter().enumerate() {
            let d = sq_dist(c, p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn init(&self, points: &[Vec<f64>], weights: &[f64], k: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let pick = |rng: &mut ChaCha8Rng, w: &[f64]| -> Option<usize> {
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return None;
            }
            let mut r = rng.random::<f64>() * total;
            for (i, &wi) in w.iter().enumerate() {
                if r < wi {
                    return Some(i);
                }
                r -= wi;
            }
            w.iter().rposition(|&x| x > 0.0)
        };
        let first = pick(&mut rng, weights).unwrap_or(0);
        let mut centroids = vec![points[first].clone()];
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
        while centroids.len() < k {
            let w: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
            let Some(next) = pick(&mut rng, &w) else {
                break;
            };
            centroids.push(points[next].clone());
            for (d, p) in d2.iter_mut().zip(points) {
                *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
            }
        }
        centroids
    }
}

impl TextDiscretizer for ClusterDiscretizer {
    fn discretize(&self, texts: &[(&str, usize)]) -> (Vec<DimensionValue>, Vec<u32>) {
        let points: Vec<Vec<f64>> = texts.iter().map(|(t, _)| embed_text(t, self.dim)).collect();
        let weights: Vec<f64> = texts.iter().map(|&(_, n)| n as f64).collect();
        let k = self
            .kmax
            .min((texts.len() as f64).sqrt().ceil() as usize)
            .max(1);
        let mut centroids = self.init(&points, &weights, k);
        let mut assign: Vec<usize> = points
            .iter()
            .map(|p| Self::nearest(&centroids, p))
            .collect();
        for _ in 0..self.max_iter {
            let mut sums = vec![vec![0.0; self.dim]; centroids.len()];
            let mut mass = vec![0.0; centroids.len()];
            for ((p, &a), &w) in points.iter().zip(&assign).zip(&weights) {
                mass[a] += w;
                for (s, x) in sums[a].iter_mut().zip(p) {
                    *s += w * x;
                }
            }
            for (c, (s, m)) in centroids.iter_mut().zip(sums.into_iter().zip(&mass)) {
                // empty clusters keep their previous centroid
                if *m > 0.0 {
                    *c = s.into_iter().map(|x| x / m).collect();
                }
            }
            let next: Vec<usize> = points
                .iter()
                .map(|p| Self::nearest(&centroids, p))
                .collect();
            if next == assign {
                break;
            }
            assign = next;
        }

        // Drop empty clusters, then order by centroid norm, then original id.
        let mut used: Vec<usize> = assign.clone();
        used.sort_unstable();
        used.dedup();
        let mut order: Vec<(f64, usize)> = used
            .iter()
            .map(|&c| (centroids[c].iter().map(|x| x * x).sum::<f64>().sqrt(), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rank: HashMap<usize, u32> = order
            .iter()
            .enumerate()
            .map(|(i, &(_, c))| (c, i as u32))
            .collect();

        let mut token_counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); order.len()];
        for (&(text, n), &a) in texts.iter().zip(&assign) {
            let counts = &mut token_counts[rank[&a] as usize];
            for tok in tokens(text) {
                *counts.entry(tok).or_default() += n;
            }
        }
        let values = token_counts
            .into_iter()
            .enumerate()
            .map(|(id, counts)| {
                let mut top: Vec<(String, usize)> = counts.into_iter().collect();
                top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                let label = top
                    .into_iter()
                    .take(3)
                    .map(|(t, _)| t)
                    .collect::<Vec<_>>()
                    .join(" ");
                DimensionValue::Cluster { id, label }
            })
            .collect();
        let mapping = assign.iter().map(|a| rank[a]).collect();
        (values, mapping)
    }
}

/// Builds the domain for a dimension column and its aligned columns using the default
/// clustering strategy for text.
pub fn build_domain(
    sources: &[(TableId, &TypedColumn)],
    cfg: &DiscretizeConfig,
) -> Result<(DimensionDomain, CellAssignment)> {
    build_domain_with(sources, cfg, &ClusterDiscretizer::new(cfg))
}

pub fn build_domain_with(
    sources: &[(TableId, &TypedColumn)],
    cfg: &DiscretizeConfig,
    text: &dyn TextDiscretizer,
) -> Result<(DimensionDomain, CellAssignment)> {
    let Some(&(_, first)) = sources.first() else {
        return Err(Error::EmptyDomain);
    };
    let dtype = first.dtype;
    if let Some(&(_, bad)) = sources.iter().find(|(_, c)| c.dtype != dtype) {
        return Err(Error::DtypeMismatch(dtype, bad.dtype));
    }
    if sources.iter().all(|(_, c)| c.non_null() == 0) {
        return Err(Error::EmptyDomain);
    }
    match dtype {
        DType::Numerical => Ok(numeric_domain(sources, cfg.bin_count)),
        DType::Categorical => Ok(string_domain(sources, |distinct| {
            let values = distinct
                .iter()
                .map(|(t, _)| DimensionValue::Category {
                    token: t.to_string(),
                })
                .collect();
            (values, (0..distinct.len() as u32).collect())
        })),
        DType::Textual => Ok(string_domain(sources, |distinct| text.discretize(distinct))),
    }
}

/// Maps `x` into one of `bins` equi-width bins over `[min, max]`.
fn bin_index(x: f64, min: f64, width: f64, bins: usize) -> u32 {
    if width <= 0.0 {
        return 0;
    }
    let b = ((x - min) / width).floor();
    (b.max(0.0) as usize).min(bins - 1) as u32
}

fn numeric_domain(
    sources: &[(TableId, &TypedColumn)],
    bin_count: usize,
) -> (DimensionDomain, CellAssignment) {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, c) in sources {
        for x in c.numbers().expect("numerical storage").iter().flatten() {
            min = min.min(*x);
            max = max.max(*x);
        }
    }
    let bins = if min == max { 1 } else { bin_count.max(1) };
    let width = (max - min) / bins as f64;
    let values = (0..bins)
        .map(|i| DimensionValue::Bin {
            lo: min + i as f64 * width,
            hi: if i + 1 == bins {
                max
            } else {
                min + (i + 1) as f64 * width
            },
            closed: i + 1 == bins,
        })
        .collect();
    let mut assignment = CellAssignment::default();
    for &(t, c) in sources {
        let rows = c
            .numbers()
            .expect("numerical storage")
            .iter()
            .map(|x| x.map(|x| bin_index(x, min, width, bins)))
            .collect();
        assignment.insert(t, rows);
    }
    (DimensionDomain { values }, assignment)
}

/// Shared path for string-valued columns: collect distinct values (sorted, with counts),
/// let `f` map them onto domain values, then assign cells.
fn string_domain(
    sources: &[(TableId, &TypedColumn)],
    f: impl FnOnce(&[(&str, usize)]) -> (Vec<DimensionValue>, Vec<u32>),
) -> (DimensionDomain, CellAssignment) {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, c) in sources {
        for s in c.strings().expect("string storage").iter().flatten() {
            *counts.entry(s.as_ref()).or_default() += 1;
        }
    }
    let distinct: Vec<(&str, usize)> = counts.into_iter().collect();
    let (values, mapping) = f(&distinct);
    let index: HashMap<&str, u32> = distinct
        .iter()
        .zip(&mapping)
        .map(|(&(s, _), &m)| (s, m))
        .collect();
    let mut assignment = CellAssignment::default();
    for &(t, c) in sources {
        let rows = c
            .strings()
            .expect("string storage")
            .iter()
            .map(|s| s.as_deref().map(|s| index[s]))
            .collect();
        assignment.insert(t, rows);
    }
    (DimensionDomain { values }, assignment)
}
