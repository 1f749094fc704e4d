//! Series creation: grouping a query column and its aligned columns into the series
//! that become bar groups in a chart.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EngineConfig, Strategy};
use crate::error::{Error, Result};
use crate::hashing::{mix_seed, tokens};
use crate::stats::{self, FittedStats};
use crate::table::{Cell, ColumnRef, DType, Lake, TypedColumn};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub id: usize,
    pub query_column: usize,
    /// Member columns in ascending cardinality order.
    pub members: Vec<ColumnRef>,
    pub stats: FittedStats,
    pub label: String,
    /// Non-null cells across all members.
    pub cardinality: usize,
}

/// Counters from one run of series creation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SeriesTrace {
    pub tests: usize,
    pub merges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesCollection {
    pub query_column: usize,
    pub series: Vec<Series>,
    pub trace: SeriesTrace,
}

impl SeriesCollection {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Member sets, for comparing partitions.
    pub fn partition(&self) -> Vec<Vec<ColumnRef>> {
        self.series.iter().map(|s| s.members.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesConfig {
    pub sample_size: usize,
    pub delta: f64,
    pub overlap_threshold: f64,
    pub seed: u64,
}

impl From<&EngineConfig> for SeriesConfig {
    fn from(c: &EngineConfig) -> Self {
        Self {
            sample_size: c.sample_size,
            delta: c.delta,
            overlap_threshold: c.overlap_threshold,
            seed: c.seed,
        }
    }
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self::from(&EngineConfig::default())
    }
}

fn numeric_range(c: &TypedColumn) -> Option<(f64, f64)> {
    let xs = c.numbers()?;
    let mut it = xs.iter().flatten();
    let first = *it.next()?;
    Some(it.fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x))))
}

fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Syntactic relatedness in `[0, 1]`: Jaccard of distinct values (categorical), overlap of
/// `[min, max]` ranges (numerical), or Jaccard of word vocabularies (textual).
pub fn syntactic_relatedness(c1: &TypedColumn, c2: &TypedColumn) -> Result<f64> {
    if c1.dtype != c2.dtype {
        return Err(Error::DtypeMismatch(c1.dtype, c2.dtype));
    }
    Ok(match c1.dtype {
        DType::Categorical => {
            let set = |c: &TypedColumn| -> HashSet<String> {
                (0..c.len())
                    .filter_map(|r| match c.cell(r) {
                        Cell::Text(s) => Some(s.to_string()),
                        _ => None,
                    })
                    .collect()
            };
            jaccard(&set(c1), &set(c2))
        }
        DType::Textual => {
            let vocab = |c: &TypedColumn| -> HashSet<String> {
                c.strings()
                    .expect("string storage")
                    .iter()
                    .flatten()
                    .flat_map(|s| tokens(s).collect::<Vec<_>>())
                    .collect()
            };
            jaccard(&vocab(c1), &vocab(c2))
        }
        DType::Numerical => match (numeric_range(c1), numeric_range(c2)) {
            (Some((a0, a1)), Some((b0, b1))) => {
                let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
                let union = a1.max(b1) - a0.min(b0);
                if union > 0.0 {
                    inter / union
                } else if a0 == b0 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 0.0,
        },
    })
}

struct Working {
    members: Vec<ColumnRef>,
    stats: FittedStats,
    cardinality: usize,
}

fn columns<'a>(lake: &'a Lake, members: &[ColumnRef]) -> Vec<&'a TypedColumn> {
    members.iter().map(|&r| lake.col(r)).collect()
}

/// The candidate members `q ∪ C(q)`, sorted ascending by cardinality (ties by reference).
pub fn candidate_members(lake: &Lake, query_column: usize) -> Vec<ColumnRef> {
    let mut members: Vec<ColumnRef> = std::iter::once(ColumnRef::query(query_column))
        .chain(lake.alignment.aligned(query_column).iter().copied())
        .collect();
    members.sort_by_key(|&r| (lake.col(r).non_null(), r));
    members
}

fn finish(
    lake: &Lake,
    query_column: usize,
    groups: Vec<Working>,
    trace: SeriesTrace,
) -> SeriesCollection {
    let series = groups
        .into_iter()
        .enumerate()
        .map(|(id, w)| Series {
            id,
            query_column,
            label: w
                .members
                .iter()
                .map(|&r| lake.qualified_name(r))
                .collect::<Vec<_>>()
                .join(", "),
            members: w.members,
            stats: w.stats,
            cardinality: w.cardinality,
        })
        .collect();
    SeriesCollection {
        query_column,
        series,
        trace,
    }
}

fn fit_group(
    lake: &Lake,
    members: Vec<ColumnRef>,
    cfg: &SeriesConfig,
    salt: u64,
) -> Result<Working> {
    let cols = columns(lake, &members);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, salt]));
    let stats = stats::fit_stats(&cols, cfg.sample_size, &mut rng)?;
    Ok(Working {
        cardinality: cols.iter().map(|c| c.non_null()).sum(),
        members,
        stats,
    })
}

/// Builds Γ(q) for query column `q` using `strategy`. The query column itself is a
/// member candidate alongside its aligned columns.
pub fn create_series(
    lake: &Lake,
    query_column: usize,
    strategy: Strategy,
    cfg: &SeriesConfig,
) -> Result<SeriesCollection> {
    if lake.query().column(query_column).is_none() {
        return Err(Error::Schema(format!(
            "query table has no column #{query_column}"
        )));
    }
    let members = candidate_members(lake, query_column);
    let q = query_column as u64;
    match strategy {
        Strategy::NoMerge => {
            let groups = members
                .into_iter()
                .enumerate()
                .map(|(i, m)| fit_group(lake, vec![m], cfg, mix_seed(&[q, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            Ok(finish(lake, query_column, groups, SeriesTrace::default()))
        }
        Strategy::Overlap => overlap_series(lake, query_column, members, cfg),
        Strategy::Stats => stats_series(lake, query_column, members, cfg),
    }
}

/// Builds a collection from explicit member groups, in the given order. Used for custom
/// series and for measures that have no query alignment.
pub fn series_from_groups(
    lake: &Lake,
    query_column: usize,
    groups: Vec<Vec<ColumnRef>>,
    cfg: &SeriesConfig,
) -> Result<SeriesCollection> {
    let q = query_column as u64;
    let groups = groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| fit_group(lake, g, cfg, mix_seed(&[q, 0x6e0, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(lake, query_column, groups, SeriesTrace::default()))
}

/// Minimal union-find with path halving and union by size.
struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

fn overlap_series(
    lake: &Lake,
    query_column: usize,
    members: Vec<ColumnRef>,
    cfg: &SeriesConfig,
) -> Result<SeriesCollection> {
    let cols = columns(lake, &members);
    let mut dsu = DisjointSet::new(members.len());
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            if syntactic_relatedness(cols[i], cols[j])? >= cfg.overlap_threshold {
                dsu.union(i, j);
            }
        }
    }
    // Groups appear in order of their smallest member; members keep ascending order.
    let mut roots: Vec<usize> = Vec::new();
    let mut grouped: Vec<Vec<ColumnRef>> = Vec::new();
    for (i, &m) in members.iter().enumerate() {
        let root = dsu.find(i);
        match roots.iter().position(|&r| r == root) {
            Some(g) => grouped[g].push(m),
            None => {
                roots.push(root);
                grouped.push(vec![m]);
            }
        }
    }
    let q = query_column as u64;
    let groups = grouped
        .into_iter()
        .enumerate()
        .map(|(i, g)| fit_group(lake, g, cfg, mix_seed(&[q, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(lake, query_column, groups, SeriesTrace::default()))
}

/// Chi-square driven merging over adjacent series in ascending cardinality order.
///
/// After every merge the cursor restarts at the front; the loop stops once two series
/// remain or the cursor runs off the end. Of each tested pair, the smaller series is
/// sampled as the observed side and the larger one's fitted statistics are the expected
/// side.
fn stats_series(
    lake: &Lake,
    query_column: usize,
    members: Vec<ColumnRef>,
    cfg: &SeriesConfig,
) -> Result<SeriesCollection> {
    let q = query_column as u64;
    let mut gamma = members
        .into_iter()
        .enumerate()
        .map(|(i, m)| fit_group(lake, vec![m], cfg, mix_seed(&[q, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let mut trace = SeriesTrace::default();
    let mut j = 0;
    while gamma.len() > 2 && j + 1 < gamma.len() {
        let (small, large) = if gamma[j].cardinality <= gamma[j + 1].cardinality {
            (j, j + 1)
        } else {
            (j + 1, j)
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, q, 0x7e57, trace.tests as u64]));
        trace.tests += 1;
        let observed = columns(lake, &gamma[small].members);
        let passed = match stats::chi_square_test(
            &observed,
            &gamma[large].stats,
            cfg.sample_size,
            cfg.delta,
            &mut rng,
        ) {
            Ok(outcome) => outcome.pass,
            Err(Error::FamilyMismatch(..)) => false,
            Err(e) => return Err(e),
        };
        let merged = if passed {
            match stats::merge_stats(&gamma[j].stats, &gamma[j + 1].stats) {
                Ok(s) => Some(s),
                Err(Error::FamilyMismatch(..)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        match merged {
            Some(stats) => {
                let right = gamma.remove(j + 1);
                let left = &mut gamma[j];
                left.members.extend(right.members);
                left.cardinality += right.cardinality;
                left.stats = stats;
                trace.merges += 1;
                j = 0;
            }
            None => j += 1,
        }
    }
    Ok(finish(lake, query_column, gamma, trace))
}
