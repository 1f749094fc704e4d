//! Visualization plans ⟨A, M, F⟩: enumeration, grouped aggregation with reuse, and the
//! per-series tables they produce.

use std::collections::BTreeMap;
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::discretize::{CellAssignment, DimensionDomain};
use crate::error::{Error, Result};
use crate::prune::Batches;
use crate::series::SeriesCollection;
use crate::table::{ColumnRef, DType, Lake, TableId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFn {
    pub const ALL: [AggFn; 5] = [AggFn::Count, AggFn::Sum, AggFn::Avg, AggFn::Min, AggFn::Max];

    pub fn as_str(&self) -> &'static str {
        match self {
            AggFn::Count => "COUNT",
            AggFn::Sum => "SUM",
            AggFn::Avg => "AVG",
            AggFn::Min => "MIN",
            AggFn::Max => "MAX",
        }
    }

    /// Aggregates allowed for a measure of this dtype.
    pub fn allowed_for(dtype: DType) -> &'static [AggFn] {
        match dtype {
            DType::Numerical => &Self::ALL,
            DType::Categorical => &Self::ALL[..1],
            DType::Textual => &[],
        }
    }
}

impl std::str::FromStr for AggFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidPlan(format!("unknown aggregate `{s}`")))
    }
}

/// A plan triple. `m` is a query column, or with `include_unaligned_measures` a result
/// column with no query alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct VisualizationPlan {
    pub plan_id: usize,
    pub a: usize,
    pub m: ColumnRef,
    pub f: AggFn,
}

/// The discretized dimension attribute: its domain and the domain index of every row of
/// each table that holds `a` or one of its aligned columns.
#[derive(Debug, Clone)]
pub struct DimensionInfo {
    pub a: usize,
    pub domain: DimensionDomain,
    pub assignment: CellAssignment,
}

/// Rows over which a plan is aggregated. A batch scope addresses positions of a lake
/// laid out by [`Batches::lay_out`].
#[derive(Debug, Clone, Copy)]
pub enum Scope<'a> {
    Full,
    Batch { batches: &'a Batches, index: usize },
}

impl Scope<'_> {
    fn key(&self) -> Option<u32> {
        match self {
            Scope::Full => None,
            Scope::Batch { index, .. } => Some(*index as u32),
        }
    }

    fn for_each_row(&self, table: TableId, row_count: usize, f: impl FnMut(usize)) {
        match self {
            Scope::Full => (0..row_count).for_each(f),
            Scope::Batch { batches, index } => batches.range(table, *index).for_each(f),
        }
    }
}

/// One series' aggregate over the domain; `None` marks an empty group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesVector {
    pub label: String,
    pub values: Vec<Option<f64>>,
}

impl SeriesVector {
    pub fn imputed(&self) -> Vec<f64> {
        crate::utility::impute(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanTable {
    pub plan: VisualizationPlan,
    pub series: Vec<SeriesVector>,
}

impl PlanTable {
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.series.iter().map(SeriesVector::imputed).collect()
    }

    pub fn utility(&self) -> f64 {
        crate::utility::utility(&self.vectors())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub count_hits: u64,
    pub count_misses: u64,
    pub sum_hits: u64,
    pub sum_misses: u64,
}

impl CacheStats {
    pub fn hits(&self) -> u64 {
        self.count_hits + self.sum_hits
    }

    pub fn misses(&self) -> u64 {
        self.count_misses + self.sum_misses
    }
}

impl std::ops::AddAssign for CacheStats {
    fn add_assign(&mut self, o: Self) {
        self.count_hits += o.count_hits;
        self.count_misses += o.count_misses;
        self.sum_hits += o.sum_hits;
        self.sum_misses += o.sum_misses;
    }
}

type CountKey = (usize, Option<u32>, TableId);
type SumKey = (usize, ColumnRef, Option<u32>);

/// Per-table sums with the non-null cell count behind each.
#[derive(Debug, Clone, PartialEq)]
struct SumCounts {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

struct Memo<K, V> {
    map: RwLock<FxHashMap<K, Arc<V>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<K, V> Default for Memo<K, V> {
    fn default() -> Self {
        Self {
            map: RwLock::new(FxHashMap::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }
}

impl<K: Eq + Hash, V> Memo<K, V> {
    fn get_or(&self, key: K, compute: impl FnOnce() -> V) -> Arc<V> {
        if let Some(v) = self.map.read().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Arc::clone(v);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = Arc::new(compute());
        Arc::clone(self.map.write().entry(key).or_insert(v))
    }

    fn clear(&self) {
        self.map.write().clear();
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }
}

/// Shared group-by results. COUNT(*) per (A, scope, table) is shared by every measure;
/// SUM with its non-null count per (A, measure column, scope) serves both SUM and AVG.
#[derive(Default)]
pub struct AggregateCache {
    counts: Memo<CountKey, Vec<f64>>,
    sums: Memo<SumKey, SumCounts>,
}

impl AggregateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            count_hits: self.counts.hits.load(Ordering::Relaxed),
            count_misses: self.counts.misses.load(Ordering::Relaxed),
            sum_hits: self.sums.hits.load(Ordering::Relaxed),
            sum_misses: self.sums.misses.load(Ordering::Relaxed),
        }
    }

    pub fn clear(&self) {
        self.counts.clear();
        self.sums.clear();
    }
}

impl std::fmt::Debug for AggregateCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AggregateCache")
            .field("stats", &self.stats())
            .finish()
    }
}

fn table_counts(
    lake: &Lake,
    dim: &DimensionInfo,
    table: TableId,
    scope: Scope<'_>,
) -> Option<Vec<f64>> {
    let mut counts = vec![0.0; dim.domain.len()];
    fill_counts(lake, dim, table, scope, &mut counts).then_some(counts)
}

/// Adds per-value row counts of `table` into `out`; `false` when the table has no column
/// aligned to A.
fn fill_counts(
    lake: &Lake,
    dim: &DimensionInfo,
    table: TableId,
    scope: Scope<'_>,
    out: &mut [f64],
) -> bool {
    let (Some(assign), Some(t)) = (dim.assignment.rows(table), lake.table(table)) else {
        return false;
    };
    scope.for_each_row(table, t.row_count, |r| {
        if let Some(b) = assign[r] {
            out[b as usize] += 1.0;
        }
    });
    true
}

fn column_sums(
    lake: &Lake,
    dim: &DimensionInfo,
    member: ColumnRef,
    scope: Scope<'_>,
) -> Option<SumCounts> {
    let d = dim.domain.len();
    let mut out = SumCounts {
        sums: vec![0.0; d],
        counts: vec![0; d],
    };
    fill_sums(lake, dim, member, scope, &mut out.sums, &mut out.counts).then_some(out)
}

fn fill_sums(
    lake: &Lake,
    dim: &DimensionInfo,
    member: ColumnRef,
    scope: Scope<'_>,
    sums: &mut [f64],
    counts: &mut [u64],
) -> bool {
    let (Some(assign), Some(xs)) = (
        dim.assignment.rows(member.table),
        lake.col(member).numbers(),
    ) else {
        return false;
    };
    scope.for_each_row(member.table, xs.len(), |r| {
        if let (Some(b), Some(x)) = (assign[r], xs[r]) {
            sums[b as usize] += x;
            counts[b as usize] += 1;
        }
    });
    true
}

fn column_extreme(
    lake: &Lake,
    dim: &DimensionInfo,
    member: ColumnRef,
    scope: Scope<'_>,
    pick: fn(f64, f64) -> f64,
) -> Option<Vec<Option<f64>>> {
    let assign = dim.assignment.rows(member.table)?;
    let xs = lake.col(member).numbers()?;
    let mut out: Vec<Option<f64>> = vec![None; dim.domain.len()];
    scope.for_each_row(member.table, xs.len(), |r| {
        if let (Some(b), Some(x)) = (assign[r], xs[r]) {
            let slot = &mut out[b as usize];
            *slot = Some(slot.map_or(x, |y| pick(y, x)));
        }
    });
    Some(out)
}

/// Everything needed to aggregate one plan: the lake, the discretized A and Γ(M).
#[derive(Debug, Clone, Copy)]
pub struct PlanInput<'a> {
    pub lake: &'a Lake,
    pub dim: &'a DimensionInfo,
    pub series: &'a SeriesCollection,
}

/// Evaluates `plan` over `scope`. Member tables without a column aligned to A contribute
/// nothing; a series none of whose members can be grouped is all-absent.
pub fn group_aggregate(
    plan: &VisualizationPlan,
    input: PlanInput<'_>,
    scope: Scope<'_>,
    cache: Option<&AggregateCache>,
) -> PlanTable {
    let PlanInput { lake, dim, series } = input;
    let d = dim.domain.len();
    let vectors = series
        .series
        .iter()
        .map(|s| {
            let values = match plan.f {
                AggFn::Count => {
                    let mut acc = vec![0.0; d];
                    for m in &s.members {
                        if let Some(c) = cached_counts(input, m.table, scope, cache) {
                            acc.iter_mut().zip(c.iter()).for_each(|(x, y)| *x += y);
                        }
                    }
                    acc.into_iter().map(Some).collect()
                }
                AggFn::Sum | AggFn::Avg => {
                    let mut total = vec![0.0; d];
                    let mut n = vec![0u64; d];
                    for &m in &s.members {
                        if let Some(sc) = cached_sums(input, m, scope, cache) {
                            for i in 0..d {
                                total[i] += sc.sums[i];
                                n[i] += sc.counts[i];
                            }
                        }
                    }
                    if plan.f == AggFn::Sum {
                        total.into_iter().map(Some).collect()
                    } else {
                        (0..d)
                            .map(|i| (n[i] > 0).then(|| total[i] / n[i] as f64))
                            .collect()
                    }
                }
                AggFn::Min | AggFn::Max => {
                    let pick: fn(f64, f64) -> f64 = if plan.f == AggFn::Min {
                        f64::min
                    } else {
                        f64::max
                    };
                    let mut acc: Vec<Option<f64>> = vec![None; d];
                    for &m in &s.members {
                        if let Some(v) = column_extreme(lake, dim, m, scope, pick) {
                            for (slot, x) in acc.iter_mut().zip(v) {
                                if let Some(x) = x {
                                    *slot = Some(slot.map_or(x, |y| pick(y, x)));
                                }
                            }
                        }
                    }
                    acc
                }
            };
            SeriesVector {
                label: s.label.clone(),
                values,
            }
        })
        .collect();
    PlanTable {
        plan: *plan,
        series: vectors,
    }
}

fn cached_counts(
    input: PlanInput<'_>,
    t: TableId,
    scope: Scope<'_>,
    cache: Option<&AggregateCache>,
) -> Option<Arc<Vec<f64>>> {
    let PlanInput { lake, dim, .. } = input;
    match cache {
        Some(c) if dim.assignment.rows(t).is_some() => {
            Some(c.counts.get_or((dim.a, scope.key(), t), || {
                table_counts(lake, dim, t, scope).expect("assignment exists")
            }))
        }
        _ => table_counts(lake, dim, t, scope).map(Arc::new),
    }
}

fn cached_sums(
    input: PlanInput<'_>,
    m: ColumnRef,
    scope: Scope<'_>,
    cache: Option<&AggregateCache>,
) -> Option<Arc<SumCounts>> {
    let PlanInput { lake, dim, .. } = input;
    match cache {
        Some(c) if dim.assignment.rows(m.table).is_some() => {
            Some(c.sums.get_or((dim.a, m, scope.key()), || {
                column_sums(lake, dim, m, scope).expect("numeric member with assignment")
            }))
        }
        _ => column_sums(lake, dim, m, scope).map(Arc::new),
    }
}

#[derive(Debug, Default)]
struct Slot {
    epoch: u64,
    present: bool,
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl Slot {
    fn reset(&mut self, epoch: u64, d: usize) {
        self.epoch = epoch;
        self.sums.clear();
        self.sums.resize(d, 0.0);
        self.counts.clear();
        self.counts.resize(d, 0);
    }
}

/// Scratch space for [`score_plan`], with a dense memo of COUNT(*) per table and SUM per
/// member column. The memo holds one (A, scope) at a time and is dropped when either
/// changes, so batch scoring reuses group-by results across plans without hashing.
#[derive(Debug, Default)]
pub struct ScoreBuffer {
    reuse: bool,
    values: Vec<f64>,
    counts: Vec<u64>,
    key: Option<(usize, Option<u32>)>,
    epoch: u64,
    tables: Vec<Slot>,
    columns: Vec<Vec<Slot>>,
    stats: CacheStats,
}

impl ScoreBuffer {
    /// `reuse = false` recomputes every group-by, like a missing [`AggregateCache`].
    pub fn new(reuse: bool) -> Self {
        Self {
            reuse,
            ..Self::default()
        }
    }

    /// Hit and miss counts of the memo so far.
    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    fn begin(&mut self, lake: &Lake, key: (usize, Option<u32>)) {
        if self.key != Some(key) || !self.reuse {
            self.key = Some(key);
            self.epoch += 1;
        }
        let n = lake.tables().len();
        if self.tables.len() < n {
            self.tables.resize_with(n, Slot::default);
            self.columns.resize_with(n, Vec::new);
        }
    }

    fn counts_of(&mut self, input: PlanInput<'_>, t: TableId, scope: Scope<'_>) -> Option<&[f64]> {
        let d = input.dim.domain.len();
        let epoch = self.epoch;
        let slot = &mut self.tables[t.index()];
        if self.reuse && slot.epoch == epoch {
            self.stats.count_hits += 1;
        } else {
            if self.reuse {
                self.stats.count_misses += 1;
            }
            slot.reset(epoch, d);
            slot.present = fill_counts(input.lake, input.dim, t, scope, &mut slot.sums);
        }
        slot.present.then_some(&slot.sums[..])
    }

    fn sums_of(
        &mut self,
        input: PlanInput<'_>,
        m: ColumnRef,
        scope: Scope<'_>,
    ) -> Option<(&[f64], &[u64])> {
        let d = input.dim.domain.len();
        let epoch = self.epoch;
        let row = &mut self.columns[m.table.index()];
        if row.len() <= m.column {
            row.resize_with(m.column + 1, Slot::default);
        }
        let slot = &mut row[m.column];
        if self.reuse && slot.epoch == epoch {
            self.stats.sum_hits += 1;
        } else {
            if self.reuse {
                self.stats.sum_misses += 1;
            }
            slot.reset(epoch, d);
            slot.present = fill_sums(
                input.lake,
                input.dim,
                m,
                scope,
                &mut slot.sums,
                &mut slot.counts,
            );
        }
        slot.present.then_some((&slot.sums[..], &slot.counts[..]))
    }
}

/// Utility of `plan` over `scope` without materializing a [`PlanTable`]. Equal to
/// `group_aggregate(..).utility()` bit for bit.
pub fn score_plan(
    plan: &VisualizationPlan,
    input: PlanInput<'_>,
    scope: Scope<'_>,
    buf: &mut ScoreBuffer,
) -> f64 {
    let PlanInput { lake, dim, series } = input;
    let d = dim.domain.len();
    let v = series.series.len();
    buf.begin(lake, (dim.a, scope.key()));
    let mut values = std::mem::take(&mut buf.values);
    let mut n = std::mem::take(&mut buf.counts);
    values.clear();
    values.resize(v * d, 0.0);
    for (s, row) in series.series.iter().zip(values.chunks_mut(d.max(1))) {
        match plan.f {
            AggFn::Count => {
                for m in &s.members {
                    if let Some(c) = buf.counts_of(input, m.table, scope) {
                        row.iter_mut().zip(c).for_each(|(x, y)| *x += y);
                    }
                }
            }
            AggFn::Sum | AggFn::Avg => {
                n.clear();
                n.resize(d, 0);
                for &m in &s.members {
                    if let Some((sums, counts)) = buf.sums_of(input, m, scope) {
                        for i in 0..d {
                            row[i] += sums[i];
                            n[i] += counts[i];
                        }
                    }
                }
                if plan.f == AggFn::Avg {
                    for (x, &k) in row.iter_mut().zip(&n) {
                        *x = if k > 0 { *x / k as f64 } else { 0.0 };
                    }
                }
            }
            AggFn::Min | AggFn::Max => {
                let pick: fn(f64, f64) -> f64 = if plan.f == AggFn::Min {
                    f64::min
                } else {
                    f64::max
                };
                row.fill(f64::NAN);
                for &m in &s.members {
                    let (Some(assign), Some(xs)) =
                        (dim.assignment.rows(m.table), lake.col(m).numbers())
                    else {
                        continue;
                    };
                    scope.for_each_row(m.table, xs.len(), |r| {
                        if let (Some(b), Some(x)) = (assign[r], xs[r]) {
                            let slot = &mut row[b as usize];
                            *slot = if slot.is_nan() { x } else { pick(*slot, x) };
                        }
                    });
                }
                row.iter_mut().filter(|x| x.is_nan()).for_each(|x| *x = 0.0);
            }
        }
    }
    let u = crate::utility::utility_flat(&mut values, v, d);
    buf.values = values;
    buf.counts = n;
    u
}

/// Checks the typing and overlap rules for a triple.
pub fn validate_triple(lake: &Lake, a: usize, m: ColumnRef, f: AggFn) -> Result<()> {
    let q = lake.query();
    if q.column(a).is_none() {
        return Err(Error::InvalidPlan(format!(
            "dimension column #{a} does not exist"
        )));
    }
    let mcol = lake
        .column(m)
        .ok_or_else(|| Error::InvalidPlan(format!("measure column {m:?} does not exist")))?;
    if m == ColumnRef::query(a) {
        return Err(Error::InvalidPlan(
            "dimension and measure are the same column".into(),
        ));
    }
    if lake.alignment.aligned(a).contains(&m) {
        return Err(Error::InvalidPlan(
            "measure is aligned with the dimension".into(),
        ));
    }
    if !AggFn::allowed_for(mcol.dtype).contains(&f) {
        return Err(Error::InvalidPlan(format!(
            "{} is not defined for a {} measure",
            f.as_str(),
            mcol.dtype.as_str()
        )));
    }
    Ok(())
}

/// Measure columns in plan order: query columns, then (optionally) unaligned result columns.
pub fn measure_columns(lake: &Lake, include_unaligned: bool) -> Vec<ColumnRef> {
    let measurable =
        |r: ColumnRef| matches!(lake.col(r).dtype, DType::Categorical | DType::Numerical);
    let mut out: Vec<ColumnRef> = (0..lake.query().columns.len())
        .map(ColumnRef::query)
        .filter(|&r| measurable(r))
        .collect();
    if include_unaligned {
        for t in lake.results() {
            for c in 0..t.columns.len() {
                let r = ColumnRef::new(t.id, c);
                if lake.alignment.query_column_of(r).is_none() && measurable(r) {
                    out.push(r);
                }
            }
        }
    }
    out
}

/// Number of domain values with at least one row across the tables of Γ(M).
pub fn populated_values(lake: &Lake, dim: &DimensionInfo, series: &SeriesCollection) -> usize {
    let mut any = vec![false; dim.domain.len()];
    for s in &series.series {
        for m in &s.members {
            if let Some(c) = table_counts(lake, dim, m.table, Scope::Full) {
                any.iter_mut().zip(c).for_each(|(a, x)| *a |= x > 0.0);
            }
        }
    }
    any.into_iter().filter(|&x| x).count()
}

/// Enumerates valid plans. `dims` holds the discretized dimension per query column and
/// `series` holds Γ(M) per measure column; missing entries are skipped.
pub fn enumerate_plans(
    lake: &Lake,
    dims: &BTreeMap<usize, DimensionInfo>,
    series: &BTreeMap<ColumnRef, SeriesCollection>,
    include_unaligned: bool,
) -> Vec<VisualizationPlan> {
    let measures = measure_columns(lake, include_unaligned);
    let mut plans = Vec::new();
    for (&a, dim) in dims {
        for &m in &measures {
            let Some(gamma) = series.get(&m) else {
                continue;
            };
            if m == ColumnRef::query(a) || lake.alignment.aligned(a).contains(&m) {
                continue;
            }
            if populated_values(lake, dim, gamma) < 2 {
                continue;
            }
            for &f in AggFn::allowed_for(lake.col(m).dtype) {
                plans.push(VisualizationPlan {
                    plan_id: plans.len(),
                    a,
                    m,
                    f,
                });
            }
        }
    }
    plans
}
