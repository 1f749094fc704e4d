//! End-to-end recommendation: discretize dimensions, build series, enumerate plans,
//! generate candidates and re-rank them exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EngineConfig, Strategy};
use crate::discretize::{build_domain, DiscretizeConfig};
use crate::error::{Error, Result};
use crate::hashing::mix_seed;
use crate::plans::{
    enumerate_plans, group_aggregate, validate_triple, AggFn, AggregateCache, CacheStats,
    DimensionInfo, PlanInput, PlanTable, Scope, VisualizationPlan,
};
use crate::prune::{
    candidate_generation, final_rank, make_batches, Batches, PruneConfig, RankedPlan,
};
use crate::series::{create_series, series_from_groups, SeriesCollection, SeriesConfig};
use crate::table::{ColumnRef, Lake, TableId};

/// Discretizes query column `a` together with its aligned columns.
pub fn build_dimension(lake: &Lake, a: usize, cfg: &DiscretizeConfig) -> Result<DimensionInfo> {
    let mut sources = vec![(TableId::QUERY, lake.col(ColumnRef::query(a)))];
    sources.extend(
        lake.alignment
            .aligned(a)
            .iter()
            .map(|&r| (r.table, lake.col(r))),
    );
    let (domain, assignment) = build_domain(&sources, cfg)?;
    Ok(DimensionInfo {
        a,
        domain,
        assignment,
    })
}

/// Γ(M) for a measure: the configured strategy for query columns, a single series for an
/// unaligned result column.
pub fn build_series(
    lake: &Lake,
    m: ColumnRef,
    strategy: Strategy,
    cfg: &SeriesConfig,
) -> Result<SeriesCollection> {
    if m.table == TableId::QUERY {
        create_series(lake, m.column, strategy, cfg)
    } else {
        series_from_groups(lake, m.column, vec![vec![m]], cfg)
    }
}

/// Display name: the header for query columns, `table.header` otherwise.
pub fn column_label(lake: &Lake, r: ColumnRef) -> String {
    if r.table == TableId::QUERY {
        match lake.column(r) {
            Some(c) if !c.header.is_empty() => c.header.clone(),
            _ => format!("#{}", r.column),
        }
    } else {
        lake.qualified_name(r)
    }
}

/// Resolves a query column by header or by `#index` / bare index.
pub fn resolve_query_column(lake: &Lake, key: &str) -> Result<usize> {
    let q = lake.query();
    if let Some(i) = q.column_index(key) {
        return Ok(i);
    }
    let idx = key.strip_prefix('#').unwrap_or(key);
    match idx.parse::<usize>() {
        Ok(i) if i < q.columns.len() => Ok(i),
        _ => Err(Error::InvalidPlan(format!("unknown query column `{key}`"))),
    }
}

/// Resolves a measure: a query column, or `table.column` for a result column.
pub fn resolve_column(lake: &Lake, key: &str) -> Result<ColumnRef> {
    if let Ok(i) = resolve_query_column(lake, key) {
        return Ok(ColumnRef::query(i));
    }
    for (pos, _) in key.match_indices('.') {
        let (t, c) = (&key[..pos], &key[pos + 1..]);
        if let Some(table) = lake.table_by_name(t) {
            let col = table.column_index(c).or_else(|| {
                c.strip_prefix('#')
                    .unwrap_or(c)
                    .parse::<usize>()
                    .ok()
                    .filter(|&i| i < table.columns.len())
            });
            if let Some(col) = col {
                return Ok(ColumnRef::new(table.id, col));
            }
        }
    }
    Err(Error::InvalidPlan(format!("unknown column `{key}`")))
}

/// Discretized dimensions, series and enumerated plans for one lake and configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub lake: Arc<Lake>,
    pub config: EngineConfig,
    pub dims: BTreeMap<usize, DimensionInfo>,
    pub series: BTreeMap<ColumnRef, SeriesCollection>,
    pub plans: Vec<VisualizationPlan>,
    /// Columns skipped because they could not be discretized or fitted.
    pub warnings: Vec<String>,
}

/// A prepared lake with rows in batch order.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    pub lake: Lake,
    pub dims: BTreeMap<usize, DimensionInfo>,
}

impl Prepared {
    pub fn new(lake: Arc<Lake>, config: EngineConfig) -> Self {
        let dcfg = DiscretizeConfig::from(&config);
        let scfg = SeriesConfig::from(&config);
        let mut warnings = Vec::new();
        let dim_results: Vec<(usize, Result<DimensionInfo>)> = (0..lake.query().columns.len())
            .into_par_iter()
            .map(|a| (a, build_dimension(&lake, a, &dcfg)))
            .collect();
        let mut dims = BTreeMap::new();
        for (a, r) in dim_results {
            match r {
                Ok(d) => {
                    dims.insert(a, d);
                }
                Err(e) => warnings.push(format!(
                    "dimension `{}` skipped: {e}",
                    column_label(&lake, ColumnRef::query(a))
                )),
            }
        }
        let measures = crate::plans::measure_columns(&lake, config.include_unaligned_measures);
        let series_results: Vec<(ColumnRef, Result<SeriesCollection>)> = measures
            .into_par_iter()
            .map(|m| (m, build_series(&lake, m, config.strategy, &scfg)))
            .collect();
        let mut series = BTreeMap::new();
        for (m, r) in series_results {
            match r {
                Ok(s) => {
                    series.insert(m, s);
                }
                Err(e) => {
                    warnings.push(format!("measure `{}` skipped: {e}", column_label(&lake, m)))
                }
            }
        }
        let plans = enumerate_plans(&lake, &dims, &series, config.include_unaligned_measures);
        Self {
            lake,
            config,
            dims,
            series,
            plans,
            warnings,
        }
    }

    /// Aggregation inputs for `plan`. Panics for plans not produced by this preparation.
    pub fn input(&self, plan: &VisualizationPlan) -> PlanInput<'_> {
        PlanInput {
            lake: &self.lake,
            dim: &self.dims[&plan.a],
            series: &self.series[&plan.m],
        }
    }

    pub fn plans_by_dimension(&self) -> BTreeMap<usize, Vec<VisualizationPlan>> {
        let mut out: BTreeMap<usize, Vec<VisualizationPlan>> = BTreeMap::new();
        for p in &self.plans {
            out.entry(p.a).or_default().push(*p);
        }
        out
    }

    /// Copies of the lake and dimension assignments in the shuffled row order of `batches`.
    pub fn lay_out(&self, batches: &Batches) -> BatchLayout {
        let dims = self
            .dims
            .iter()
            .map(|(&a, d)| {
                let dim = DimensionInfo {
                    a,
                    domain: d.domain.clone(),
                    assignment: d.assignment.with_row_order(batches.orders()),
                };
                (a, dim)
            })
            .collect();
        BatchLayout {
            lake: batches.lay_out(&self.lake),
            dims,
        }
    }

    /// Plan input over a [`BatchLayout`], for batch scopes.
    pub fn batch_input<'a>(
        &'a self,
        layout: &'a BatchLayout,
        plan: &VisualizationPlan,
    ) -> PlanInput<'a> {
        PlanInput {
            lake: &layout.lake,
            dim: &layout.dims[&plan.a],
            series: &self.series[&plan.m],
        }
    }

    /// Exact full-data table for `plan`.
    pub fn evaluate(&self, plan: &VisualizationPlan, cache: Option<&AggregateCache>) -> PlanTable {
        group_aggregate(plan, self.input(plan), Scope::Full, cache)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub n: usize,
    pub prune: bool,
    pub use_cache: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &EngineConfig) -> Self {
        Self {
            n: cfg.n,
            prune: cfg.prune,
            use_cache: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub plans: usize,
    pub candidates: usize,
    /// Plan evaluations on single batches during candidate generation.
    pub batch_evaluations: usize,
    pub pruned: usize,
    pub early_exits: usize,
    pub cache: CacheStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub ranked: Vec<RankedPlan>,
    pub stats: RunStats,
}

/// Runs candidate generation (when pruning) and the exact final ranking.
pub fn recommend(prep: &Prepared, opts: RunOptions) -> Result<Recommendation> {
    let mut stats = RunStats {
        plans: prep.plans.len(),
        ..RunStats::default()
    };
    if opts.n == 0 {
        return Ok(Recommendation {
            ranked: Vec::new(),
            stats,
        });
    }
    if prep.plans.is_empty() {
        return Err(Error::NoValidPlans);
    }
    let cache = opts.use_cache.then(AggregateCache::new);
    let cache = cache.as_ref();
    let candidates: Vec<VisualizationPlan> = if opts.prune {
        let batches = make_batches(
            &prep.lake,
            prep.config.batch_count,
            mix_seed(&[prep.config.seed, 0xb47]),
        );
        let cfg = PruneConfig {
            n_prime: prep.config.n_prime(),
            delta: prep.config.delta,
        };
        let layout = prep.lay_out(&batches);
        let input = |p: &VisualizationPlan| prep.batch_input(&layout, p);
        let groups: Vec<Vec<VisualizationPlan>> = prep.plans_by_dimension().into_values().collect();
        let runs = groups
            .par_iter()
            .map(|plans| candidate_generation(plans, input, &batches, opts.use_cache, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for (cands, counters) in runs {
            stats.batch_evaluations += counters.evaluations;
            stats.pruned += counters.pruned;
            stats.early_exits += usize::from(counters.early_exit);
            stats.cache += counters.cache;
            out.extend(cands.into_iter().map(|c| c.plan));
        }
        out.sort_by_key(|p| p.plan_id);
        out
    } else {
        prep.plans.clone()
    };
    stats.candidates = candidates.len();
    let ranked = final_rank(&candidates, |p| prep.input(p), cache, opts.n);
    if let Some(c) = cache {
        stats.cache += c.stats();
    }
    Ok(Recommendation { ranked, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanTriple {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "M")]
    pub m: String,
    #[serde(rename = "F")]
    pub f: AggFn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesDoc {
    pub label: String,
    pub members: Vec<String>,
    pub values: Vec<Option<f64>>,
}

/// The serialized plan table: triple, domain labels and per-series vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanTableDoc {
    pub plan: PlanTriple,
    pub domain: Vec<String>,
    pub series: Vec<SeriesDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPlanDoc {
    pub rank: usize,
    pub plan_id: usize,
    pub utility: f64,
    #[serde(flatten)]
    pub table: PlanTableDoc,
}

/// Recommendation output. Holds no timing or cache state, so identical inputs give
/// byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecommendationPayload {
    pub query_table: String,
    pub strategy: Strategy,
    pub n: usize,
    pub prune: bool,
    pub seed: u64,
    pub plan_count: usize,
    pub warnings: Vec<String>,
    pub plans: Vec<RankedPlanDoc>,
}

pub fn plan_table_doc(
    lake: &Lake,
    dim: &DimensionInfo,
    series: &SeriesCollection,
    table: &PlanTable,
) -> PlanTableDoc {
    PlanTableDoc {
        plan: PlanTriple {
            a: column_label(lake, ColumnRef::query(table.plan.a)),
            m: column_label(lake, table.plan.m),
            f: table.plan.f,
        },
        domain: dim.domain.labels(),
        series: table
            .series
            .iter()
            .zip(&series.series)
            .map(|(v, s)| SeriesDoc {
                label: v.label.clone(),
                members: s.members.iter().map(|&r| lake.qualified_name(r)).collect(),
                values: v.values.clone(),
            })
            .collect(),
    }
}

impl RecommendationPayload {
    pub fn new(prep: &Prepared, rec: &Recommendation, opts: RunOptions) -> Self {
        let plans = rec
            .ranked
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let inp = prep.input(&r.table.plan);
                RankedPlanDoc {
                    rank: i + 1,
                    plan_id: r.table.plan.plan_id,
                    utility: r.utility,
                    table: plan_table_doc(&prep.lake, inp.dim, inp.series, &r.table),
                }
            })
            .collect();
        Self {
            query_table: prep.lake.query().name.clone(),
            strategy: prep.config.strategy,
            n: opts.n,
            prune: opts.prune,
            seed: prep.config.seed,
            plan_count: prep.plans.len(),
            warnings: prep.warnings.clone(),
            plans,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("payload serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluatedPlan {
    pub utility: f64,
    #[serde(flatten)]
    pub table: PlanTableDoc,
}

/// Exactly evaluates a user-specified triple over the full data, bypassing pruning.
/// `series_override` replaces Γ(M) with explicit member groups drawn from `M ∪ C(M)`.
pub fn evaluate_plan(
    prep: &Prepared,
    a: usize,
    m: ColumnRef,
    f: AggFn,
    series_override: Option<Vec<Vec<ColumnRef>>>,
) -> Result<EvaluatedPlan> {
    let lake = &prep.lake;
    validate_triple(lake, a, m, f)?;
    let dim = prep.dims.get(&a).ok_or_else(|| {
        Error::InvalidPlan(format!(
            "dimension `{}` has no values",
            column_label(lake, ColumnRef::query(a))
        ))
    })?;
    let scfg = SeriesConfig::from(&prep.config);
    let owned;
    let series = match series_override {
        Some(groups) => {
            let allowed: Vec<ColumnRef> = if m.table == TableId::QUERY {
                std::iter::once(m)
                    .chain(lake.alignment.aligned(m.column).iter().copied())
                    .collect()
            } else {
                vec![m]
            };
            let mut seen = std::collections::HashSet::new();
            for r in groups.iter().flatten() {
                if !allowed.contains(r) {
                    return Err(Error::InvalidPlan(format!(
                        "series member `{}` is not the measure or aligned with it",
                        lake.qualified_name(*r)
                    )));
                }
                if !seen.insert(*r) {
                    return Err(Error::InvalidPlan(format!(
                        "series member `{}` repeated",
                        lake.qualified_name(*r)
                    )));
                }
            }
            if groups.is_empty() || groups.iter().any(Vec::is_empty) {
                return Err(Error::InvalidPlan(
                    "series override needs non-empty groups".into(),
                ));
            }
            owned = series_from_groups(lake, m.column, groups, &scfg)?;
            &owned
        }
        None => match prep.series.get(&m) {
            Some(s) => s,
            None => {
                owned = build_series(lake, m, prep.config.strategy, &scfg)?;
                &owned
            }
        },
    };
    let plan = VisualizationPlan {
        plan_id: usize::MAX,
        a,
        m,
        f,
    };
    let table = group_aggregate(&plan, PlanInput { lake, dim, series }, Scope::Full, None);
    Ok(EvaluatedPlan {
        utility: table.utility(),
        table: plan_table_doc(lake, dim, series, &table),
    })
}

/// Prepares and recommends in one call.
pub fn run(lake: Arc<Lake>, config: EngineConfig) -> Result<(Prepared, Recommendation)> {
    let opts = RunOptions::from_config(&config);
    let prep = Prepared::new(lake, config);
    let rec = recommend(&prep, opts)?;
    Ok((prep, rec))
}
