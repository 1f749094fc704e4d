//! Batched candidate generation with Hoeffding-Serfling pruning, and exact re-ranking.

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hashing::mix_seed;
use crate::plans::{
    group_aggregate, score_plan, AggregateCache, CacheStats, PlanInput, PlanTable, Scope,
    ScoreBuffer, VisualizationPlan,
};
use crate::table::{Lake, TableId};

/// Shuffled row partitions. Each table's rows are shuffled once; batch `b` is the `b`-th
/// contiguous slice of that order. Batch scopes read a lake laid out in shuffled order
/// (see [`Batches::lay_out`]), so every batch is a contiguous run of storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batches {
    count: usize,
    order: Vec<Vec<u32>>,
}

impl Batches {
    pub fn count(&self) -> usize {
        self.count
    }

    /// Positions of batch `b` in the laid-out table.
    pub fn range(&self, table: TableId, batch: usize) -> Range<usize> {
        let n = self.order[table.index()].len();
        batch * n / self.count..(batch + 1) * n / self.count
    }

    /// Original row ids of batch `b`.
    pub fn rows(&self, table: TableId, batch: usize) -> &[u32] {
        &self.order[table.index()][self.range(table, batch)]
    }

    /// Shuffled row order of one table.
    pub fn order(&self, table: TableId) -> &[u32] {
        &self.order[table.index()]
    }

    pub fn orders(&self) -> &[Vec<u32>] {
        &self.order
    }

    /// The lake with every table's rows in shuffled order.
    pub fn lay_out(&self, lake: &Lake) -> Lake {
        lake.with_row_order(&self.order)
    }
}

/// Shuffles each table's rows with a per-table seed and cuts them into `batch_count`
/// near-equal contiguous slices.
pub fn make_batches(lake: &Lake, batch_count: usize, seed: u64) -> Batches {
    let count = batch_count.max(1);
    let order = lake
        .tables()
        .iter()
        .map(|t| {
            let mut rows: Vec<u32> = (0..t.row_count as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xba7c, u64::from(t.id.0)]));
            rows.shuffle(&mut rng);
            rows
        })
        .collect();
    Batches { count, order }
}

/// The half-width formula itself, with natural logs. Not finite for `m < 2`.
pub fn hs_epsilon_raw(m: usize, n: usize, delta: f64) -> f64 {
    let m = m as f64;
    let n = n as f64;
    let radicand =
        (1.0 - (m - 1.0) / n) * (2.0 * m.ln().ln() + (PI * PI / (3.0 * delta)).ln()) / (2.0 * m);
    radicand.sqrt()
}

/// Interval half-width after `m` of `n` batches. Returns `+∞` for `m ≤ 2` (where
/// `ln ln m ≤ 0`) or a negative radicand, so such estimates never prune.
pub fn hs_epsilon(m: usize, n: usize, delta: f64) -> Result<f64> {
    if m > n {
        return Err(Error::Domain(format!("m = {m} exceeds N = {n}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta = {delta} outside (0, 1)")));
    }
    if m <= 2 {
        return Ok(f64::INFINITY);
    }
    let eps = hs_epsilon_raw(m, n, delta);
    Ok(if eps.is_nan() { f64::INFINITY } else { eps })
}

/// A running estimate of one plan's utility. `lower`/`upper` are in the scaled `[0, 1]`
/// units of the bound; `mean` stays in raw utility units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundedEstimate {
    pub mean: f64,
    pub m: usize,
    pub n: usize,
    pub epsilon: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BoundedEstimate {
    pub fn new(n: usize) -> Self {
        Self {
            mean: 0.0,
            m: 0,
            n,
            epsilon: f64::INFINITY,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    /// Folds in one batch score. `scale` maps raw utility into `[0, 1]`.
    pub fn update(&mut self, score: f64, scale: f64, delta: f64) -> Result<()> {
        self.m += 1;
        self.mean += (score - self.mean) / self.m as f64;
        self.epsilon = hs_epsilon(self.m, self.n, delta)?;
        let scaled = self.mean * scale;
        self.lower = scaled - self.epsilon;
        self.upper = scaled + self.epsilon;
        Ok(())
    }
}

/// One batch's heap and the lower bound used for pruning.
#[derive(Debug, Clone)]
pub struct PruneState {
    pub n_prime: usize,
    heap: Vec<(usize, BoundedEstimate)>,
    l_overall: f64,
}

impl PruneState {
    pub fn new(n_prime: usize) -> Self {
        Self {
            n_prime,
            heap: Vec::new(),
            l_overall: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Minimum lower bound over the current top-`n′` by mean (`+∞` while empty).
    pub fn l_overall(&self) -> f64 {
        self.l_overall
    }

    /// Offers a freshly updated estimate. Returns `false` when the plan is pruned.
    pub fn offer(&mut self, key: usize, est: BoundedEstimate) -> bool {
        if self.heap.len() >= self.n_prime && est.upper < self.l_overall {
            return false;
        }
        let at = self.heap.partition_point(|(k, e)| {
            e.mean.total_cmp(&est.mean).then(key.cmp(k)) == std::cmp::Ordering::Greater
        });
        self.heap.insert(at, (key, est));
        self.l_overall = self.heap[..self.heap.len().min(self.n_prime)]
            .iter()
            .map(|(_, e)| e.lower)
            .fold(f64::INFINITY, f64::min);
        true
    }

    /// Entries in descending mean order.
    pub fn entries(&self) -> &[(usize, BoundedEstimate)] {
        &self.heap
    }
}

/// Work done by one candidate-generation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PruneCounters {
    pub evaluations: usize,
    pub pruned: usize,
    pub batches: usize,
    pub early_exit: bool,
    /// Group-by reuse inside batches.
    pub cache: CacheStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub plan: VisualizationPlan,
    /// Running-mean utility estimate; `None` when the plan was not estimated.
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PruneConfig {
    pub n_prime: usize,
    pub delta: f64,
}

/// Candidate generation for the plans of one dimension column.
///
/// Each batch starts from an empty heap; plans are visited in descending running-mean
/// order (plan order in the first batch). A plan whose upper bound falls below the
/// smallest lower bound of the current top-`n′` is dropped for good. The run ends early
/// once only `n′` plans survive; otherwise the top-`n′` by running mean after the last
/// batch are returned.
pub fn candidate_generation<'a>(
    plans: &[VisualizationPlan],
    input: impl Fn(&VisualizationPlan) -> PlanInput<'a>,
    batches: &Batches,
    use_cache: bool,
    cfg: PruneConfig,
) -> Result<(Vec<Candidate>, PruneCounters)> {
    let mut counters = PruneCounters::default();
    if plans.len() <= cfg.n_prime {
        let all = plans
            .iter()
            .map(|&plan| Candidate {
                plan,
                estimate: None,
            })
            .collect();
        return Ok((all, counters));
    }
    let n = batches.count();
    let mut est: Vec<BoundedEstimate> = vec![BoundedEstimate::new(n); plans.len()];
    let mut alive: Vec<usize> = (0..plans.len()).collect();
    let mut buf = ScoreBuffer::new(use_cache);
    for b in 0..n {
        let mut state = PruneState::new(cfg.n_prime);
        if b > 0 {
            alive.sort_by(|&x, &y| est[y].mean.total_cmp(&est[x].mean).then(x.cmp(&y)));
        }
        let mut survivors = Vec::with_capacity(alive.len());
        for &i in &alive {
            let plan = &plans[i];
            let inp = input(plan);
            let score = score_plan(plan, inp, Scope::Batch { batches, index: b }, &mut buf);
            counters.evaluations += 1;
            let d = inp.dim.domain.len();
            let scale = if d > 1 { 1.0 / (d - 1) as f64 } else { 0.0 };
            est[i].update(score, scale, cfg.delta)?;
            if state.offer(i, est[i]) {
                survivors.push(i);
            } else {
                counters.pruned += 1;
            }
        }
        alive = survivors;
        counters.batches = b + 1;
        if state.len() == cfg.n_prime {
            counters.early_exit = b + 1 < n;
            break;
        }
    }
    counters.cache = buf.stats();
    let mut ranked: Vec<usize> = alive;
    ranked.sort_by(|&x, &y| est[y].mean.total_cmp(&est[x].mean).then(x.cmp(&y)));
    ranked.truncate(cfg.n_prime);
    let out = ranked
        .into_iter()
        .map(|i| Candidate {
            plan: plans[i],
            estimate: Some(est[i].mean),
        })
        .collect();
    Ok((out, counters))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedPlan {
    pub table: PlanTable,
    pub utility: f64,
}

/// Sorts exact scores descending, ties by ascending plan id, and keeps `n`.
pub fn rank_scored(mut scored: Vec<RankedPlan>, n: usize) -> Vec<RankedPlan> {
    scored.sort_by(|a, b| {
        b.utility
            .total_cmp(&a.utility)
            .then(a.table.plan.plan_id.cmp(&b.table.plan.plan_id))
    });
    scored.truncate(n);
    scored
}

/// Exact full-data utility for every candidate, then [`rank_scored`].
pub fn final_rank<'a>(
    candidates: &[VisualizationPlan],
    input: impl Fn(&VisualizationPlan) -> PlanInput<'a> + Sync,
    cache: Option<&AggregateCache>,
    n: usize,
) -> Vec<RankedPlan> {
    use rayon::prelude::*;
    let scored = candidates
        .par_iter()
        .map(|plan| {
            let table = group_aggregate(plan, input(plan), Scope::Full, cache);
            RankedPlan {
                utility: table.utility(),
                table,
            }
        })
        .collect();
    rank_scored(scored, n)
}
