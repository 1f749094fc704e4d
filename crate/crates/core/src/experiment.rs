//! Experiment suites over synthetic lakes: strategy timing, result quality, and data
//! scale. Each run emits rows of `suite,strategy,k,seed,query_id,time_ms,avg_utility`.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, Strategy};
use crate::error::{Error, Result};
use crate::pipeline::{recommend, Prepared, Recommendation, RunOptions};
use crate::synth::{generate, SynthConfig};
use crate::table::Lake;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Time,
    Quality,
    Scale,
}

impl Suite {
    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Time => "time",
            Suite::Quality => "quality",
            Suite::Scale => "scale",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "time" => Ok(Suite::Time),
            "quality" => Ok(Suite::Quality),
            "scale" => Ok(Suite::Scale),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

/// The four compared methods: three series strategies without pruning, and chi-square
/// series with pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    NoMerge,
    Overlap,
    Stats,
    Prune,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoMerge,
        Variant::Overlap,
        Variant::Stats,
        Variant::Prune,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::NoMerge => "NoMerge",
            Variant::Overlap => "Overlap",
            Variant::Stats => "Stats",
            Variant::Prune => "Prune",
        }
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            Variant::NoMerge => Strategy::NoMerge,
            Variant::Overlap => Strategy::Overlap,
            Variant::Stats | Variant::Prune => Strategy::Stats,
        }
    }

    pub fn prunes(&self) -> bool {
        matches!(self, Variant::Prune)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub suite: String,
    pub strategy: String,
    pub k: usize,
    pub seed: u64,
    pub query_id: String,
    pub time_ms: f64,
    pub avg_utility: f64,
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub time_ms: f64,
    pub avg_utility: f64,
    pub prepared: Prepared,
    pub recommendation: Recommendation,
}

/// Prepares and recommends with `variant`, timing everything after the lake is in memory.
pub fn run_variant(lake: &Arc<Lake>, base: &EngineConfig, variant: Variant) -> Result<VariantRun> {
    let config = EngineConfig {
        strategy: variant.strategy(),
        prune: variant.prunes(),
        ..base.clone()
    };
    let opts = RunOptions::from_config(&config);
    let start = Instant::now();
    let prepared = Prepared::new(Arc::clone(lake), config);
    let recommendation = match recommend(&prepared, opts) {
        Ok(r) => r,
        Err(Error::NoValidPlans) => Recommendation {
            ranked: Vec::new(),
            stats: Default::default(),
        },
        Err(e) => return Err(e),
    };
    let time_ms = start.elapsed().as_secs_f64() * 1e3;
    let avg_utility = mean(recommendation.ranked.iter().map(|r| r.utility));
    Ok(VariantRun {
        time_ms,
        avg_utility,
        prepared,
        recommendation,
    })
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Declarative sweep: lake template, engine settings and the swept values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub lake: SynthConfig,
    pub engine: EngineConfig,
    /// Result-table counts for the time and quality suites.
    pub ks: Vec<usize>,
    pub seeds: u64,
    /// Row fractions for the scale suite.
    pub fractions: Vec<f64>,
    pub variants: Vec<Variant>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            lake: SynthConfig::desk(0),
            engine: EngineConfig::default(),
            ks: vec![10, 20, 30, 40, 50],
            seeds: 5,
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            variants: Variant::ALL.to_vec(),
        }
    }
}

fn lake_for(cfg: &SuiteConfig, k: usize, seed: u64) -> Result<Arc<Lake>> {
    let lake = SynthConfig {
        tables: k,
        seed,
        ..cfg.lake.clone()
    };
    Ok(Arc::new(generate(&lake)?))
}

/// Runs one suite. Quality runs are independent and go in parallel; timed suites run
/// sequentially so measurements do not compete for cores.
pub fn run_suite(suite: Suite, cfg: &SuiteConfig) -> Result<Vec<BenchRow>> {
    let row =
        |variant: Variant, k: usize, seed: u64, query_id: String, run: &VariantRun| BenchRow {
            suite: suite.as_str().into(),
            strategy: variant.name().into(),
            k,
            seed,
            query_id,
            time_ms: run.time_ms,
            avg_utility: run.avg_utility,
        };
    let jobs: Vec<(usize, u64)> = cfg
        .ks
        .iter()
        .flat_map(|&k| (0..cfg.seeds).map(move |s| (k, s)))
        .collect();
    match suite {
        Suite::Time | Suite::Quality => {
            let one = |&(k, seed): &(usize, u64)| -> Result<Vec<BenchRow>> {
                let lake = lake_for(cfg, k, seed)?;
                let qid = format!("{}_k{k}_s{seed}", lake.query().name);
                cfg.variants
                    .iter()
                    .map(|&v| {
                        Ok(row(
                            v,
                            k,
                            seed,
                            qid.clone(),
                            &run_variant(&lake, &cfg.engine, v)?,
                        ))
                    })
                    .collect()
            };
            let nested: Vec<Vec<BenchRow>> = if suite == Suite::Quality {
                jobs.par_iter().map(one).collect::<Result<_>>()?
            } else {
                jobs.iter().map(one).collect::<Result<_>>()?
            };
            Ok(nested.into_iter().flatten().collect())
        }
        Suite::Scale => {
            let mut out = Vec::new();
            for &(k, seed) in &jobs {
                let full = lake_for(cfg, k, seed)?;
                for &f in &cfg.fractions {
                    let lake = Arc::new(full.scaled(f));
                    let qid = format!("{}_frac{f:.2}", lake.query().name);
                    for &v in &cfg.variants {
                        out.push(row(
                            v,
                            k,
                            seed,
                            qid.clone(),
                            &run_variant(&lake, &cfg.engine, v)?,
                        ));
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

/// Mean of `time_ms` or `avg_utility` per strategy.
pub fn summarize(rows: &[BenchRow], pick: fn(&BenchRow) -> f64) -> Vec<(String, f64)> {
    let mut names: Vec<String> = Vec::new();
    for r in rows {
        if !names.contains(&r.strategy) {
            names.push(r.strategy.clone());
        }
    }
    names
        .into_iter()
        .map(|n| {
            let m = mean(rows.iter().filter(|r| r.strategy == n).map(pick));
            (n, m)
        })
        .collect()
}
