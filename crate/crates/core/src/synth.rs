//! Seeded synthetic lakes.
//!
//! Result tables are drawn from `groups` latent populations (the query table belongs to
//! group 0). Numeric columns shift their mean by group and can respond to the first
//! categorical column with a slope whose sign alternates between groups, so the best
//! plans are the ones whose series separate the groups.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::align::AlignmentMap;
use crate::error::{Error, Result};
use crate::hashing::mix_seed;
use crate::ingest::save_table;
use crate::stats::normal_quantile;
use crate::table::{ColumnRef, Lake, LakeTable, TableId, TypedColumn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericFamily {
    Normal,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnSpec {
    Categorical {
        name: String,
        categories: usize,
        /// Weight tilt towards low category indices, growing with the group index.
        #[serde(default)]
        skew: f64,
    },
    Numeric {
        name: String,
        #[serde(default = "default_family")]
        family: NumericFamily,
        mean: f64,
        sd: f64,
        /// Added to the mean once per group index.
        #[serde(default)]
        group_shift: f64,
        /// Slope over the driver category index; negated in odd groups.
        #[serde(default)]
        effect: f64,
    },
    /// Two-level numeric column: a cell is drawn around `high` with probability
    /// `(1 + contrast) / 2` when the driver category is in its upper half, otherwise
    /// around `low`. Cells sit at or above their level, spread by a half-normal with
    /// scale `sd`. With `flip` the halves swap in odd groups.
    Switch {
        name: String,
        low: f64,
        high: f64,
        sd: f64,
        contrast: f64,
        #[serde(default)]
        flip: bool,
        /// Categorical column that drives the level; the first categorical by default.
        #[serde(default)]
        driver: Option<String>,
    },
    Text {
        name: String,
        vocabulary: usize,
        words: usize,
    },
}

fn default_family() -> NumericFamily {
    NumericFamily::Normal
}

impl ColumnSpec {
    pub fn name(&self) -> &str {
        match self {
            ColumnSpec::Categorical { name, .. }
            | ColumnSpec::Numeric { name, .. }
            | ColumnSpec::Switch { name, .. }
            | ColumnSpec::Text { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of result tables (k).
    pub tables: usize,
    /// Query table rows; result tables vary around this by `row_jitter`.
    pub rows: usize,
    pub row_jitter: f64,
    pub groups: usize,
    /// Probability that an alignment edge is left out.
    pub alignment_drop: f64,
    pub null_rate: f64,
    /// Shuffle column order inside result tables.
    pub shuffle_columns: bool,
    pub columns: Vec<ColumnSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SynthConfig {
    /// Small lake: 5 result tables, up to 200 rows, 7 columns.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            tables: 5,
            rows: 200,
            row_jitter: 0.4,
            groups: 2,
            alignment_drop: 0.1,
            null_rate: 0.02,
            shuffle_columns: true,
            columns: vec![
                ColumnSpec::Categorical {
                    name: "region".into(),
                    categories: 6,
                    skew: 0.0,
                },
                ColumnSpec::Categorical {
                    name: "segment".into(),
                    categories: 3,
                    skew: 0.8,
                },
                ColumnSpec::Numeric {
                    name: "revenue".into(),
                    family: NumericFamily::Normal,
                    mean: 100.0,
                    sd: 12.0,
                    group_shift: 60.0,
                    effect: 8.0,
                },
                ColumnSpec::Numeric {
                    name: "cost".into(),
                    family: NumericFamily::Normal,
                    mean: 50.0,
                    sd: 10.0,
                    group_shift: 0.0,
                    effect: 0.0,
                },
                ColumnSpec::Numeric {
                    name: "wait".into(),
                    family: NumericFamily::Exponential,
                    mean: 4.0,
                    sd: 0.0,
                    group_shift: 6.0,
                    effect: 0.5,
                },
                ColumnSpec::Numeric {
                    name: "score".into(),
                    family: NumericFamily::Normal,
                    mean: 0.0,
                    sd: 1.0,
                    group_shift: 0.0,
                    effect: 0.6,
                },
                ColumnSpec::Text {
                    name: "comment".into(),
                    vocabulary: 30,
                    words: 6,
                },
            ],
        }
    }

    /// Large lake for timing. Each of three blocks has a binary driver and ten two-level
    /// measures whose level follows the driver, half of them with the relation reversed in
    /// odd groups. Aggregating those reversed measures separates the series sharply.
    pub fn large(seed: u64, tables: usize, rows: usize) -> Self {
        let mut columns = Vec::new();
        for b in 0..3 {
            let driver = format!("region_{b}");
            columns.push(ColumnSpec::Categorical {
                name: driver.clone(),
                categories: 2,
                skew: 0.0,
            });
            for i in 0..10 {
                columns.push(ColumnSpec::Switch {
                    name: format!("level_{b}_{i}"),
                    low: 10.0,
                    high: 100.0,
                    sd: 3.0,
                    contrast: 0.95,
                    flip: i % 2 == 1,
                    driver: Some(driver.clone()),
                });
            }
        }
        Self {
            seed,
            tables,
            rows,
            row_jitter: 0.0,
            groups: 2,
            alignment_drop: 0.0,
            null_rate: 0.0,
            shuffle_columns: false,
            columns,
        }
    }
}

fn categorical_weights(categories: usize, skew: f64, group: usize) -> Vec<f64> {
    let tilt = skew * group as f64;
    (0..categories)
        .map(|c| (-tilt * c as f64 / categories.max(1) as f64 * 3.0).exp())
        .collect()
}

fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn word(i: usize) -> String {
    const SYLLABLES: [&str; 10] = ["ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "ze", "po"];
    let mut s = String::new();
    let mut x = i;
    loop {
        s.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
        if x == 0 {
            break;
        }
    }
    s
}

fn build_table(
    cfg: &SynthConfig,
    name: &str,
    rows: usize,
    group: usize,
    seed: u64,
) -> Result<LakeTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let driver_categories = cfg.columns.iter().find_map(|c| match c {
        ColumnSpec::Categorical { categories, .. } => Some(*categories),
        _ => None,
    });
    let mut driver: Option<Vec<usize>> = None;
    let mut drivers: Vec<(&str, usize, Vec<usize>)> = Vec::new();
    let mut columns = Vec::with_capacity(cfg.columns.len());
    let null = |rng: &mut ChaCha8Rng| cfg.null_rate > 0.0 && rng.random::<f64>() < cfg.null_rate;
    for spec in &cfg.columns {
        let col = match spec {
            ColumnSpec::Categorical {
                name,
                categories,
                skew,
            } => {
                let w = categorical_weights(*categories, *skew, group);
                let idx: Vec<usize> = (0..rows).map(|_| pick_weighted(&mut rng, &w)).collect();
                let cells: Vec<Option<String>> = idx
                    .iter()
                    .map(|&i| (!null(&mut rng)).then(|| format!("{name}_{i:02}")))
                    .collect();
                if driver.is_none() {
                    driver = Some(idx.clone());
                }
                drivers.push((name, *categories, idx));
                TypedColumn::categorical(name.clone(), &cells)
            }
            ColumnSpec::Numeric {
                name,
                family,
                mean,
                sd,
                group_shift,
                effect,
            } => {
                let centre = (driver_categories.unwrap_or(1) as f64 - 1.0) / 2.0;
                let sign = if group % 2 == 0 { 1.0 } else { -1.0 };
                let values = (0..rows)
                    .map(|r| {
                        let d = driver.as_ref().map_or(0.0, |v| v[r] as f64 - centre);
                        let mu = mean + group_shift * group as f64 + sign * effect * d;
                        let x = match family {
                            NumericFamily::Normal => Normal::new(mu, sd.max(0.0))
                                .map_err(|e| Error::Domain(e.to_string()))?
                                .sample(&mut rng),
                            NumericFamily::Exponential => {
                                let m = mu.max(1e-3);
                                Exp::new(1.0 / m)
                                    .map_err(|e| Error::Domain(e.to_string()))?
                                    .sample(&mut rng)
                            }
                        };
                        Ok((!null(&mut rng)).then_some(x))
                    })
                    .collect::<Result<Vec<_>>>()?;
                TypedColumn::numerical(name.clone(), values)?
            }
            ColumnSpec::Switch {
                name,
                low,
                high,
                sd,
                contrast,
                flip,
                driver: by,
            } => {
                let (categories, idx) = match by {
                    Some(by) => drivers
                        .iter()
                        .find(|(n, _, _)| n == by)
                        .map(|(_, c, v)| (*c, Some(v)))
                        .ok_or_else(|| {
                            Error::Schema(format!("`{name}`: unknown driver column `{by}`"))
                        })?,
                    None => (driver_categories.unwrap_or(2), driver.as_ref()),
                };
                let half = categories as f64 / 2.0;
                let swap = *flip && group % 2 == 1;
                let noise =
                    Normal::new(0.0, sd.max(0.0)).map_err(|e| Error::Domain(e.to_string()))?;
                let values = (0..rows)
                    .map(|r| {
                        let upper = idx.is_some_and(|v| v[r] as f64 >= half) != swap;
                        let p_high = if upper {
                            (1.0 + contrast) / 2.0
                        } else {
                            (1.0 - contrast) / 2.0
                        };
                        let level = if rng.random::<f64>() < p_high {
                            *high
                        } else {
                            *low
                        };
                        let x = level + noise.sample(&mut rng).abs();
                        (!null(&mut rng)).then_some(x)
                    })
                    .collect();
                TypedColumn::numerical(name.clone(), values)?
            }
            ColumnSpec::Text {
                name,
                vocabulary,
                words,
            } => {
                let cells: Vec<Option<String>> = (0..rows)
                    .map(|r| {
                        if null(&mut rng) {
                            return None;
                        }
                        // vocabulary is split by group so clusters follow the population
                        let offset = (group * vocabulary / 2 + driver.as_ref().map_or(0, |v| v[r]))
                            % vocabulary.max(&1);
                        let n = words.max(&1) + rng.random_range(0..3);
                        Some(
                            (0..n)
                                .map(|_| {
                                    word(
                                        (offset + rng.random_range(0..vocabulary.max(&2) / 2))
                                            % vocabulary.max(&1),
                                    )
                                })
                                .collect::<Vec<_>>()
                                .join(" "),
                        )
                    })
                    .collect();
                TypedColumn::textual(name.clone(), &cells)
            }
        };
        columns.push(col);
    }
    LakeTable::new(TableId(0), name, columns)
}

/// Generates the lake with its ground-truth alignment.
pub fn generate(cfg: &SynthConfig) -> Result<Lake> {
    if cfg.columns.is_empty() {
        return Err(Error::Schema(
            "synthetic lake needs at least one column".into(),
        ));
    }
    let groups = cfg.groups.max(1);
    let query = build_table(cfg, "query", cfg.rows.max(1), 0, mix_seed(&[cfg.seed, 0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xa11]));
    let mut results = Vec::with_capacity(cfg.tables);
    let mut orders = Vec::with_capacity(cfg.tables);
    for t in 0..cfg.tables {
        let group = (t + 1) % groups;
        let jitter = if cfg.row_jitter > 0.0 {
            rng.random_range(-cfg.row_jitter..=cfg.row_jitter)
        } else {
            0.0
        };
        let rows = ((cfg.rows as f64) * (1.0 + jitter)).round().max(1.0) as usize;
        let mut table = build_table(
            cfg,
            &format!("result_{t:02}"),
            rows,
            group,
            mix_seed(&[cfg.seed, t as u64 + 1]),
        )?;
        let mut order: Vec<usize> = (0..table.columns.len()).collect();
        if cfg.shuffle_columns {
            order.shuffle(&mut rng);
            let cols = std::mem::take(&mut table.columns);
            let mut slots: Vec<Option<TypedColumn>> = cols.into_iter().map(Some).collect();
            table.columns = order
                .iter()
                .map(|&i| slots[i].take().expect("permutation"))
                .collect();
        }
        orders.push(order);
        results.push(table);
    }
    let mut map = AlignmentMap::default();
    for (t, order) in orders.iter().enumerate() {
        for (pos, &src) in order.iter().enumerate() {
            if cfg.alignment_drop > 0.0 && rng.random::<f64>() < cfg.alignment_drop {
                continue;
            }
            map.insert(src, ColumnRef::new(TableId(t as u32 + 1), pos))?;
        }
    }
    Lake::new(query, results, map)
}

/// Paths of a lake written to disk.
#[derive(Debug, Clone)]
pub struct WrittenLake {
    pub query: PathBuf,
    pub results: Vec<PathBuf>,
    pub alignment: PathBuf,
}

impl WrittenLake {
    /// The written files as a load source; the result directory is listed, not the files.
    pub fn source(&self) -> crate::ingest::LakeSource {
        let dir = self
            .results
            .first()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf);
        crate::ingest::LakeSource {
            query: self.query.clone(),
            results: dir.into_iter().collect(),
            alignment: Some(self.alignment.clone()),
        }
    }
}

/// Writes every table as `<name>.csv` and the alignment as `alignment.json`. The query
/// table goes to `dir/query/`, result tables to `dir/results/`.
pub fn write_lake(lake: &Lake, dir: &Path) -> Result<WrittenLake> {
    let qdir = dir.join("query");
    let rdir = dir.join("results");
    for d in [&qdir, &rdir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let query = qdir.join(format!("{}.csv", lake.query().name));
    save_table(lake.query(), &query)?;
    let mut results = Vec::new();
    for t in lake.results() {
        let p = rdir.join(format!("{}.csv", t.name));
        save_table(t, &p)?;
        results.push(p);
    }
    let alignment = dir.join("alignment.json");
    let doc = lake.alignment.to_document(lake);
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&alignment, text).map_err(|e| Error::io(&alignment, e))?;
    Ok(WrittenLake {
        query,
        results,
        alignment,
    })
}

/// City names in lexicographic order, so the categorical domain keeps this order.
pub const SALARY_CITIES: [&str; 6] = [
    "Austin", "Boston", "Chicago", "Denver", "Houston", "Seattle",
];
/// Per-city mean salary of the pay-like columns.
pub const PAY_MEANS: [f64; 6] = [60009.24, 56940.46, 52323.85, 60146.35, 55112.33, 56197.89];
/// Per-city mean of the tuition-like columns.
pub const TUITION_MEANS: [f64; 6] = [79794.62, 30446.72, 39829.39, 62852.72, 69914.3, 40512.97];

fn city_table(
    name: &str,
    city_header: &str,
    value_header: &str,
    rows: usize,
    means: &[f64; 6],
    sd: f64,
) -> LakeTable {
    let per_city = rows / SALARY_CITIES.len();
    let mut cities = Vec::with_capacity(per_city * 6);
    let mut values = Vec::with_capacity(per_city * 6);
    // rows interleave the cities; each city's values are symmetric normal quantiles
    // around its mean, so the group mean is exact
    for i in 0..per_city {
        let z = normal_quantile((i as f64 + 0.5) / per_city as f64, 0.0, 1.0);
        for (c, city) in SALARY_CITIES.iter().enumerate() {
            cities.push(Some(*city));
            values.push(Some(means[c] + sd * z));
        }
    }
    LakeTable::new(
        TableId(0),
        name,
        vec![
            TypedColumn::categorical(city_header, &cities),
            TypedColumn::numerical(value_header, values).expect("finite values"),
        ],
    )
    .expect("equal column lengths")
}

/// A query table `salaries(City, Salary)` with three pay-like and two tuition-like result
/// tables. Group means per city are [`PAY_MEANS`] and [`TUITION_MEANS`]; cardinalities
/// are chosen so chi-square merging separates pay from tuition.
pub fn salary_fixture() -> Lake {
    let query = city_table("salaries", "City", "Salary", 102, &PAY_MEANS, 8000.0);
    let results = vec![
        city_table("pay_1", "City", "Salary", 120, &PAY_MEANS, 8000.0),
        city_table("pay_2", "Location", "Pay", 300, &PAY_MEANS, 8000.0),
        city_table("pay_3", "city", "Total_comp", 1002, &PAY_MEANS, 8000.0),
        city_table("tuition_1", "City", "Tuition", 54, &TUITION_MEANS, 12000.0),
        city_table("tuition_2", "City", "Tuition", 60, &TUITION_MEANS, 12000.0),
    ];
    let mut map = AlignmentMap::default();
    for t in 1..=5u32 {
        map.insert(0, ColumnRef::new(TableId(t), 0))
            .expect("one match per table");
        map.insert(1, ColumnRef::new(TableId(t), 1))
            .expect("one match per table");
    }
    Lake::new(query, results, map).expect("fixture is consistent")
}
