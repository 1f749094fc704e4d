//! Engine configuration. Every tunable lives here so runs are reproducible from
//! a single serialized snapshot.

use serde::{Deserialize, Serialize};

/// Thresholds used by dtype inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceThresholds {
    /// Minimum fraction of non-null cells that must parse as finite reals.
    pub numeric_ratio: f64,
    /// Distinct/non-null ratio above which a column may be textual.
    pub distinct_ratio: f64,
    /// Mean whitespace-token count above which a column may be textual.
    pub min_tokens: f64,
}

impl Default for InferenceThresholds {
    fn default() -> Self {
        Self {
            numeric_ratio: 0.95,
            distinct_ratio: 0.5,
            min_tokens: 3.0,
        }
    }
}

/// How aligned columns are grouped into series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One series per column.
    NoMerge,
    /// Union-find over syntactic relatedness.
    Overlap,
    /// Chi-square driven merging.
    Stats,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::NoMerge => "nomerge",
            Strategy::Overlap => "overlap",
            Strategy::Stats => "stats",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nomerge" | "no-merge" | "no_merge" => Ok(Strategy::NoMerge),
            "overlap" => Ok(Strategy::Overlap),
            "stats" => Ok(Strategy::Stats),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub bin_count: usize,
    pub text_dim: usize,
    pub text_kmax: usize,
    pub seed: u64,
    pub strategy: Strategy,
    /// Sample size for distribution fitting and chi-square tests.
    #[serde(rename = "W")]
    pub sample_size: usize,
    pub delta: f64,
    pub overlap_threshold: f64,
    pub n: usize,
    /// Candidates kept per query column; `None` means "same as `n`".
    pub n_prime: Option<usize>,
    pub batch_count: usize,
    pub prune: bool,
    pub include_unaligned_measures: bool,
    pub inference: InferenceThresholds,
    /// Score threshold for the fallback header/value aligner.
    pub align_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            bin_count: 10,
            text_dim: 64,
            text_kmax: 8,
            seed: 7,
            strategy: Strategy::Stats,
            sample_size: 500,
            delta: 0.05,
            overlap_threshold: 0.5,
            n: 10,
            n_prime: None,
            batch_count: 10,
            prune: true,
            include_unaligned_measures: false,
            inference: InferenceThresholds::default(),
            align_threshold: 0.3,
        }
    }
}

impl EngineConfig {
    pub fn n_prime(&self) -> usize {
        self.n_prime.unwrap_or(self.n)
    }
}
