//! Shared workloads for the benchmarks.

use std::sync::Arc;

use lakechart_core::pipeline::Prepared;
use lakechart_core::prune::{make_batches, Batches};
use lakechart_core::synth::{generate, SynthConfig};
use lakechart_core::EngineConfig;

/// Deterministic pseudo-random histogram rows, `v` series of length `d`.
pub fn series(v: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut x = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..v)
        .map(|_| {
            (0..d)
                .map(|_| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    (x >> 11) as f64 / (1u64 << 53) as f64 * 100.0
                })
                .collect()
        })
        .collect()
}

pub fn desk() -> Prepared {
    let lake = generate(&SynthConfig::desk(1)).expect("desk lake");
    Prepared::new(Arc::new(lake), EngineConfig::default())
}

/// A three-block lake with `tables` result tables of `rows` rows, and its batches.
pub fn large(tables: usize, rows: usize, batch_count: usize) -> (Prepared, Batches) {
    let lake = generate(&SynthConfig::large(0, tables, rows)).expect("large lake");
    let config = EngineConfig {
        batch_count,
        ..EngineConfig::default()
    };
    let batches = make_batches(&lake, batch_count, 11);
    (Prepared::new(Arc::new(lake), config), batches)
}
