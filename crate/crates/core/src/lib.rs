//! Core engine for recommending multi-table bar-chart visualizations over a data lake.

pub mod align;
pub mod config;
pub mod discretize;
pub mod error;
pub mod experiment;
pub mod hashing;
pub mod ingest;
pub mod pipeline;
pub mod plans;
pub mod prune;
pub mod series;
pub mod stats;
pub mod synth;
pub mod table;
pub mod utility;

pub use align::AlignmentMap;
pub use config::{EngineConfig, Strategy};
pub use error::{Error, Result};
pub use table::{Cell, ColumnRef, DType, Lake, LakeTable, TableId, TypedColumn};
