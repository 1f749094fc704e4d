//! The schema view of a session: tables, columns, alignment edges and valid plan choices.

use lakechart_core::ingest::AlignmentOrigin;
use lakechart_core::pipeline::column_label;
use lakechart_core::plans::{measure_columns, validate_triple, AggFn};
use lakechart_core::{ColumnRef, DType, EngineConfig, Lake, TableId};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ColumnDoc {
    pub index: usize,
    pub header: String,
    pub dtype: DType,
    pub null_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TableDoc {
    pub id: u32,
    pub name: String,
    pub role: &'static str,
    pub row_count: usize,
    pub columns: Vec<ColumnDoc>,
}

/// One aligned pair: a query column and a result column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EdgeDoc {
    pub query_column: String,
    pub query_index: usize,
    pub table: String,
    pub column: String,
    pub column_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DroppedDoc {
    pub query_column: String,
    pub column: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasureOptions {
    #[serde(rename = "M")]
    pub m: String,
    pub functions: Vec<AggFn>,
}

/// The measures and aggregates that form a valid plan with one dimension.
#[derive(Debug, Clone, Serialize)]
pub struct DimensionOptions {
    #[serde(rename = "A")]
    pub a: String,
    pub index: usize,
    pub measures: Vec<MeasureOptions>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemaDoc {
    pub session_id: String,
    pub input_key: String,
    pub alignment_origin: AlignmentOrigin,
    pub tables: Vec<TableDoc>,
    pub alignment: Vec<EdgeDoc>,
    pub dropped: Vec<DroppedDoc>,
    pub plan_options: Vec<DimensionOptions>,
}

pub fn alignment_edges(lake: &Lake) -> Vec<EdgeDoc> {
    let mut out = Vec::new();
    for (q, targets) in lake.alignment.iter() {
        for &r in targets {
            let table = lake.table(r.table).expect("alignment validated against the lake");
            out.push(EdgeDoc {
                query_column: column_label(lake, ColumnRef::query(q)),
                query_index: q,
                table: table.name.clone(),
                column: table.columns[r.column].header.clone(),
                column_index: r.column,
            });
        }
    }
    out
}

pub fn schema_doc(
    session_id: &str,
    input_key: &str,
    lake: &Lake,
    origin: AlignmentOrigin,
    config: &EngineConfig,
) -> SchemaDoc {
    let tables = lake
        .tables()
        .iter()
        .map(|t| TableDoc {
            id: t.id.0,
            name: t.name.clone(),
            role: if t.id == TableId::QUERY { "query" } else { "result" },
            row_count: t.row_count,
            columns: t
                .columns
                .iter()
                .enumerate()
                .map(|(index, c)| ColumnDoc {
                    index,
                    header: c.header.clone(),
                    dtype: c.dtype,
                    null_count: c.null_count(),
                })
                .collect(),
        })
        .collect();
    let dropped = lake
        .alignment
        .dropped
        .iter()
        .map(|d| DroppedDoc {
            query_column: column_label(lake, ColumnRef::query(d.query_column)),
            column: lake.qualified_name(d.column),
            reason: d.reason.clone(),
        })
        .collect();
    let measures = measure_columns(lake, config.include_unaligned_measures);
    let plan_options = (0..lake.query().columns.len())
        .map(|a| DimensionOptions {
            a: column_label(lake, ColumnRef::query(a)),
            index: a,
            measures: measures
                .iter()
                .filter_map(|&m| {
                    let functions: Vec<AggFn> = AggFn::ALL
                        .into_iter()
                        .filter(|&f| validate_triple(lake, a, m, f).is_ok())
                        .collect();
                    (!functions.is_empty()).then(|| MeasureOptions {
                        m: column_label(lake, m),
                        functions,
                    })
                })
                .collect(),
        })
        .collect();
    SchemaDoc {
        session_id: session_id.to_string(),
        input_key: input_key.to_string(),
        alignment_origin: origin,
        tables,
        alignment: alignment_edges(lake),
        dropped,
        plan_options,
    }
}
