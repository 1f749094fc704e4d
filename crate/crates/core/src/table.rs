//! In-memory table model shared by every stage of the engine.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::align::AlignmentMap;
use crate::error::{Error, Result};

/// Session-local table identifier. The query table is always `TableId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TableId(pub u32);

impl TableId {
    pub const QUERY: TableId = TableId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// A column addressed by owning table and position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: TableId,
    pub column: usize,
}

impl ColumnRef {
    pub fn new(table: TableId, column: usize) -> Self {
        Self { table, column }
    }

    pub fn query(column: usize) -> Self {
        Self::new(TableId::QUERY, column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Categorical,
    Numerical,
    Textual,
}

impl DType {
    pub fn as_str(&self) -> &'static str {
        match self {
            DType::Categorical => "categorical",
            DType::Numerical => "numerical",
            DType::Textual => "textual",
        }
    }
}

/// A single cell value as seen by callers.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell<'a> {
    Null,
    Number(f64),
    Text(&'a str),
}

/// Column storage. Categorical and textual columns share the string layout.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Numbers(Vec<Option<f64>>),
    Strings(Vec<Option<Arc<str>>>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Numbers(v) => v.len(),
            ColumnValues::Strings(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedColumn {
    pub header: String,
    pub dtype: DType,
    values: ColumnValues,
    null_count: usize,
}

impl TypedColumn {
    /// Builds a column, checking that numerical columns hold numbers.
    pub fn new(header: impl Into<String>, dtype: DType, values: ColumnValues) -> Result<Self> {
        let header = header.into();
        let null_count = match (&values, dtype) {
            (ColumnValues::Numbers(v), DType::Numerical) => {
                if v.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::Schema(format!(
                        "numerical column `{header}` holds a non-finite value"
                    )));
                }
                v.iter().filter(|x| x.is_none()).count()
            }
            (ColumnValues::Strings(v), DType::Categorical | DType::Textual) => {
                v.iter().filter(|x| x.is_none()).count()
            }
            _ => {
                return Err(Error::Schema(format!(
                    "column `{header}` storage does not match dtype {dtype:?}"
                )))
            }
        };
        Ok(Self {
            header,
            dtype,
            values,
            null_count,
        })
    }

    pub fn numerical(header: impl Into<String>, values: Vec<Option<f64>>) -> Result<Self> {
        Self::new(header, DType::Numerical, ColumnValues::Numbers(values))
    }

    pub fn categorical<S: AsRef<str>>(header: impl Into<String>, values: &[Option<S>]) -> Self {
        let values = values
            .iter()
            .map(|v| v.as_ref().map(|s| Arc::<str>::from(s.as_ref())))
            .collect();
        Self::new(header, DType::Categorical, ColumnValues::Strings(values))
            .expect("string storage matches categorical dtype")
    }

    pub fn textual<S: AsRef<str>>(header: impl Into<String>, values: &[Option<S>]) -> Self {
        let values = values
            .iter()
            .map(|v| v.as_ref().map(|s| Arc::<str>::from(s.as_ref())))
            .collect();
        Self::new(header, DType::Textual, ColumnValues::Strings(values))
            .expect("string storage matches textual dtype")
    }

    pub fn values(&self) -> &ColumnValues {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn null_count(&self) -> usize {
        self.null_count
    }

    /// Number of non-null cells; this is the column's cardinality for series ordering.
    pub fn non_null(&self) -> usize {
        self.len() - self.null_count
    }

    pub fn cell(&self, row: usize) -> Cell<'_> {
        match &self.values {
            ColumnValues::Numbers(v) => v[row].map_or(Cell::Null, Cell::Number),
            ColumnValues::Strings(v) => v[row].as_deref().map_or(Cell::Null, Cell::Text),
        }
    }

    pub fn numbers(&self) -> Option<&[Option<f64>]> {
        match &self.values {
            ColumnValues::Numbers(v) => Some(v),
            ColumnValues::Strings(_) => None,
        }
    }

    pub fn strings(&self) -> Option<&[Option<Arc<str>>]> {
        match &self.values {
            ColumnValues::Strings(v) => Some(v),
            ColumnValues::Numbers(_) => None,
        }
    }

    /// Row indices of non-null cells.
    pub fn non_null_rows(&self) -> Vec<u32> {
        match &self.values {
            ColumnValues::Numbers(v) => (0..v.len() as u32)
                .filter(|&i| v[i as usize].is_some())
                .collect(),
            ColumnValues::Strings(v) => (0..v.len() as u32)
                .filter(|&i| v[i as usize].is_some())
                .collect(),
        }
    }

    /// Cells at `rows`, in that order.
    pub fn take(&self, rows: &[u32]) -> Self {
        let values = match &self.values {
            ColumnValues::Numbers(v) => {
                ColumnValues::Numbers(rows.iter().map(|&r| v[r as usize]).collect())
            }
            ColumnValues::Strings(v) => {
                ColumnValues::Strings(rows.iter().map(|&r| v[r as usize].clone()).collect())
            }
        };
        Self {
            header: self.header.clone(),
            dtype: self.dtype,
            values,
            null_count: self.null_count,
        }
    }

    /// Keeps only the first `rows` cells.
    pub fn truncated(&self, rows: usize) -> Self {
        let values = match &self.values {
            ColumnValues::Numbers(v) => ColumnValues::Numbers(v[..rows.min(v.len())].to_vec()),
            ColumnValues::Strings(v) => ColumnValues::Strings(v[..rows.min(v.len())].to_vec()),
        };
        Self::new(self.header.clone(), self.dtype, values).expect("same storage as source")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LakeTable {
    pub id: TableId,
    pub name: String,
    pub columns: Vec<TypedColumn>,
    pub row_count: usize,
}

impl LakeTable {
    pub fn new(id: TableId, name: impl Into<String>, columns: Vec<TypedColumn>) -> Result<Self> {
        let name = name.into();
        let row_count = columns.first().map_or(0, TypedColumn::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != row_count) {
            return Err(Error::Schema(format!(
                "table `{name}`: column `{}` has {} cells, expected {row_count}",
                bad.header,
                bad.len()
            )));
        }
        Ok(Self {
            id,
            name,
            columns,
            row_count,
        })
    }

    pub fn column(&self, index: usize) -> Option<&TypedColumn> {
        self.columns.get(index)
    }

    /// Finds a column by exact header, falling back to a case-insensitive match.
    pub fn column_index(&self, header: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.header == header)
            .or_else(|| {
                self.columns
                    .iter()
                    .position(|c| c.header.eq_ignore_ascii_case(header))
            })
    }

    /// Keeps the first `fraction` of rows (rounded up).
    pub fn sampled_prefix(&self, fraction: f64) -> Self {
        let rows = ((self.row_count as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
        Self {
            id: self.id,
            name: self.name.clone(),
            columns: self.columns.iter().map(|c| c.truncated(rows)).collect(),
            row_count: rows.min(self.row_count),
        }
    }
}

/// A query table, its result tables and the column alignment between them.
///
/// Tables are immutable once the lake is assembled and are shared through `Arc`,
/// so a lake can be read from many threads at once.
#[derive(Debug, Clone)]
pub struct Lake {
    tables: Vec<Arc<LakeTable>>,
    pub alignment: AlignmentMap,
}

impl Lake {
    /// Assembles a lake, assigning `TableId(0)` to the query table and `1..=k` to results.
    pub fn new(query: LakeTable, results: Vec<LakeTable>, alignment: AlignmentMap) -> Result<Self> {
        let mut tables = Vec::with_capacity(results.len() + 1);
        for (i, mut t) in std::iter::once(query).chain(results).enumerate() {
            t.id = TableId(i as u32);
            tables.push(Arc::new(t));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tables {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Schema(format!("duplicate table name `{}`", t.name)));
            }
        }
        let lake = Self { tables, alignment };
        lake.alignment.validate(&lake)?;
        Ok(lake)
    }

    /// Builds a lake without alignment, to be filled in by an aligner.
    pub fn unaligned(query: LakeTable, results: Vec<LakeTable>) -> Result<Self> {
        Self::new(query, results, AlignmentMap::default())
    }

    pub fn with_alignment(mut self, alignment: AlignmentMap) -> Result<Self> {
        alignment.validate(&self)?;
        self.alignment = alignment;
        Ok(self)
    }

    pub fn query(&self) -> &LakeTable {
        &self.tables[0]
    }

    pub fn results(&self) -> &[Arc<LakeTable>] {
        &self.tables[1..]
    }

    pub fn tables(&self) -> &[Arc<LakeTable>] {
        &self.tables
    }

    pub fn table(&self, id: TableId) -> Option<&LakeTable> {
        self.tables.get(id.index()).map(Arc::as_ref)
    }

    pub fn table_by_name(&self, name: &str) -> Option<&LakeTable> {
        self.tables.iter().map(Arc::as_ref).find(|t| t.name == name)
    }

    pub fn column(&self, r: ColumnRef) -> Option<&TypedColumn> {
        self.table(r.table).and_then(|t| t.column(r.column))
    }

    /// Panicking accessor for references already validated against this lake.
    pub fn col(&self, r: ColumnRef) -> &TypedColumn {
        self.column(r)
            .unwrap_or_else(|| panic!("dangling column reference {r:?}"))
    }

    /// `table.header` for display.
    pub fn qualified_name(&self, r: ColumnRef) -> String {
        match self.table(r.table) {
            Some(t) => match t.column(r.column) {
                Some(c) if !c.header.is_empty() => format!("{}.{}", t.name, c.header),
                _ => format!("{}.#{}", t.name, r.column),
            },
            None => format!("{r:?}"),
        }
    }

    /// Returns a copy of the lake keeping the first `fraction` of each table's rows.
    pub fn scaled(&self, fraction: f64) -> Self {
        Self {
            tables: self
                .tables
                .iter()
                .map(|t| Arc::new(t.sampled_prefix(fraction)))
                .collect(),
            alignment: self.alignment.clone(),
        }
    }

    /// Returns a copy with table `t`'s rows reordered to `orders[t]`, a permutation.
    pub fn with_row_order(&self, orders: &[Vec<u32>]) -> Self {
        Self {
            tables: self
                .tables
                .iter()
                .zip(orders)
                .map(|(t, order)| {
                    debug_assert_eq!(order.len(), t.row_count);
                    Arc::new(LakeTable {
                        id: t.id,
                        name: t.name.clone(),
                        columns: t.columns.iter().map(|c| c.take(order)).collect(),
                        row_count: t.row_count,
                    })
                })
                .collect(),
            alignment: self.alignment.clone(),
        }
    }

    pub fn total_rows(&self) -> usize {
        self.tables.iter().map(|t| t.row_count).sum()
    }
}
