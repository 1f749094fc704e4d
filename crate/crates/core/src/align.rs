//! Column alignment between the query table and result tables.
//!
//! Alignments normally come from an external discovery engine as a JSON document.
//! [`baseline_align`] is a simple header/value matcher for when none is available; it
//! is plumbing, not a discovery method.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{fnv1a, tokens};
use crate::table::{Cell, ColumnRef, Lake, LakeTable, TableId, TypedColumn};

/// A table or column addressed by name or by position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Key {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDoc {
    pub table: Key,
    pub column: Key,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntryDoc {
    pub query_column: Key,
    pub matches: Vec<MatchDoc>,
}

/// On-disk alignment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDoc {
    pub query_table: Key,
    pub alignments: Vec<AlignmentEntryDoc>,
}

/// An aligned pair discarded because the two columns have different dtypes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedPair {
    pub query_column: usize,
    pub column: ColumnRef,
    pub reason: String,
}

/// For each query column, its aligned result columns (at most one per result table).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentMap {
    entries: BTreeMap<usize, Vec<ColumnRef>>,
    pub dropped: Vec<DroppedPair>,
}

impl AlignmentMap {
    /// Adds a match, rejecting a second match from the same table.
    pub fn insert(&mut self, query_column: usize, target: ColumnRef) -> Result<()> {
        let list = self.entries.entry(query_column).or_default();
        if list.iter().any(|r| r.table == target.table) {
            return Err(Error::DuplicateAlignment {
                query_column: format!("#{query_column}"),
                table: target.table.to_string(),
            });
        }
        list.push(target);
        list.sort();
        Ok(())
    }

    /// C(q): aligned result columns for query column `q`, ordered by table id.
    pub fn aligned(&self, query_column: usize) -> &[ColumnRef] {
        self.entries
            .get(&query_column)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The column of `table` aligned with query column `q`. The query table maps to itself.
    pub fn column_in(&self, query_column: usize, table: TableId) -> Option<usize> {
        if table == TableId::QUERY {
            return Some(query_column);
        }
        self.aligned(query_column)
            .iter()
            .find(|r| r.table == table)
            .map(|r| r.column)
    }

    /// Query column aligned with `target`, if any.
    pub fn query_column_of(&self, target: ColumnRef) -> Option<usize> {
        if target.table == TableId::QUERY {
            return Some(target.column);
        }
        self.entries
            .iter()
            .find(|(_, v)| v.contains(&target))
            .map(|(q, _)| *q)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[ColumnRef])> {
        self.entries.iter().map(|(q, v)| (*q, v.as_slice()))
    }

    pub fn edge_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_count() == 0
    }

    /// Checks references, the one-per-table rule and dtype agreement.
    pub fn validate(&self, lake: &Lake) -> Result<()> {
        let query = lake.query();
        for (&q, targets) in &self.entries {
            let qc = query
                .column(q)
                .ok_or_else(|| Error::Schema(format!("query table has no column #{q}")))?;
            let mut tables = HashSet::new();
            for r in targets {
                if r.table == TableId::QUERY {
                    return Err(Error::Schema(format!(
                        "query column #{q} aligned to a query-table column"
                    )));
                }
                let t = lake
                    .table(r.table)
                    .ok_or_else(|| Error::Schema(format!("unknown table {}", r.table)))?;
                let c = t.column(r.column).ok_or_else(|| {
                    Error::Schema(format!("table `{}` has no column #{}", t.name, r.column))
                })?;
                if !tables.insert(r.table) {
                    return Err(Error::DuplicateAlignment {
                        query_column: qc.header.clone(),
                        table: t.name.clone(),
                    });
                }
                if c.dtype != qc.dtype {
                    return Err(Error::Schema(format!(
                        "`{}` ({:?}) aligned to `{}.{}` ({:?})",
                        qc.header, qc.dtype, t.name, c.header, c.dtype
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serializes to the on-disk document, naming tables and columns by header.
    pub fn to_document(&self, lake: &Lake) -> AlignmentDoc {
        let query = lake.query();
        let key = |t: &LakeTable, c: usize| match t.column(c) {
            Some(col) if !col.header.is_empty() => Key::Name(col.header.clone()),
            _ => Key::Index(c),
        };
        AlignmentDoc {
            query_table: Key::Name(query.name.clone()),
            alignments: self
                .entries
                .iter()
                .map(|(&q, targets)| AlignmentEntryDoc {
                    query_column: key(query, q),
                    matches: targets
                        .iter()
                        .map(|r| {
                            let t = lake.table(r.table).expect("validated alignment");
                            MatchDoc {
                                table: Key::Name(t.name.clone()),
                                column: key(t, r.column),
                            }
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

fn resolve_table<'a>(lake: &'a Lake, key: &Key) -> Result<&'a LakeTable> {
    match key {
        Key::Name(name) => lake
            .table_by_name(name)
            .ok_or_else(|| Error::Schema(format!("unknown table `{name}`"))),
        Key::Index(i) => lake
            .table(TableId(*i as u32))
            .ok_or_else(|| Error::Schema(format!("unknown table #{i}"))),
    }
}

fn resolve_column(table: &LakeTable, key: &Key) -> Result<usize> {
    match key {
        Key::Name(name) => table
            .column_index(name)
            .ok_or_else(|| Error::Schema(format!("table `{}` has no column `{name}`", table.name))),
        Key::Index(i) if *i < table.columns.len() => Ok(*i),
        Key::Index(i) => Err(Error::Schema(format!(
            "table `{}` has no column #{i}",
            table.name
        ))),
    }
}

/// Resolves an alignment document against loaded tables.
///
/// Pairs whose dtypes disagree are dropped and listed in [`AlignmentMap::dropped`].
pub fn resolve_alignment(doc: &AlignmentDoc, lake: &Lake) -> Result<AlignmentMap> {
    let query_table = resolve_table(lake, &doc.query_table)?;
    if query_table.id != TableId::QUERY {
        return Err(Error::Schema(format!(
            "alignment names `{}` as the query table, but the session query is `{}`",
            query_table.name,
            lake.query().name
        )));
    }
    let query = lake.query();
    let mut map = AlignmentMap::default();
    for entry in &doc.alignments {
        let q = resolve_column(query, &entry.query_column)?;
        let q_dtype = query.columns[q].dtype;
        let mut seen = BTreeSet::new();
        for m in &entry.matches {
            let table = resolve_table(lake, &m.table)?;
            if table.id == TableId::QUERY {
                return Err(Error::Schema(format!(
                    "query column `{}` matched against the query table",
                    query.columns[q].header
                )));
            }
            let c = resolve_column(table, &m.column)?;
            if !seen.insert(table.id) || map.column_in(q, table.id).is_some() {
                return Err(Error::DuplicateAlignment {
                    query_column: query.columns[q].header.clone(),
                    table: table.name.clone(),
                });
            }
            let target = ColumnRef::new(table.id, c);
            let dtype = table.columns[c].dtype;
            if dtype != q_dtype {
                map.dropped.push(DroppedPair {
                    query_column: q,
                    column: target,
                    reason: format!("dtype {} vs {}", q_dtype.as_str(), dtype.as_str()),
                });
                continue;
            }
            map.insert(q, target)?;
        }
    }
    Ok(map)
}

pub fn parse_alignment(json: &str, lake: &Lake) -> Result<AlignmentMap> {
    let doc: AlignmentDoc =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("alignment document: {e}")))?;
    resolve_alignment(&doc, lake)
}

pub fn load_alignment(path: &Path, lake: &Lake) -> Result<AlignmentMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment(&text, lake)
}

/// Distinct values kept per column by the value sketch.
const SKETCH_SIZE: usize = 256;

/// Bottom-k sketch of a column's distinct normalized values.
fn value_sketch(col: &TypedColumn, seed: u64) -> BTreeSet<u64> {
    let mut hashes = BTreeSet::new();
    for row in 0..col.len() {
        let h = match col.cell(row) {
            Cell::Null => continue,
            Cell::Number(x) => fnv1a(seed, x.to_string().as_bytes()),
            Cell::Text(s) => fnv1a(seed, s.trim().to_lowercase().as_bytes()),
        };
        hashes.insert(h);
        if hashes.len() > SKETCH_SIZE {
            let last = *hashes.iter().next_back().expect("non-empty");
            hashes.remove(&last);
        }
    }
    hashes
}

/// Jaccard estimate from two bottom-k sketches (exact when both sets fit the sketch).
fn sketch_jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let union: Vec<u64> = a.union(b).copied().take(SKETCH_SIZE).collect();
    let both = union
        .iter()
        .filter(|h| a.contains(h) && b.contains(h))
        .count();
    both as f64 / union.len() as f64
}

fn header_jaccard(a: &str, b: &str) -> f64 {
    let ta: HashSet<String> = tokens(a).collect();
    let tb: HashSet<String> = tokens(b).collect();
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

/// Blended header-token and value-sketch similarity in `[0, 1]`.
pub fn baseline_score(a: &TypedColumn, b: &TypedColumn, seed: u64) -> f64 {
    0.5 * header_jaccard(&a.header, &b.header)
        + 0.5 * sketch_jaccard(&value_sketch(a, seed), &value_sketch(b, seed))
}

/// Fallback aligner: for each query column and result table, picks the same-dtype column
/// with the highest blended score, if that score reaches `threshold`.
pub fn baseline_align(
    query: &LakeTable,
    results: &[Arc<LakeTable>],
    threshold: f64,
    seed: u64,
) -> AlignmentMap {
    let q_sketches: Vec<_> = query
        .columns
        .iter()
        .map(|c| value_sketch(c, seed))
        .collect();
    let mut map = AlignmentMap::default();
    for t in results {
        let sketches: Vec<_> = t.columns.iter().map(|c| value_sketch(c, seed)).collect();
        for (qi, qc) in query.columns.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (ci, c) in t.columns.iter().enumerate() {
                if c.dtype != qc.dtype {
                    continue;
                }
                let score = 0.5 * header_jaccard(&qc.header, &c.header)
                    + 0.5 * sketch_jaccard(&q_sketches[qi], &sketches[ci]);
                if score >= threshold && best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, ci));
                }
            }
            if let Some((_, ci)) = best {
                map.insert(qi, ColumnRef::new(t.id, ci))
                    .expect("one match per table by construction");
            }
        }
    }
    map
}
