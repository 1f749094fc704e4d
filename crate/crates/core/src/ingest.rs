//! Delimiter-separated table loading and per-column dtype inference.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{baseline_align, load_alignment};
use crate::config::{EngineConfig, InferenceThresholds};
use crate::error::{Error, Result};
use crate::table::{Cell, ColumnValues, DType, Lake, LakeTable, TableId, TypedColumn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: true,
        }
    }
}

/// Empty strings and `NA` / `N/A` / `null` (any case) are missing values.
pub fn is_null_token(raw: &str) -> bool {
    let s = raw.trim();
    s.is_empty()
        || s.eq_ignore_ascii_case("na")
        || s.eq_ignore_ascii_case("n/a")
        || s.eq_ignore_ascii_case("null")
}

/// Parses a cell as a finite real.
pub fn parse_number(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Infers the dtype of a column from its raw cells.
///
/// Numerical when at least `numeric_ratio` of non-null cells parse as finite reals;
/// otherwise textual when values are mostly distinct and long; otherwise categorical.
/// The result depends only on the multiset of cells.
pub fn infer_dtype<S: AsRef<str>>(cells: &[S], th: &InferenceThresholds) -> Result<DType> {
    let mut non_null = 0usize;
    let mut numeric = 0usize;
    let mut tokens = 0usize;
    let mut distinct: HashSet<&str> = HashSet::new();
    for cell in cells {
        let raw = cell.as_ref();
        if is_null_token(raw) {
            continue;
        }
        non_null += 1;
        if parse_number(raw).is_some() {
            numeric += 1;
        }
        tokens += raw.split_whitespace().count();
        distinct.insert(raw.trim());
    }
    if non_null == 0 {
        return Err(Error::EmptyColumn);
    }
    let n = non_null as f64;
    if numeric as f64 >= th.numeric_ratio * n {
        return Ok(DType::Numerical);
    }
    let distinct_ratio = distinct.len() as f64 / n;
    let mean_tokens = tokens as f64 / n;
    if distinct_ratio > th.distinct_ratio && mean_tokens > th.min_tokens {
        Ok(DType::Textual)
    } else {
        Ok(DType::Categorical)
    }
}

/// Builds a typed column from raw cells. All-null columns load as categorical.
pub fn build_column<S: AsRef<str>>(
    header: &str,
    cells: &[S],
    th: &InferenceThresholds,
) -> TypedColumn {
    let dtype = match infer_dtype(cells, th) {
        Ok(d) => d,
        Err(_) => DType::Categorical,
    };
    let values = match dtype {
        DType::Numerical => ColumnValues::Numbers(
            cells
                .iter()
                .map(|c| {
                    let raw = c.as_ref();
                    if is_null_token(raw) {
                        None
                    } else {
                        parse_number(raw)
                    }
                })
                .collect(),
        ),
        DType::Categorical | DType::Textual => {
            let mut interned: HashMap<&str, Arc<str>> = HashMap::new();
            ColumnValues::Strings(
                cells
                    .iter()
                    .map(|c| {
                        let raw = c.as_ref();
                        if is_null_token(raw) {
                            return None;
                        }
                        let key = raw.trim();
                        Some(
                            interned
                                .entry(key)
                                .or_insert_with(|| Arc::from(key))
                                .clone(),
                        )
                    })
                    .collect(),
            )
        }
    };
    TypedColumn::new(header, dtype, values).expect("storage built to match inferred dtype")
}

/// Parses a delimiter-separated document into a table. Ragged rows are rejected.
pub fn parse_table<R: Read>(
    name: &str,
    reader: R,
    opts: &LoadOptions,
    th: &InferenceThresholds,
) -> Result<LakeTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(false)
        .flexible(false)
        .from_reader(reader);
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{name}: empty file")));
    }
    let width = rows[0].len();
    let headers: Vec<String> = if opts.has_header {
        rows.remove(0)
            .iter()
            .map(|h| h.trim().to_string())
            .collect()
    } else {
        vec![String::new(); width]
    };
    if rows.is_empty() {
        return Err(Error::Parse(format!("{name}: no data rows")));
    }
    let columns = (0..width)
        .map(|c| {
            let cells: Vec<&str> = rows.iter().map(|r| r.get(c).unwrap_or("")).collect();
            build_column(&headers[c], &cells, th)
        })
        .collect();
    LakeTable::new(TableId(0), name, columns)
}

/// Loads one table file; the table name is the file stem.
pub fn load_table(path: &Path, opts: &LoadOptions, th: &InferenceThresholds) -> Result<LakeTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_table(&name, std::io::BufReader::new(file), opts, th)
}

/// Loads several files in parallel, preserving input order.
pub fn load_tables(
    paths: &[PathBuf],
    opts: &LoadOptions,
    th: &InferenceThresholds,
) -> Result<Vec<LakeTable>> {
    paths.par_iter().map(|p| load_table(p, opts, th)).collect()
}

/// Lists table files (`.csv`, `.tsv`, `.txt`) in a directory, sorted by name.
pub fn list_table_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("csv" | "tsv" | "txt")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Writes a table back out. Nulls become empty cells.
pub fn write_table<W: Write>(table: &LakeTable, out: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(out);
    let to_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(table.columns.iter().map(|c| c.header.as_str()))
        .map_err(to_err)?;
    let mut record: Vec<String> = Vec::with_capacity(table.columns.len());
    for row in 0..table.row_count {
        record.clear();
        for col in &table.columns {
            record.push(match col.cell(row) {
                Cell::Null => String::new(),
                Cell::Number(x) => x.to_string(),
                Cell::Text(s) => s.to_string(),
            });
        }
        w.write_record(&record).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(())
}

pub fn save_table(table: &LakeTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table(table, std::io::BufWriter::new(file), b',')
}

/// Where a lake comes from: a query table file, result table files or directories, and an
/// optional alignment document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LakeSource {
    pub query: PathBuf,
    pub results: Vec<PathBuf>,
    #[serde(default)]
    pub alignment: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentOrigin {
    File,
    Baseline,
}

impl LakeSource {
    /// Result table files, with directories expanded in name order.
    pub fn result_files(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for p in &self.results {
            if p.is_dir() {
                out.extend(list_table_files(p)?);
            } else {
                out.push(p.clone());
            }
        }
        Ok(out)
    }

    /// Every file the lake is read from, query first and alignment last.
    pub fn files(&self) -> Result<Vec<PathBuf>> {
        let mut out = vec![self.query.clone()];
        out.extend(self.result_files()?);
        out.extend(self.alignment.clone());
        Ok(out)
    }

    /// Loads the tables and aligns them, from the alignment document when given and with
    /// [`baseline_align`] otherwise.
    pub fn load(&self, opts: &LoadOptions, cfg: &EngineConfig) -> Result<(Lake, AlignmentOrigin)> {
        let query = load_table(&self.query, opts, &cfg.inference)?;
        let results = load_tables(&self.result_files()?, opts, &cfg.inference)?;
        let lake = Lake::unaligned(query, results)?;
        match &self.alignment {
            Some(path) => {
                let map = load_alignment(path, &lake)?;
                Ok((lake.with_alignment(map)?, AlignmentOrigin::File))
            }
            None => {
                let map =
                    baseline_align(lake.query(), lake.results(), cfg.align_threshold, cfg.seed);
                Ok((lake.with_alignment(map)?, AlignmentOrigin::Baseline))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn th() -> InferenceThresholds {
        InferenceThresholds::default()
    }

    #[test]
    fn loads_small_csv_with_inferred_types() {
        let t = parse_table(
            "pay",
            "city,pay\nTokyo,100\nOsaka,90".as_bytes(),
            &LoadOptions::default(),
            &th(),
        )
        .unwrap();
        assert_eq!(t.row_count, 2);
        assert_eq!(t.columns[0].header, "city");
        assert_eq!(t.columns[0].dtype, DType::Categorical);
        assert_eq!(t.columns[1].dtype, DType::Numerical);
        assert_eq!(t.columns[1].cell(1), Cell::Number(90.0));
    }

    #[test]
    fn empty_file_is_parse_error() {
        let err = parse_table("e", "".as_bytes(), &LoadOptions::default(), &th()).unwrap_err();
        assert_eq!(err.code(), "ParseError");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = parse_table(
            "r",
            "a,b\n1,2\n3\n".as_bytes(),
            &LoadOptions::default(),
            &th(),
        )
        .unwrap_err();
        assert_eq!(err.code(), "ParseError");
    }

    #[test]
    fn headerless_and_custom_delimiter() {
        let opts = LoadOptions {
            delimiter: b'\t',
            has_header: false,
        };
        let t = parse_table("x", "a\t1\nb\t2\n".as_bytes(), &opts, &th()).unwrap();
        assert_eq!(t.row_count, 2);
        assert_eq!(t.columns[0].header, "");
        assert_eq!(t.columns[1].dtype, DType::Numerical);
    }

    #[test]
    fn null_markers() {
        for s in ["", "  ", "NA", "na", "N/A", "n/a", "NULL", "null"] {
            assert!(is_null_token(s), "{s:?}");
        }
        assert!(!is_null_token("nan"));
        assert!(!is_null_token("0"));
    }

    #[test]
    fn infer_basic_examples() {
        assert_eq!(
            infer_dtype(&["1", "2", "3.5"], &th()).unwrap(),
            DType::Numerical
        );
        assert_eq!(
            infer_dtype(&["CA", "WA", "CA"], &th()).unwrap(),
            DType::Categorical
        );
        assert_eq!(
            infer_dtype(&["", "NA"], &th()).unwrap_err().code(),
            "EmptyColumn"
        );
        let empty: [&str; 0] = [];
        assert!(infer_dtype(&empty, &th()).is_err());
    }

    #[test]
    fn numeric_threshold_is_inclusive_at_95_percent() {
        let mut cells: Vec<String> = (0..95).map(|i| i.to_string()).collect();
        cells.extend((0..5).map(|i| format!("x{i}")));
        assert_eq!(infer_dtype(&cells, &th()).unwrap(), DType::Numerical);
        cells[0] = "y".into();
        assert_eq!(infer_dtype(&cells, &th()).unwrap(), DType::Categorical);
    }

    /// Generated corpus: 100 distinct 8-word sentences. Distinct ratio is 1.0 > 0.5 and the
    /// mean token count is 8 > 3, so both textual thresholds fire.
    #[test]
    fn distinct_sentences_are_textual() {
        let words = [
            "river", "market", "school", "budget", "green", "policy", "north", "vendor", "office",
            "review",
        ];
        let cells: Vec<String> = (0..100)
            .map(|i| {
                (0..8)
                    .map(|j| words[(i * 7 + j * 3 + i / 10) % words.len()])
                    .collect::<Vec<_>>()
                    .join(" ")
                    + &format!(" n{i}")
            })
            .collect();
        let distinct: HashSet<&String> = cells.iter().collect();
        assert_eq!(distinct.len(), 100);
        assert_eq!(infer_dtype(&cells, &th()).unwrap(), DType::Textual);
    }

    #[test]
    fn long_distinct_strings_load_as_textual() {
        let mut doc = String::from("id,comment\n");
        for i in 0..2000 {
            doc.push_str(&format!(
                "{i},customer {i} reported a delayed shipment near depot {}\n",
                i % 37
            ));
        }
        let t = parse_table("c", doc.as_bytes(), &LoadOptions::default(), &th()).unwrap();
        assert_eq!(t.columns[1].dtype, DType::Textual);
        assert_eq!(t.columns[0].dtype, DType::Numerical);
    }

    #[test]
    fn repeated_long_strings_stay_categorical() {
        let cells: Vec<&str> = (0..100)
            .map(|i| {
                if i % 2 == 0 {
                    "department of public works"
                } else {
                    "office of the city clerk"
                }
            })
            .collect();
        assert_eq!(infer_dtype(&cells, &th()).unwrap(), DType::Categorical);
    }

    #[test]
    fn non_numeric_minority_in_numerical_column_becomes_null() {
        let mut cells: Vec<String> = (0..99).map(|i| i.to_string()).collect();
        cells.push("oops".into());
        let col = build_column("v", &cells, &th());
        assert_eq!(col.dtype, DType::Numerical);
        assert_eq!(col.null_count(), 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_table(
            Path::new("/definitely/not/here.csv"),
            &LoadOptions::default(),
            &th(),
        )
        .unwrap_err();
        assert_eq!(err.code(), "IoError");
    }

    fn cell_strings(t: &LakeTable) -> Vec<Vec<String>> {
        t.columns
            .iter()
            .map(|c| {
                (0..t.row_count)
                    .map(|r| match c.cell(r) {
                        Cell::Null => "<null>".to_string(),
                        Cell::Number(x) => format!("n:{x}"),
                        Cell::Text(s) => format!("s:{s}"),
                    })
                    .collect()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn write_then_load_preserves_cells(
            nums in prop::collection::vec(prop::option::weighted(0.9, -1e6f64..1e6), 3..40),
            words in prop::collection::vec(prop::option::weighted(0.9, "[a-z]{2,6}( [a-z]{2,6}){0,1}".prop_filter("null marker", |w| !is_null_token(w))), 3..40),
        ) {
            let rows = nums.len().min(words.len());
            prop_assume!(nums[..rows].iter().any(Option::is_some));
            prop_assume!(words[..rows].iter().any(Option::is_some));
            let t = LakeTable::new(TableId(0), "t", vec![
                TypedColumn::numerical("x", nums[..rows].to_vec()).unwrap(),
                TypedColumn::categorical("w", &words[..rows]),
            ]).unwrap();
            let mut buf = Vec::new();
            write_table(&t, &mut buf, b',').unwrap();
            let back = parse_table("t", buf.as_slice(), &LoadOptions::default(), &th()).unwrap();
            prop_assert_eq!(cell_strings(&t), cell_strings(&back));
        }

        #[test]
        fn inference_is_order_invariant(
            mut cells in prop::collection::vec("([0-9]{1,3}|[a-z]{1,5}( [a-z]{1,5}){0,5}|NA)", 1..60),
            seed in any::<u64>(),
        ) {
            prop_assume!(cells.iter().any(|c| !is_null_token(c)));
            let before = infer_dtype(&cells, &th()).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            cells.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, infer_dtype(&cells, &th()).unwrap());
        }
    }
}
