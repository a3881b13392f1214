//! Tabular data: raw CSV ingestion, rule-based cleaning, binning into a
//! layout, and multiset datasets keyed by binned records.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Layout, Schema, TransformPlan};

/// A binned record: one bin index per layout column.
pub type Record = Vec<u8>;

/// Multiset of binned records over a fixed layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    layout: Arc<Layout>,
    counts: BTreeMap<Record, u64>,
    n: u64,
}

impl Dataset {
    pub fn new(layout: Arc<Layout>) -> Self {
        Dataset {
            layout,
            counts: BTreeMap::new(),
            n: 0,
        }
    }

    pub fn from_counts(layout: Arc<Layout>, counts: BTreeMap<Record, u64>) -> Result<Self> {
        let width = layout.width();
        let mut n = 0u64;
        for (rec, &c) in &counts {
            if rec.len() != width {
                return Err(Error::Data(format!(
                    "record width {} does not match layout width {width}",
                    rec.len()
                )));
            }
            for (col, &b) in rec.iter().enumerate() {
                if b as usize >= layout.columns[col].bins.len() {
                    return Err(Error::Data(format!(
                        "bin index {b} out of range for column {:?}",
                        layout.columns[col].name
                    )));
                }
            }
            if c == 0 {
                return Err(Error::Data("zero-count record".into()));
            }
            n += c;
        }
        Ok(Dataset { layout, counts, n })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &BTreeMap<Record, u64> {
        &self.counts
    }

    pub fn count_of(&self, rec: &Record) -> u64 {
        self.counts.get(rec).copied().unwrap_or(0)
    }

    pub fn add(&mut self, rec: Record, count: u64) {
        debug_assert_eq!(rec.len(), self.layout.width());
        if count == 0 {
            return;
        }
        *self.counts.entry(rec).or_insert(0) += count;
        self.n += count;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Record, u64)> {
        self.counts.iter().map(|(r, &c)| (r, c))
    }

    /// Multiplicity histogram: occurrence count -> number of distinct
    /// records with exactly that count.
    pub fn multiplicity_histogram(&self) -> BTreeMap<u64, u64> {
        let mut hist = BTreeMap::new();
        for &c in self.counts.values() {
            *hist.entry(c).or_insert(0) += 1;
        }
        hist
    }

    /// Fraction of rows whose cell in `column` falls in each bin.
    pub fn one_way_fractions(&self, column: usize) -> Vec<f64> {
        let mut totals = vec![0u64; self.layout.columns[column].bins.len()];
        for (rec, c) in self.iter() {
            totals[rec[column] as usize] += c;
        }
        totals
            .into_iter()
            .map(|t| {
                if self.n == 0 {
                    0.0
                } else {
                    t as f64 / self.n as f64
                }
            })
            .collect()
    }

    /// Joint fractions over a column subset, keyed by the bin tuple.
    pub fn marginal_fractions(&self, columns: &[usize]) -> BTreeMap<Vec<u8>, f64> {
        let mut totals: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        for (rec, c) in self.iter() {
            let key: Vec<u8> = columns.iter().map(|&i| rec[i]).collect();
            *totals.entry(key).or_insert(0) += c;
        }
        totals
            .into_iter()
            .map(|(k, t)| (k, if self.n == 0 { 0.0 } else { t as f64 / self.n as f64 }))
            .collect()
    }

    /// Rebins every record into a coarser layout produced by `plan`.
    pub fn apply_transform(&self, schema: &Schema, plan: &TransformPlan) -> Result<Dataset> {
        let target = schema.layout(plan)?;
        let maps = self.layout.rebin_to(&target)?;
        let mut out = Dataset::new(target);
        for (rec, c) in self.iter() {
            let mapped: Record = rec
                .iter()
                .enumerate()
                .map(|(col, &b)| maps[col][b as usize])
                .collect();
            out.add(mapped, c);
        }
        Ok(out)
    }
}

/// Raw integer table prior to binning. `None` marks a missing cell.
#[derive(Debug, Clone)]
pub struct RawTable {
    /// Column names in schema order.
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<i64>>>,
}

/// One comparison against a raw column. `missing` matches absent cells;
/// the value comparisons are false on absent cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleaningAtom {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing: Option<bool>,
}

impl CleaningAtom {
    fn validate(&self) -> Result<()> {
        let set = [
            self.below.is_some(),
            self.above.is_some(),
            self.equals.is_some(),
            self.missing.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        if set != 1 {
            return Err(Error::Config(format!(
                "cleaning atom on {:?} must declare exactly one of below/above/equals/missing",
                self.column
            )));
        }
        Ok(())
    }

    fn matches(&self, cell: Option<i64>) -> bool {
        match (self.below, self.above, self.equals, self.missing) {
            (Some(v), _, _, _) => cell.map(|x| x < v).unwrap_or(false),
            (_, Some(v), _, _) => cell.map(|x| x > v).unwrap_or(false),
            (_, _, Some(v), _) => cell == Some(v),
            (_, _, _, Some(want)) => cell.is_none() == want,
            _ => false,
        }
    }
}

/// Rows matching every atom of a rule are dropped. Disjunctions are spelled
/// as separate rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleaningRule {
    pub description: String,
    pub drop_if: Vec<CleaningAtom>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub rows_in: u64,
    pub rows_kept: u64,
    /// Drop count per rule, in rule order; a row is credited to the first
    /// rule it matches.
    pub dropped_by_rule: Vec<(String, u64)>,
}

impl FilterReport {
    pub fn dropped_fraction(&self) -> f64 {
        if self.rows_in == 0 {
            0.0
        } else {
            (self.rows_in - self.rows_kept) as f64 / self.rows_in as f64
        }
    }
}

/// Reads the schema's columns out of a CSV file with a header row. CSV
/// columns not named by the schema are ignored. A cell is missing when
/// empty or "NA"; otherwise it must resolve through the column's value map
/// or parse as an integer.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        let pos = headers
            .iter()
            .position(|h| h == col.name)
            .ok_or_else(|| Error::Data(format!("CSV misses column {:?}", col.name)))?;
        positions.push(pos);
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(schema.columns.len());
        for (col, &pos) in schema.columns.iter().zip(&positions) {
            let cell = record.get(pos).unwrap_or("");
            let parsed = if cell.is_empty() || cell == "NA" {
                None
            } else if let Some(map) = &col.value_map {
                match map.get(cell) {
                    Some(&v) => Some(v),
                    None => cell.parse::<i64>().ok().map(Some).ok_or_else(|| {
                        Error::Data(format!(
                            "row {}: column {:?} has unmapped value {cell:?}",
                            line + 2,
                            col.name
                        ))
                    })?,
                }
            } else {
                Some(cell.parse::<i64>().map_err(|_| {
                    Error::Data(format!(
                        "row {}: column {:?} has non-integer value {cell:?}",
                        line + 2,
                        col.name
                    ))
                })?)
            };
            row.push(parsed);
        }
        rows.push(row);
    }
    Ok(RawTable {
        columns: schema.columns.iter().map(|c| c.name.clone()).collect(),
        rows,
    })
}

/// Drops rows matching any cleaning rule, then any row that still has a
/// missing cell (binning needs every value). Returns the survivors and a
/// per-rule removal report.
pub fn filter_raw(raw: &RawTable, rules: &[CleaningRule]) -> Result<(RawTable, FilterReport)> {
    let col_index = |name: &str| -> Result<usize> {
        raw.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("cleaning rule names unknown column {name:?}")))
    };
    let mut compiled = Vec::with_capacity(rules.len());
    for rule in rules {
        if rule.drop_if.is_empty() {
            return Err(Error::Config(format!(
                "cleaning rule {:?} has no atoms",
                rule.description
            )));
        }
        let mut atoms = Vec::with_capacity(rule.drop_if.len());
        for atom in &rule.drop_if {
            atom.validate()?;
            atoms.push((col_index(&atom.column)?, atom));
        }
        compiled.push(atoms);
    }

    let mut dropped_by_rule: Vec<(String, u64)> = rules
        .iter()
        .map(|r| (r.description.clone(), 0))
        .collect();
    dropped_by_rule.push(("missing value".into(), 0));
    let missing_slot = dropped_by_rule.len() - 1;

    let mut kept = Vec::new();
    'rows: for row in &raw.rows {
        for (slot, atoms) in compiled.iter().enumerate() {
            if atoms.iter().all(|(i, a)| a.matches(row[*i])) {
                dropped_by_rule[slot].1 += 1;
                continue 'rows;
            }
        }
        if row.iter().any(|c| c.is_none()) {
            dropped_by_rule[missing_slot].1 += 1;
            continue;
        }
        kept.push(row.clone());
    }

    let report = FilterReport {
        rows_in: raw.rows.len() as u64,
        rows_kept: kept.len() as u64,
        dropped_by_rule,
    };
    Ok((
        RawTable {
            columns: raw.columns.clone(),
            rows: kept,
        },
        report,
    ))
}

/// Bins a fully observed raw table into a layout. Fails if any value falls
/// in no bin, which means the cleaning rules let an out-of-domain value
/// through.
pub fn bin_raw(raw: &RawTable, layout: &Arc<Layout>) -> Result<Dataset> {
    if raw.columns.len() != layout.width()
        || raw
            .columns
            .iter()
            .zip(&layout.columns)
            .any(|(a, b)| *a != b.name)
    {
        return Err(Error::Data("raw table does not match layout columns".into()));
    }
    let mut ds = Dataset::new(Arc::clone(layout));
    for (line, row) in raw.rows.iter().enumerate() {
        let mut rec = Vec::with_capacity(layout.width());
        for (col, cell) in layout.columns.iter().zip(row) {
            let x = cell.ok_or_else(|| {
                Error::Data(format!("row {line}: column {:?} is missing", col.name))
            })?;
            let bin = col.bin_of(x).ok_or_else(|| {
                Error::Data(format!(
                    "row {line}: column {:?} value {x} falls in no bin; cleaning rules must \
                     remove out-of-domain values",
                    col.name
                ))
            })?;
            rec.push(bin as u8);
        }
        ds.add(rec, 1);
    }
    Ok(ds)
}
