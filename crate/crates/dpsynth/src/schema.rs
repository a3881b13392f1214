//! Column schema: bin alternatives, public value bounds, coarse group-by
//! tables, and the per-run layout realized by a transform plan.
//!
//! Raw domains are integer valued. A bin is exactly one of: a single value,
//! an inclusive range, or an open-ended interval whose declared edge doubles
//! as its numeric representative.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One bin of a column alternative or coarse table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub label: String,
    /// Single raw value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<i64>,
    /// Inclusive range [lo, hi].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[i64; 2]>,
    /// Open-ended: raw value strictly below this edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<i64>,
    /// Open-ended: raw value strictly above this edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above: Option<i64>,
}

impl BinSpec {
    pub fn single(label: &str, v: i64) -> Self {
        BinSpec {
            label: label.into(),
            value: Some(v),
            range: None,
            below: None,
            above: None,
        }
    }

    pub fn span(label: &str, lo: i64, hi: i64) -> Self {
        BinSpec {
            label: label.into(),
            value: None,
            range: Some([lo, hi]),
            below: None,
            above: None,
        }
    }

    pub fn open_below(label: &str, edge: i64) -> Self {
        BinSpec {
            label: label.into(),
            value: None,
            range: None,
            below: Some(edge),
            above: None,
        }
    }

    pub fn open_above(label: &str, edge: i64) -> Self {
        BinSpec {
            label: label.into(),
            value: None,
            range: None,
            below: None,
            above: Some(edge),
        }
    }

    fn validate(&self, where_: &str) -> Result<()> {
        let set = [
            self.value.is_some(),
            self.range.is_some(),
            self.below.is_some(),
            self.above.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        if set != 1 {
            return Err(Error::Schema(format!(
                "{where_}: bin {:?} must declare exactly one of value/range/below/above",
                self.label
            )));
        }
        if let Some([lo, hi]) = self.range {
            if lo > hi {
                return Err(Error::Schema(format!(
                    "{where_}: bin {:?} has an empty range",
                    self.label
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: i64) -> bool {
        match (self.value, self.range, self.below, self.above) {
            (Some(v), _, _, _) => x == v,
            (_, Some([lo, hi]), _, _) => lo <= x && x <= hi,
            (_, _, Some(edge), _) => x < edge,
            (_, _, _, Some(edge)) => x > edge,
            _ => false,
        }
    }

    /// Inclusive integer range of raw values this bin can hold, with open
    /// ends closed off by the column's public bounds.
    pub fn effective_range(&self, bounds: [i64; 2]) -> (i64, i64) {
        match (self.value, self.range, self.below, self.above) {
            (Some(v), _, _, _) => (v, v),
            (_, Some([lo, hi]), _, _) => (lo, hi),
            (_, _, Some(edge), _) => (bounds[0].min(edge - 1), edge - 1),
            (_, _, _, Some(edge)) => (edge + 1, bounds[1].max(edge + 1)),
            _ => unreachable!("validated bin"),
        }
    }

    /// Numeric representative: the value itself, the midpoint of a bounded
    /// range, or the declared edge of an open-ended bin.
    pub fn numeric(&self) -> f64 {
        match (self.value, self.range, self.below, self.above) {
            (Some(v), _, _, _) => v as f64,
            (_, Some([lo, hi]), _, _) => (lo as f64 + hi as f64) / 2.0,
            (_, _, Some(edge), _) => edge as f64,
            (_, _, _, Some(edge)) => edge as f64,
            _ => unreachable!("validated bin"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alternative {
    pub id: String,
    pub bins: Vec<BinSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    /// Public bounds [L, U] of the underlying raw value.
    pub bounds: [i64; 2],
    /// Alternative id used at ingestion; every other alternative and the
    /// coarse table must be coarsenings of it.
    pub base: String,
    pub alternatives: Vec<Alternative>,
    /// Coarse group-by table, required for columns used as group-bys.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<Vec<BinSpec>>,
    /// Text-to-raw-value mapping applied when reading CSV cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_map: Option<BTreeMap<String, i64>>,
}

impl ColumnSpec {
    pub fn alternative(&self, id: &str) -> Option<&Alternative> {
        self.alternatives.iter().find(|a| a.id == id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

/// Per-column choice of one bin alternative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub choices: BTreeMap<String, String>,
}

impl TransformPlan {
    pub fn id(&self) -> String {
        self.choices
            .iter()
            .map(|(c, a)| format!("{c}={a}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Coarse table realized against a concrete bin list.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseTable {
    pub bins: Vec<BinSpec>,
    /// Fine bin index -> coarse bin index.
    pub map: Vec<u8>,
}

/// One column of a realized layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutColumn {
    pub name: String,
    pub bounds: [i64; 2],
    pub bins: Vec<BinSpec>,
    /// Cached numeric representative per bin.
    pub numeric: Vec<f64>,
    pub coarse: Option<CoarseTable>,
}

impl LayoutColumn {
    pub fn bin_of(&self, x: i64) -> Option<usize> {
        self.bins.iter().position(|b| b.contains(x))
    }
}

/// The concrete table shape a dataset lives in: one bin list per column in
/// schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub columns: Vec<LayoutColumn>,
}

impl Layout {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Argument(format!("unknown column {name:?}")))
    }

    /// Numeric representative of a bin: midpoint for bounded ranges, the
    /// declared edge for open-ended bins, the value itself for singletons.
    pub fn bin_to_numeric(&self, column: usize, bin: usize) -> f64 {
        self.columns[column].numeric[bin]
    }

    /// Number of cells in the record universe.
    pub fn universe_size(&self) -> u128 {
        self.columns
            .iter()
            .map(|c| c.bins.len() as u128)
            .product()
    }

    /// Per-column maps from this layout's bins into a coarser target layout.
    pub fn rebin_to(&self, target: &Layout) -> Result<Vec<Vec<u8>>> {
        if self.width() != target.width() {
            return Err(Error::Argument("layout widths differ".into()));
        }
        self.columns
            .iter()
            .zip(&target.columns)
            .map(|(from, to)| {
                if from.name != to.name || from.bounds != to.bounds {
                    return Err(Error::Argument(format!(
                        "layouts disagree on column {:?}",
                        from.name
                    )));
                }
                containment_map(
                    &from.bins,
                    &to.bins,
                    from.bounds,
                    &format!("column {:?}", from.name),
                )
            })
            .collect()
    }
}

fn check_partition(
    bins: &[BinSpec],
    bounds: [i64; 2],
    where_: &str,
) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::Schema(format!("{where_}: no bins declared")));
    }
    let mut labels = BTreeSet::new();
    for bin in bins {
        bin.validate(where_)?;
        if !labels.insert(&bin.label) {
            return Err(Error::Schema(format!(
                "{where_}: duplicate bin label {:?}",
                bin.label
            )));
        }
    }
    // Bins must partition the declared integer bounds: every raw value in
    // [L, U] falls in exactly one bin.
    for x in bounds[0]..=bounds[1] {
        let hits = bins.iter().filter(|b| b.contains(x)).count();
        if hits != 1 {
            return Err(Error::Schema(format!(
                "{where_}: raw value {x} is covered by {hits} bins"
            )));
        }
    }
    Ok(())
}

/// Index of the target bin containing each source bin, or an error when a
/// source bin straddles the target partition.
fn containment_map(
    from: &[BinSpec],
    to: &[BinSpec],
    bounds: [i64; 2],
    where_: &str,
) -> Result<Vec<u8>> {
    if to.len() > u8::MAX as usize {
        return Err(Error::Schema(format!("{where_}: too many bins")));
    }
    let mut map = Vec::with_capacity(from.len());
    for bin in from {
        let (lo, hi) = bin.effective_range(bounds);
        let target = to.iter().position(|t| {
            let (tlo, thi) = t.effective_range(bounds);
            tlo <= lo && hi <= thi
        });
        match target {
            Some(t) => map.push(t as u8),
            None => {
                return Err(Error::Schema(format!(
                    "{where_}: bin {:?} does not nest inside the target bins",
                    bin.label
                )))
            }
        }
    }
    Ok(map)
}

impl Schema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let schema: Schema = toml::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.as_ref().display())))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn column(&self, name: &str) -> Result<&ColumnSpec> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown column {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("schema declares no columns".into()));
        }
        let mut names = BTreeSet::new();
        for col in &self.columns {
            if !names.insert(&col.name) {
                return Err(Error::Schema(format!(
                    "duplicate column name {:?}",
                    col.name
                )));
            }
            if col.bounds[0] > col.bounds[1] {
                return Err(Error::Schema(format!(
                    "column {:?}: bounds are empty",
                    col.name
                )));
            }
            if col.alternatives.is_empty() {
                return Err(Error::Schema(format!(
                    "column {:?}: no bin alternatives",
                    col.name
                )));
            }
            let mut ids = BTreeSet::new();
            for alt in &col.alternatives {
                if !ids.insert(&alt.id) {
                    return Err(Error::Schema(format!(
                        "column {:?}: duplicate alternative id {:?}",
                        col.name, alt.id
                    )));
                }
                check_partition(
                    &alt.bins,
                    col.bounds,
                    &format!("column {:?} alternative {:?}", col.name, alt.id),
                )?;
                if alt.bins.len() > u8::MAX as usize {
                    return Err(Error::Schema(format!(
                        "column {:?} alternative {:?}: too many bins",
                        col.name, alt.id
                    )));
                }
            }
            let base = col.alternative(&col.base).ok_or_else(|| {
                Error::Schema(format!(
                    "column {:?}: base alternative {:?} not declared",
                    col.name, col.base
                ))
            })?;
            // Every alternative and the coarse table must be reachable from
            // the base bins by pure aggregation.
            for alt in &col.alternatives {
                containment_map(
                    &base.bins,
                    &alt.bins,
                    col.bounds,
                    &format!("column {:?} alternative {:?}", col.name, alt.id),
                )?;
            }
            if let Some(coarse) = &col.coarse {
                check_partition(
                    coarse,
                    col.bounds,
                    &format!("column {:?} coarse table", col.name),
                )?;
                for alt in &col.alternatives {
                    containment_map(
                        &alt.bins,
                        coarse,
                        col.bounds,
                        &format!(
                            "column {:?} alternative {:?} vs coarse table",
                            col.name, alt.id
                        ),
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Plan choosing the base alternative of every column.
    pub fn base_plan(&self) -> TransformPlan {
        TransformPlan {
            choices: self
                .columns
                .iter()
                .map(|c| (c.name.clone(), c.base.clone()))
                .collect(),
        }
    }

    /// Realizes the layout selected by a transform plan.
    pub fn layout(&self, plan: &TransformPlan) -> Result<Arc<Layout>> {
        let mut columns = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let alt_id = plan.choices.get(&col.name).ok_or_else(|| {
                Error::Argument(format!("plan misses column {:?}", col.name))
            })?;
            let alt = col.alternative(alt_id).ok_or_else(|| {
                Error::Argument(format!(
                    "column {:?}: unknown alternative {alt_id:?}",
                    col.name
                ))
            })?;
            let coarse = match &col.coarse {
                Some(coarse_bins) => Some(CoarseTable {
                    bins: coarse_bins.clone(),
                    map: containment_map(
                        &alt.bins,
                        coarse_bins,
                        col.bounds,
                        &format!("column {:?}", col.name),
                    )?,
                }),
                None => None,
            };
            columns.push(LayoutColumn {
                name: col.name.clone(),
                bounds: col.bounds,
                bins: alt.bins.clone(),
                numeric: alt.bins.iter().map(|b| b.numeric()).collect(),
                coarse,
            });
        }
        Ok(Arc::new(Layout { columns }))
    }

    pub fn base_layout(&self) -> Result<Arc<Layout>> {
        self.layout(&self.base_plan())
    }

    /// Per-column maps from base bins to the plan's bins.
    pub fn rebin_maps(&self, plan: &TransformPlan) -> Result<Vec<Vec<u8>>> {
        let mut maps = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let base = col.alternative(&col.base).expect("validated schema");
            let alt_id = plan.choices.get(&col.name).ok_or_else(|| {
                Error::Argument(format!("plan misses column {:?}", col.name))
            })?;
            let alt = col.alternative(alt_id).ok_or_else(|| {
                Error::Argument(format!(
                    "column {:?}: unknown alternative {alt_id:?}",
                    col.name
                ))
            })?;
            maps.push(containment_map(
                &base.bins,
                &alt.bins,
                col.bounds,
                &format!("column {:?}", col.name),
            )?);
        }
        Ok(maps)
    }
}
