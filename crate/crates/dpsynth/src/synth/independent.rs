//! Baseline generator: each column is an independent categorical
//! distribution estimated from its noisy 1-way counts.

use std::sync::Arc;

use crate::data::{Dataset, Record};
use crate::dp::{Budget, BudgetLedger, ChargeScope, NoiseSource, Sensitivity};
use crate::error::Result;
use crate::schema::Layout;

pub struct IndependentModel {
    layout: Arc<Layout>,
    /// Per-column cumulative probabilities; the last entry is 1.
    cdfs: Vec<Vec<f64>>,
}

/// Clamps negatives and normalizes to a probability vector, falling back to
/// uniform when nothing positive survives.
pub(crate) fn normalize_or_uniform(v: &mut [f64]) {
    let mut total = 0.0;
    for x in v.iter_mut() {
        if !(*x > 0.0) {
            *x = 0.0;
        }
        total += *x;
    }
    if total > 0.0 {
        for x in v.iter_mut() {
            *x /= total;
        }
    } else {
        let p = 1.0 / v.len() as f64;
        for x in v.iter_mut() {
            *x = p;
        }
    }
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(probs.len());
    for p in probs {
        acc += p;
        out.push(acc);
    }
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

pub(crate) fn sample_cdf(cdf: &[f64], u: f64) -> u8 {
    cdf.iter().position(|&c| u <= c).unwrap_or(cdf.len() - 1) as u8
}

pub fn fit(
    data: &Dataset,
    epsilon_x: &Budget,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<IndependentModel> {
    let layout = Arc::clone(data.layout());
    let d = layout.width();
    let eps_col = epsilon_x.div_int(d as u64)?.to_f64();
    // Swapping one record moves two counts of each column by one.
    let scale = 2.0 / eps_col;
    let mut cdfs = Vec::with_capacity(d);
    for col in 0..d {
        let mut counts = vec![0.0f64; layout.columns[col].bins.len()];
        for (rec, c) in data.iter() {
            counts[rec[col] as usize] += c as f64;
        }
        for v in counts.iter_mut() {
            *v += noise.laplace("independent_counts", scale);
        }
        normalize_or_uniform(&mut counts);
        cdfs.push(cumulative(&counts));
    }
    ledger.charge(
        "independent_marginals",
        epsilon_x,
        Some(Sensitivity::new(
            2.0,
            format!("1-way count vector per column, {d} columns at epsilon/{d} each"),
        )?),
        "laplace",
        ChargeScope::SelectionLoop,
    )?;
    Ok(IndependentModel { layout, cdfs })
}

impl IndependentModel {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn sample_record(&self, noise: &mut NoiseSource) -> Record {
        self.cdfs
            .iter()
            .map(|cdf| sample_cdf(cdf, noise.uniform("independent_sample")))
            .collect()
    }
}
