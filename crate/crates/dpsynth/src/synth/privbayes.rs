//! Bayesian-network generator: a private structure chosen by repeated
//! exponential-mechanism selections scored by mutual information, then one
//! noisy joint marginal per node, sampled ancestrally.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::{Dataset, Record};
use crate::dp::{
    exponential_mechanism, Budget, BudgetLedger, ChargeScope, NoiseSource, Sensitivity,
};
use crate::error::{Error, Result};
use crate::schema::Layout;

use super::independent::sample_cdf;

/// Parent-set admission rule.
pub enum Flavor {
    /// Keep marginals useful: |dom(X)| x |dom(parents)| may not exceed
    /// n epsilon_2 / (2 d theta). The empty set is always admitted.
    Theta(f64),
    /// At most this many parents.
    Degree(usize),
}

/// Split fractions must leave both phases a positive budget.
pub fn validate_split(split: &Budget) -> Result<()> {
    let v = split.rational();
    let zero = num::BigRational::from_integer(0.into());
    let one = num::BigRational::from_integer(1.into());
    if *v <= zero || *v >= one {
        return Err(Error::Config(format!(
            "epsilon_split must lie strictly between 0 and 1, got {split}"
        )));
    }
    Ok(())
}

/// Mutual information in bits between a column and a parent set, from the
/// dataset's empirical distribution.
pub fn mutual_information_bits(data: &Dataset, x: usize, parents: &[usize]) -> f64 {
    let n = data.n() as f64;
    let mut joint: BTreeMap<(u8, Vec<u8>), u64> = BTreeMap::new();
    let mut px: BTreeMap<u8, u64> = BTreeMap::new();
    let mut pp: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for (rec, c) in data.iter() {
        let key: Vec<u8> = parents.iter().map(|&p| rec[p]).collect();
        *joint.entry((rec[x], key.clone())).or_insert(0) += c;
        *px.entry(rec[x]).or_insert(0) += c;
        *pp.entry(key).or_insert(0) += c;
    }
    let mut info = 0.0;
    for ((xb, key), &c) in &joint {
        let cx = px[xb] as f64;
        let cp = pp[key] as f64;
        info += (c as f64 / n) * ((c as f64 * n) / (cx * cp)).log2();
    }
    info.max(0.0)
}

/// Worst-case mutual-information change under one record swap when either
/// side of the pair is binary.
pub fn mi_sensitivity_binary(n: u64) -> f64 {
    let n = n as f64;
    (1.0 / n) * n.log2() + ((n - 1.0) / n) * (n / (n - 1.0)).log2()
}

/// Worst-case mutual-information change under one record swap, general
/// domains.
pub fn mi_sensitivity_general(n: u64) -> f64 {
    let n = n as f64;
    (2.0 / n) * ((n + 1.0) / 2.0).log2() + ((n - 1.0) / n) * ((n + 1.0) / (n - 1.0)).log2()
}

pub fn mi_sensitivity(n: u64, dom_x: u128, dom_parents: u128) -> f64 {
    if dom_x <= 2 || dom_parents <= 2 {
        mi_sensitivity_binary(n)
    } else {
        mi_sensitivity_general(n)
    }
}

struct Node {
    column: usize,
    parents: Vec<usize>,
    strides: Vec<usize>,
    /// [parent_combo][x_bin] conditional CDF.
    table: Vec<Vec<f64>>,
}

pub struct BayesNetModel {
    layout: Arc<Layout>,
    nodes: Vec<Node>,
}

fn dom(layout: &Layout, col: usize) -> u128 {
    layout.columns[col].bins.len() as u128
}

fn dom_product(layout: &Layout, cols: &[usize]) -> u128 {
    cols.iter().map(|&c| dom(layout, c)).product()
}

fn admissible_parent_sets(
    layout: &Layout,
    used: &[usize],
    dom_x: u128,
    flavor: &Flavor,
    capacity: f64,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << used.len()) {
        let set: Vec<usize> = used
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &c)| c)
            .collect();
        let admit = match flavor {
            Flavor::Theta(_) => {
                set.is_empty()
                    || (dom_x * dom_product(layout, &set)) as f64 <= capacity
            }
            Flavor::Degree(k) => set.len() <= *k,
        };
        if admit {
            out.push(set);
        }
    }
    out
}

/// Noisy conditional table for one node: Laplace on the full joint
/// frequency vector, clamped and renormalized per parent combination.
fn noisy_conditional(
    data: &Dataset,
    x: usize,
    parents: &[usize],
    scale: f64,
    noise: &mut NoiseSource,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let layout = data.layout();
    let dom_x = dom(layout, x) as usize;
    let combos = dom_product(layout, parents);
    if combos.saturating_mul(dom_x as u128) > 10_000_000 {
        return Err(Error::Argument(format!(
            "joint marginal for column {x} has {combos} x {dom_x} cells"
        )));
    }
    let combos = combos as usize;
    let mut strides = vec![0usize; parents.len()];
    let mut acc = 1usize;
    for (i, &p) in parents.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dom(layout, p) as usize;
    }
    let n = data.n() as f64;
    let mut freq = vec![vec![0.0f64; dom_x]; combos];
    for (rec, c) in data.iter() {
        let combo: usize = parents
            .iter()
            .zip(&strides)
            .map(|(&p, s)| rec[p] as usize * s)
            .sum();
        freq[combo][rec[x] as usize] += c as f64 / n;
    }
    // Noise lands on every frequency cell, including structural zeros.
    let mut table = Vec::with_capacity(combos);
    for row in freq.iter_mut() {
        for v in row.iter_mut() {
            *v += noise.laplace("privbayes_marginal", scale);
        }
        super::independent::normalize_or_uniform(row);
        let mut cum = 0.0;
        let cdf: Vec<f64> = row
            .iter()
            .map(|p| {
                cum += p;
                cum
            })
            .collect();
        let mut cdf = cdf;
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        table.push(cdf);
    }
    Ok((strides, table))
}

pub fn fit(
    data: &Dataset,
    epsilon_x: &Budget,
    split: &Budget,
    flavor: &Flavor,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<BayesNetModel> {
    validate_split(split)?;
    let layout = Arc::clone(data.layout());
    let d = layout.width();
    if d < 2 {
        return Err(Error::Argument(
            "bayesian network needs at least two columns".into(),
        ));
    }
    if data.n() < 2 {
        return Err(Error::Argument(
            "mutual-information calibration needs at least two records".into(),
        ));
    }
    let n = data.n();
    let eps1 = epsilon_x.times(split);
    let eps2 = epsilon_x.minus(&eps1)?;
    let eps_step = eps1.div_int((d - 1) as u64)?.to_f64();
    let eps2_f = eps2.to_f64();
    let capacity = match flavor {
        Flavor::Theta(theta) => n as f64 * eps2_f / (2.0 * d as f64 * theta),
        Flavor::Degree(_) => f64::INFINITY,
    };

    // Structure: a uniformly random root, then d - 1 selections.
    let first = noise.uniform_index("privbayes_first_attribute", d);
    let mut structure: Vec<(usize, Vec<usize>)> = vec![(first, Vec::new())];
    let mut used = vec![first];
    while used.len() < d {
        let mut candidates: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut scores = Vec::new();
        let mut delta = 0.0f64;
        for x in 0..d {
            if used.contains(&x) {
                continue;
            }
            let dom_x = dom(&layout, x);
            for set in admissible_parent_sets(&layout, &used, dom_x, flavor, capacity) {
                scores.push(mutual_information_bits(data, x, &set));
                delta = delta.max(mi_sensitivity(n, dom_x, dom_product(&layout, &set)));
                candidates.push((x, set));
            }
        }
        let pick =
            exponential_mechanism(&scores, eps_step, delta, "privbayes_structure", noise)?;
        let (x, set) = candidates.swap_remove(pick);
        used.push(x);
        structure.push((x, set));
    }
    ledger.charge(
        "privbayes_structure",
        &eps1,
        None,
        "exponential",
        ChargeScope::SelectionLoop,
    )?;

    // One joint marginal per node at epsilon_2 / d each.
    let scale = 2.0 * d as f64 / (n as f64 * eps2_f);
    let mut nodes = Vec::with_capacity(d);
    for (x, parents) in structure {
        let (strides, table) = noisy_conditional(data, x, &parents, scale, noise)?;
        nodes.push(Node {
            column: x,
            parents,
            strides,
            table,
        });
    }
    ledger.charge(
        "privbayes_marginals",
        &eps2,
        Some(Sensitivity::new(
            2.0 / n as f64,
            format!("joint frequency vector per node, {d} nodes at epsilon/{d} each"),
        )?),
        "laplace",
        ChargeScope::SelectionLoop,
    )?;
    Ok(BayesNetModel { layout, nodes })
}

impl BayesNetModel {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Sampling-order view of the structure, for inspection and tests.
    pub fn structure(&self) -> Vec<(usize, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.column, n.parents.clone()))
            .collect()
    }

    pub fn sample_record(&self, noise: &mut NoiseSource) -> Record {
        let mut rec = vec![0u8; self.layout.width()];
        for node in &self.nodes {
            let combo: usize = node
                .parents
                .iter()
                .zip(&node.strides)
                .map(|(&p, s)| rec[p] as usize * s)
                .sum();
            rec[node.column] = sample_cdf(&node.table[combo], noise.uniform("privbayes_sample"));
        }
        rec
    }
}
