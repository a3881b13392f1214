//! Multiplicative-weights generator: a dense distribution over the record
//! universe, refined by privately selected and measured 2-way marginal
//! cells; every past measurement is replayed in the update sweeps.

use std::sync::Arc;

use crate::data::{Dataset, Record};
use crate::dp::{
    exponential_mechanism, Budget, BudgetLedger, ChargeScope, NoiseSource, Sensitivity,
};
use crate::error::{Error, Result};
use crate::schema::Layout;

/// Dense weight vectors above this many cells are refused.
pub const MAX_UNIVERSE: u128 = 20_000_000;

/// Counting query: records with `col_a` in `bin_a` and `col_b` in `bin_b`.
/// Columns are kept in ascending order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarginalQuery {
    pub col_a: usize,
    pub bin_a: u8,
    pub col_b: usize,
    pub bin_b: u8,
}

impl MarginalQuery {
    fn matches(&self, rec: &[u8]) -> bool {
        rec[self.col_a] == self.bin_a && rec[self.col_b] == self.bin_b
    }
}

struct UniverseShape {
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl UniverseShape {
    fn new(layout: &Layout) -> Result<Self> {
        let size = layout.universe_size();
        if size > MAX_UNIVERSE {
            return Err(Error::Argument(format!(
                "record universe has {size} cells, above the dense-weight limit \
                 of {MAX_UNIVERSE}"
            )));
        }
        let dims: Vec<usize> = layout.columns.iter().map(|c| c.bins.len()).collect();
        let mut strides = vec![0usize; dims.len()];
        let mut acc = 1usize;
        for i in (0..dims.len()).rev() {
            strides[i] = acc;
            acc *= dims[i];
        }
        Ok(UniverseShape { dims, strides })
    }

    fn size(&self) -> usize {
        self.dims.iter().product()
    }

    fn decode(&self, mut idx: usize) -> Record {
        self.strides
            .iter()
            .map(|&s| {
                let b = idx / s;
                idx %= s;
                b as u8
            })
            .collect()
    }

    /// Sum of weights over the cells matching a query, by iterating the free
    /// columns only.
    fn sum_matching(&self, w: &[f64], q: &MarginalQuery) -> f64 {
        let base = q.bin_a as usize * self.strides[q.col_a]
            + q.bin_b as usize * self.strides[q.col_b];
        let free: Vec<usize> = (0..self.dims.len())
            .filter(|&c| c != q.col_a && c != q.col_b)
            .collect();
        let mut total = 0.0;
        let mut counter = vec![0usize; free.len()];
        loop {
            let idx = base
                + free
                    .iter()
                    .zip(&counter)
                    .map(|(&c, &b)| b * self.strides[c])
                    .sum::<usize>();
            total += w[idx];
            // Mixed-radix increment over the free columns.
            let mut pos = free.len();
            loop {
                if pos == 0 {
                    return total;
                }
                pos -= 1;
                counter[pos] += 1;
                if counter[pos] < self.dims[free[pos]] {
                    break;
                }
                counter[pos] = 0;
            }
        }
    }

    /// Multiplies matching cells by `factor`, returning the change in total
    /// weight.
    fn scale_matching(&self, w: &mut [f64], q: &MarginalQuery, factor: f64) -> f64 {
        let base = q.bin_a as usize * self.strides[q.col_a]
            + q.bin_b as usize * self.strides[q.col_b];
        let free: Vec<usize> = (0..self.dims.len())
            .filter(|&c| c != q.col_a && c != q.col_b)
            .collect();
        let mut delta = 0.0;
        let mut counter = vec![0usize; free.len()];
        loop {
            let idx = base
                + free
                    .iter()
                    .zip(&counter)
                    .map(|(&c, &b)| b * self.strides[c])
                    .sum::<usize>();
            let before = w[idx];
            w[idx] = before * factor;
            delta += w[idx] - before;
            let mut pos = free.len();
            loop {
                if pos == 0 {
                    return delta;
                }
                pos -= 1;
                counter[pos] += 1;
                if counter[pos] < self.dims[free[pos]] {
                    break;
                }
                counter[pos] = 0;
            }
        }
    }
}

pub struct MwemModel {
    layout: Arc<Layout>,
    shape: UniverseShape,
    /// Cumulative weights over the universe; the final entry is the total.
    cum: Vec<f64>,
}

pub fn fit(
    data: &Dataset,
    epsilon_x: &Budget,
    num_query: usize,
    num_iterations: usize,
    num_inner_updates: usize,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<MwemModel> {
    let layout = Arc::clone(data.layout());
    let d = layout.width();
    if d < 2 {
        return Err(Error::Argument(
            "2-way marginal queries need at least two columns".into(),
        ));
    }
    let shape = UniverseShape::new(&layout)?;
    let n = data.n() as f64;

    // Random query pool; duplicates are harmless and re-selection is legal.
    let mut pool = Vec::with_capacity(num_query);
    for _ in 0..num_query {
        let a = noise.uniform_index("mwem_query_pool", d);
        let off = noise.uniform_index("mwem_query_pool", d - 1);
        let b = if off >= a { off + 1 } else { off };
        let (col_a, col_b) = (a.min(b), a.max(b));
        pool.push(MarginalQuery {
            col_a,
            bin_a: noise.uniform_index("mwem_query_pool", shape.dims[col_a]) as u8,
            col_b,
            bin_b: noise.uniform_index("mwem_query_pool", shape.dims[col_b]) as u8,
        });
    }
    let answers: Vec<f64> = pool
        .iter()
        .map(|q| {
            data.iter()
                .filter(|(rec, _)| q.matches(rec))
                .map(|(_, c)| c as f64)
                .sum()
        })
        .collect();

    let t_total = num_iterations as f64;
    let eps_x = epsilon_x.to_f64();
    let eps_select = eps_x / (2.0 * t_total);
    let measure_scale = 2.0 * t_total / eps_x;

    let size = shape.size();
    let mut w = vec![n / size as f64; size];
    // Running total keeps updates cheap; the array is renormalized to n once
    // per iteration.
    let mut total = n;
    let mut history: Vec<(MarginalQuery, f64)> = Vec::with_capacity(num_iterations);
    for _ in 0..num_iterations {
        let scores: Vec<f64> = pool
            .iter()
            .zip(&answers)
            .map(|(q, a)| (shape.sum_matching(&w, q) * (n / total) - a).abs())
            .collect();
        let pick = exponential_mechanism(&scores, eps_select, 1.0, "mwem_select", noise)?;
        let query = pool[pick];
        let measured = answers[pick] + noise.laplace("mwem_measure", measure_scale);
        history.push((query, measured));
        for _ in 0..num_inner_updates {
            for (q, m) in &history {
                let current = shape.sum_matching(&w, q) * (n / total);
                let factor = ((m - current) / (2.0 * n)).exp();
                total += shape.scale_matching(&mut w, q, factor);
            }
        }
        let rescale = n / total;
        for v in w.iter_mut() {
            *v *= rescale;
        }
        total = n;
    }

    let half = epsilon_x.div_int(2)?;
    ledger.charge(
        "mwem_selection",
        &half,
        None,
        "exponential",
        ChargeScope::SelectionLoop,
    )?;
    ledger.charge(
        "mwem_measurements",
        &half,
        Some(Sensitivity::new(
            1.0,
            format!("counting query per round, {num_iterations} rounds"),
        )?),
        "laplace",
        ChargeScope::SelectionLoop,
    )?;

    let mut cum = Vec::with_capacity(size);
    let mut acc = 0.0;
    for v in &w {
        acc += v;
        cum.push(acc);
    }
    Ok(MwemModel { layout, shape, cum })
}

impl MwemModel {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn sample_record(&self, noise: &mut NoiseSource) -> Record {
        let total = *self.cum.last().expect("nonempty universe");
        let u = noise.uniform("mwem_sample") * total;
        let idx = self.cum.partition_point(|&c| c < u);
        self.shape.decode(idx.min(self.cum.len() - 1))
    }

    /// Model marginal fractions over a column set, for inspection and tests.
    pub fn marginal_fractions(&self, cols: &[usize]) -> std::collections::BTreeMap<Vec<u8>, f64> {
        let total = *self.cum.last().expect("nonempty universe");
        let mut out = std::collections::BTreeMap::new();
        let mut prev = 0.0;
        for (idx, &c) in self.cum.iter().enumerate() {
            let weight = c - prev;
            prev = c;
            let rec = self.shape.decode(idx);
            let key: Vec<u8> = cols.iter().map(|&i| rec[i]).collect();
            *out.entry(key).or_insert(0.0) += weight / total;
        }
        out
    }
}
