//! The eight acceptance criteria: error measures between the transformed
//! dataset (private) and a release candidate (public), each released through
//! a calibrated mechanism and compared against a fixed threshold.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dp::{
    clip, laplace_release, laplace_sigma, Budget, BudgetLedger, ChargeScope, NoiseSource,
    Sensitivity,
};
use crate::error::{Error, Result};
use crate::matching::{beta_max, MatchPredicate, MatchSpec};
use crate::schema::Layout;

/// One conditional-mean criterion: the averaging column, its group-by
/// columns (the ungrouped mean is always evaluated too), threshold and
/// budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanCriterionCfg {
    pub label: String,
    pub column: String,
    pub group_by: Vec<String>,
    pub threshold: f64,
    pub epsilon: Budget,
    /// Imputation constant for undersized groups; defaults to the midpoint
    /// of the column bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impute: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriteriaConfig {
    pub abs_epsilon: Budget,
    /// Threshold on the n-normalized maximal marginal-count error.
    pub abs_threshold: f64,
    pub rel_epsilon: Budget,
    /// Conservative threshold below the clipping cap.
    pub rel_threshold: f64,
    pub rel_lambda: f64,
    pub means: Vec<MeanCriterionCfg>,
    pub lr_target: String,
    pub lr_coef_epsilon: Budget,
    pub lr_coef_threshold: f64,
    pub lr_mae_epsilon: Budget,
    pub lr_mae_threshold: f64,
    pub faithfulness_epsilon: Budget,
    pub faithfulness_threshold: f64,
    pub matching: MatchSpec,
    /// Recompute the private regression inside every selection trial (the
    /// as-released behavior) instead of once before the loop.
    #[serde(default)]
    pub lr_per_iteration: bool,
}

impl CriteriaConfig {
    /// Exact sum of all eight criterion budgets.
    pub fn total_epsilon(&self) -> num::BigRational {
        let mut total = self.abs_epsilon.rational().clone();
        total += self.rel_epsilon.rational();
        for m in &self.means {
            total += m.epsilon.rational();
        }
        total += self.lr_coef_epsilon.rational();
        total += self.lr_mae_epsilon.rational();
        total += self.faithfulness_epsilon.rational();
        total
    }

    pub fn validate(&self, layout: &Layout) -> Result<()> {
        if self.rel_lambda <= 1.0 {
            return Err(Error::Config("rel_lambda must exceed 1".into()));
        }
        for m in &self.means {
            let col = layout.column(&m.column)?;
            if let Some(w) = m.impute {
                let [lo, hi] = layout.columns[col].bounds;
                if w < lo as f64 || w > hi as f64 {
                    return Err(Error::Config(format!(
                        "mean criterion {:?}: impute value {w} outside column bounds",
                        m.label
                    )));
                }
            }
            for g in &m.group_by {
                let gcol = layout.column(g)?;
                if layout.columns[gcol].coarse.is_none() {
                    return Err(Error::Config(format!(
                        "group-by column {g:?} has no coarse table"
                    )));
                }
            }
            if m.threshold <= 0.0 {
                return Err(Error::Config(format!(
                    "mean criterion {:?}: threshold must be positive",
                    m.label
                )));
            }
        }
        layout.column(&self.lr_target)?;
        MatchPredicate::build(layout, &self.matching)?;
        Ok(())
    }
}

/// Public release record for one criterion, mirroring the published table:
/// noised result, threshold, budget, mechanism and its calibration.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionReport {
    pub label: String,
    pub mechanism: &'static str,
    pub epsilon: String,
    pub threshold: f64,
    pub released: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

fn same_shape(r: &Dataset, s: &Dataset) -> Result<()> {
    if r.layout().columns.len() != s.layout().columns.len()
        || r.layout()
            .columns
            .iter()
            .zip(&s.layout().columns)
            .any(|(a, b)| a.name != b.name || a.bins != b.bins)
    {
        return Err(Error::Argument("datasets are on different layouts".into()));
    }
    if r.n() != s.n() {
        return Err(Error::Argument(format!(
            "datasets have different sizes ({} vs {})",
            r.n(),
            s.n()
        )));
    }
    if r.n() == 0 {
        return Err(Error::Argument("criteria need nonempty datasets".into()));
    }
    Ok(())
}

/// Largest n-normalized absolute difference between any marginal count of
/// the two datasets, over every nonempty column subset.
pub fn abs_marginal_error(r: &Dataset, s: &Dataset) -> Result<f64> {
    same_shape(r, s)?;
    let d = r.layout().width();
    if d > 16 {
        return Err(Error::Argument("marginal scan supports up to 16 columns".into()));
    }
    let mut worst: i64 = 0;
    for mask in 1u32..(1 << d) {
        let cols: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let mut diff: std::collections::HashMap<Vec<u8>, i64> = Default::default();
        for (rec, c) in r.iter() {
            let key: Vec<u8> = cols.iter().map(|&i| rec[i]).collect();
            *diff.entry(key).or_insert(0) += c as i64;
        }
        for (rec, c) in s.iter() {
            let key: Vec<u8> = cols.iter().map(|&i| rec[i]).collect();
            *diff.entry(key).or_insert(0) -= c as i64;
        }
        for v in diff.values() {
            worst = worst.max(v.abs());
        }
    }
    Ok(worst as f64 / r.n() as f64)
}

/// Smallest and largest 1-way cell counts of a dataset, over every bin of
/// every column including empty ones.
pub fn one_way_count_extrema(s: &Dataset) -> (u64, u64) {
    let mut s_min = u64::MAX;
    let mut s_max = 0u64;
    for col in 0..s.layout().width() {
        let mut totals = vec![0u64; s.layout().columns[col].bins.len()];
        for (rec, c) in s.iter() {
            totals[rec[col] as usize] += c;
        }
        for t in totals {
            s_min = s_min.min(t);
            s_max = s_max.max(t);
        }
    }
    (s_min, s_max)
}

/// Maximal smoothed 1-way count ratio, each direction clipped to [1, λ].
pub fn rel_one_way_error(r: &Dataset, s: &Dataset, lambda: f64) -> Result<f64> {
    same_shape(r, s)?;
    if lambda <= 1.0 {
        return Err(Error::Argument("lambda must exceed 1".into()));
    }
    let mut worst = 1.0f64;
    for col in 0..r.layout().width() {
        let bins = r.layout().columns[col].bins.len();
        let mut rc = vec![0u64; bins];
        let mut sc = vec![0u64; bins];
        for (rec, c) in r.iter() {
            rc[rec[col] as usize] += c;
        }
        for (rec, c) in s.iter() {
            sc[rec[col] as usize] += c;
        }
        for (rb, sb) in rc.into_iter().zip(sc) {
            let rq = (rb + 1) as f64;
            let sq = (sb + 1) as f64;
            worst = worst
                .max(clip(rq / sq, 1.0, lambda))
                .max(clip(sq / rq, 1.0, lambda));
        }
    }
    Ok(worst)
}

/// Global sensitivity of the clipped relative criterion, from the public
/// minimum 1-way count of the candidate.
pub fn rel_sensitivity(s_min: u64, lambda: f64) -> f64 {
    let a = 1.0 / (s_min as f64 + 1.0);
    let b = lambda - 1.0 / (1.0 / lambda + 1.0 / (s_min as f64 + 1.0));
    a.max(b)
}

/// Threshold below the clipping cap such that a value clipped at λ is pushed
/// under it with probability p by Laplace(η) noise.
pub fn adjusted_threshold(lambda: f64, eta: f64, p: f64) -> Result<f64> {
    if !(lambda > 1.0) {
        return Err(Error::Argument("lambda must exceed 1".into()));
    }
    if !(eta > 0.0) {
        return Err(Error::Argument("eta must be positive".into()));
    }
    if !(p > 0.0 && p <= 0.5) {
        return Err(Error::Argument(
            "p must lie in (0, 1/2]: the bound uses the lower Laplace branch".into(),
        ));
    }
    Ok(lambda + eta * (2.0 * p).ln())
}

/// Mean of a value list resized to `m` entries: exact at m = n, padded with
/// `w` when m > n, and a fixed-randomness subsample when m < n. Values are
/// sorted before index sampling so a record swap moves the sampled sum by at
/// most one value range regardless of which index set was drawn.
pub fn resized_mean(values: &[f64], m: u64, w: f64, noise: &mut NoiseSource) -> Result<f64> {
    if m == 0 {
        return Err(Error::Argument("resize parameter must be at least 1".into()));
    }
    let n = values.len() as u64;
    let sum: f64 = if m >= n {
        values.iter().sum::<f64>() + (m - n) as f64 * w
    } else {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        noise
            .index_subset("resized_mean_sample", sorted.len(), m as usize)
            .into_iter()
            .map(|i| sorted[i])
            .sum()
    };
    Ok(sum / m as f64)
}

#[derive(Debug, Clone)]
pub struct MeanOutcome {
    /// Pre-noise maximal group-mean error.
    pub error: f64,
    /// (U - L) / smallest resize parameter.
    pub delta_max: f64,
    pub m_hat_min: u64,
}

/// Collects the averaging-column numeric value of every row in each coarse
/// group of `gcol`, for both datasets, plus each candidate group's count.
fn group_values(
    r: &Dataset,
    s: &Dataset,
    acol: usize,
    gcol: Option<usize>,
) -> (Vec<Vec<f64>>, Vec<(f64, u64)>) {
    let groups = match gcol {
        Some(g) => r.layout().columns[g]
            .coarse
            .as_ref()
            .expect("validated coarse table")
            .bins
            .len(),
        None => 1,
    };
    let group_of = |rec: &[u8]| -> usize {
        match gcol {
            Some(g) => {
                let coarse = r.layout().columns[g].coarse.as_ref().unwrap();
                coarse.map[rec[g] as usize] as usize
            }
            None => 0,
        }
    };
    let mut r_values: Vec<Vec<f64>> = vec![Vec::new(); groups];
    for (rec, c) in r.iter() {
        let v = r.layout().bin_to_numeric(acol, rec[acol] as usize);
        let g = group_of(rec);
        for _ in 0..c {
            r_values[g].push(v);
        }
    }
    // Candidate side: plain mean and count per group.
    let mut s_sum = vec![0.0f64; groups];
    let mut s_count = vec![0u64; groups];
    for (rec, c) in s.iter() {
        let v = s.layout().bin_to_numeric(acol, rec[acol] as usize);
        let g = group_of(rec);
        s_sum[g] += v * c as f64;
        s_count[g] += c;
    }
    let s_stats = s_sum
        .into_iter()
        .zip(s_count)
        .map(|(sum, c)| (if c == 0 { f64::NAN } else { sum / c as f64 }, c))
        .collect();
    (r_values, s_stats)
}

/// Maximal error between resized means of the private dataset's groups and
/// plain means of the candidate's groups, over the ungrouped mean and every
/// coarse value of every group-by column.
pub fn conditional_mean_error(
    r: &Dataset,
    s: &Dataset,
    cfg: &MeanCriterionCfg,
    t_abs: f64,
    noise: &mut NoiseSource,
) -> Result<MeanOutcome> {
    same_shape(r, s)?;
    let layout = r.layout();
    let acol = layout.column(&cfg.column)?;
    let [lo, hi] = layout.columns[acol].bounds;
    let (lo, hi) = (lo as f64, hi as f64);
    let w = cfg.impute.unwrap_or((lo + hi) / 2.0);
    let n = r.n() as f64;

    let mut worst = 0.0f64;
    let mut m_hat_min = u64::MAX;
    let mut gcols: Vec<Option<usize>> = vec![None];
    for g in &cfg.group_by {
        let gcol = layout.column(g)?;
        if layout.columns[gcol].coarse.is_none() {
            return Err(Error::Config(format!(
                "group-by column {g:?} has no coarse table"
            )));
        }
        gcols.push(Some(gcol));
    }
    for gcol in gcols {
        let (r_groups, s_stats) = group_values(r, s, acol, gcol);
        for (values, (s_mean, s_count)) in r_groups.into_iter().zip(s_stats) {
            // Resize parameter from the candidate's public count, shrunk by
            // the worst marginal slack the first criterion tolerates.
            let m_hat = ((s_count as f64 - n * t_abs).floor() as i64).max(1) as u64;
            m_hat_min = m_hat_min.min(m_hat);
            let r_mean = resized_mean(&values, m_hat, w, noise)?;
            let s_mean = if s_count == 0 { w } else { s_mean };
            worst = worst.max((r_mean - s_mean).abs());
        }
    }
    Ok(MeanOutcome {
        error: worst,
        delta_max: (hi - lo) / m_hat_min as f64,
        m_hat_min,
    })
}

/// Fixed feature encoding for the regression criteria: per-column centering
/// and scale, applied to bin numerics and clipped to [-1, 1], with a leading
/// intercept; the target is mapped to [-1, 1] by its public bounds.
#[derive(Debug, Clone)]
pub struct LrBasis {
    pub feature_cols: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub target_col: usize,
    pub target_bounds: [f64; 2],
}

impl LrBasis {
    /// Centering and scale from the candidate's own statistics (no budget:
    /// the candidate is public).
    pub fn from_candidate(s: &Dataset, target: &str) -> Result<Self> {
        let layout = s.layout();
        let target_col = layout.column(target)?;
        let feature_cols: Vec<usize> =
            (0..layout.width()).filter(|&c| c != target_col).collect();
        let n = s.n() as f64;
        if s.n() == 0 {
            return Err(Error::Argument("empty candidate dataset".into()));
        }
        let mut means = vec![0.0; feature_cols.len()];
        let mut sq = vec![0.0; feature_cols.len()];
        for (rec, c) in s.iter() {
            for (j, &col) in feature_cols.iter().enumerate() {
                let v = layout.bin_to_numeric(col, rec[col] as usize);
                means[j] += v * c as f64;
                sq[j] += v * v * c as f64;
            }
        }
        let mut scales = Vec::with_capacity(feature_cols.len());
        for j in 0..feature_cols.len() {
            means[j] /= n;
            let var = (sq[j] / n - means[j] * means[j]).max(0.0);
            let sd = var.sqrt();
            scales.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        let [lo, hi] = layout.columns[target_col].bounds;
        Ok(LrBasis {
            feature_cols,
            means,
            scales,
            target_col,
            target_bounds: [lo as f64, hi as f64],
        })
    }

    /// Configuration-independent basis from the public column bounds, for
    /// computing the private regression once before the selection loop.
    pub fn from_public_bounds(layout: &Layout, target: &str) -> Result<Self> {
        let target_col = layout.column(target)?;
        let feature_cols: Vec<usize> =
            (0..layout.width()).filter(|&c| c != target_col).collect();
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for &col in &feature_cols {
            let [lo, hi] = layout.columns[col].bounds;
            means.push((lo as f64 + hi as f64) / 2.0);
            let half = (hi as f64 - lo as f64) / 2.0;
            scales.push(if half > 1e-12 { half } else { 1.0 });
        }
        let [lo, hi] = layout.columns[target_col].bounds;
        Ok(LrBasis {
            feature_cols,
            means,
            scales,
            target_col,
            target_bounds: [lo as f64, hi as f64],
        })
    }

    /// Feature dimension including the intercept.
    pub fn dim(&self) -> usize {
        self.feature_cols.len() + 1
    }

    /// Weighted design rows: (features with leading 1, target in original
    /// units, multiplicity). Requires only column-name compatibility so a
    /// pre-loop basis applies to any binning of the same table.
    pub fn rows(&self, d: &Dataset) -> Vec<(Vec<f64>, f64, u64)> {
        let layout = d.layout();
        let mut out = Vec::with_capacity(d.distinct());
        for (rec, c) in d.iter() {
            let mut x = Vec::with_capacity(self.dim());
            x.push(1.0);
            for (j, &col) in self.feature_cols.iter().enumerate() {
                let v = layout.bin_to_numeric(col, rec[col] as usize);
                x.push(clip((v - self.means[j]) / self.scales[j], -1.0, 1.0));
            }
            let y = layout.bin_to_numeric(self.target_col, rec[self.target_col] as usize);
            out.push((x, y, c));
        }
        out
    }

    fn scale_target(&self, y: f64) -> f64 {
        let [lo, hi] = self.target_bounds;
        2.0 * (y - lo) / (hi - lo) - 1.0
    }

    fn unscale_target(&self, t: f64) -> f64 {
        let [lo, hi] = self.target_bounds;
        (t + 1.0) / 2.0 * (hi - lo) + lo
    }
}

/// Solves a x = b by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in (col + 1)..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Normal-equation accumulators on scaled targets: gram = sum w x x^T,
/// moment = sum w y' x.
fn design_sums(basis: &LrBasis, rows: &[(Vec<f64>, f64, u64)]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = basis.dim();
    let mut gram = vec![vec![0.0; d]; d];
    let mut moment = vec![0.0; d];
    for (x, y, c) in rows {
        let wgt = *c as f64;
        let t = basis.scale_target(*y);
        for i in 0..d {
            moment[i] += wgt * t * x[i];
            for j in 0..d {
                gram[i][j] += wgt * x[i] * x[j];
            }
        }
    }
    (gram, moment)
}

/// Exact least squares on the scaled target; coefficients live in the
/// basis's standardized feature space.
pub fn ols(basis: &LrBasis, d: &Dataset) -> Result<Vec<f64>> {
    let rows = basis.rows(d);
    if rows.is_empty() {
        return Err(Error::Argument("regression needs a nonempty dataset".into()));
    }
    let (gram, moment) = design_sums(basis, &rows);
    solve_with_fallback(gram, moment)
        .ok_or_else(|| Error::SingularDesign("least-squares normal matrix is singular".into()))
}

fn solve_with_fallback(gram: Vec<Vec<f64>>, moment: Vec<f64>) -> Option<Vec<f64>> {
    if let Some(w) = solve_linear(gram.clone(), moment.clone()) {
        return Some(w);
    }
    // Tiny ridge keeps the huge-budget limit within test tolerance while
    // rescuing rank-deficient designs.
    let scale = gram
        .iter()
        .enumerate()
        .map(|(i, row)| row[i].abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    let mut ridged = gram;
    for (i, row) in ridged.iter_mut().enumerate() {
        row[i] += 1e-8 * scale;
    }
    solve_linear(ridged, moment)
}

/// L1 sensitivity of the least-squares objective's monomial coefficients
/// when one row is swapped, for features and target in [-1, 1]: y^2
/// contributes 1, the d linear terms 2d, the d^2 quadratic terms d^2, twice.
pub fn functional_mechanism_delta(d: usize) -> f64 {
    2.0 * (1.0 + 2.0 * d as f64 + (d * d) as f64)
}

/// Private least squares via objective perturbation: Laplace noise on every
/// coefficient of the quadratic objective, then an exact minimization. The
/// constant term is budgeted but never materialized; it cannot move the
/// minimizer.
pub fn dp_linear_regression(
    r: &Dataset,
    basis: &LrBasis,
    epsilon: &Budget,
    scope: ChargeScope,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<Vec<f64>> {
    let rows = basis.rows(r);
    if rows.is_empty() {
        return Err(Error::Argument("regression needs a nonempty dataset".into()));
    }
    let eps = epsilon.to_f64();
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Argument(format!(
            "regression requires epsilon > 0, got {epsilon}"
        )));
    }
    let d = basis.dim();
    let delta = functional_mechanism_delta(d);
    let scale = delta / eps;
    let (mut gram, moment) = design_sums(basis, &rows);
    // Objective sum_i (y_i - w.x_i)^2 has linear coefficients -2 moment and
    // quadratic coefficients gram.
    let mut linear: Vec<f64> = moment.iter().map(|m| -2.0 * m).collect();
    for v in linear.iter_mut() {
        *v += noise.laplace("functional_mechanism_linear", scale);
    }
    for row in gram.iter_mut() {
        for v in row.iter_mut() {
            *v += noise.laplace("functional_mechanism_quadratic", scale);
        }
    }
    ledger.charge(
        "lr_coefficients",
        epsilon,
        Some(Sensitivity::new(
            delta,
            format!("objective coefficients, 2(1 + 2d + d^2) at d = {d}"),
        )?),
        "functional",
        scope,
    )?;
    // Minimize w^T gram w + linear . w: (gram + gram^T) w = -linear.
    let mut sym = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            sym[i][j] = gram[i][j] + gram[j][i];
        }
    }
    let rhs: Vec<f64> = linear.iter().map(|v| -v).collect();
    solve_with_fallback(sym, rhs).ok_or_else(|| {
        Error::SingularDesign(format!(
            "perturbed normal matrix is singular (dim {d}, epsilon {epsilon})"
        ))
    })
}

/// L1 distance between two coefficient vectors in the same basis.
pub fn lr_coefficient_error(w_r: &[f64], w_s: &[f64]) -> Result<f64> {
    if w_r.len() != w_s.len() {
        return Err(Error::Argument(format!(
            "coefficient vectors have different lengths ({} vs {})",
            w_r.len(),
            w_s.len()
        )));
    }
    Ok(w_r.iter().zip(w_s).map(|(a, b)| (a - b).abs()).sum())
}

/// Mean absolute error of clipped predictions, in target units.
pub fn lr_mae(basis: &LrBasis, d: &Dataset, w: &[f64]) -> Result<f64> {
    let rows = basis.rows(d);
    if rows.is_empty() {
        return Err(Error::Argument("MAE needs a nonempty dataset".into()));
    }
    if w.len() != basis.dim() {
        return Err(Error::Argument("coefficient length mismatch".into()));
    }
    let [lo, hi] = basis.target_bounds;
    let mut total = 0.0;
    let mut count = 0u64;
    for (x, y, c) in &rows {
        let pred = basis.unscale_target(w.iter().zip(x).map(|(wi, xi)| wi * xi).sum());
        total += (*y - clip(pred, lo, hi)).abs() * *c as f64;
        count += c;
    }
    Ok(total / count as f64)
}

/// Pre-noise gap between the private dataset's MAE under the two models.
pub fn lr_mae_gap(basis: &LrBasis, r: &Dataset, w_r: &[f64], w_s: &[f64]) -> Result<f64> {
    Ok((lr_mae(basis, r, w_r)? - lr_mae(basis, r, w_s)?).abs())
}

/// Fraction of private records left unmatched by the best pairing.
pub fn faithfulness_error(r: &Dataset, s: &Dataset, pred: &MatchPredicate) -> Result<f64> {
    same_shape(r, s)?;
    Ok(1.0 - beta_max(r, s, pred)?)
}

/// Private regression fitted once before the selection loop, reused by every
/// trial.
#[derive(Debug, Clone)]
pub struct FittedLr {
    pub w: Vec<f64>,
    pub basis: LrBasis,
}

/// Fits the pre-loop private regression on the ingestion-binned dataset in
/// the public-bounds basis, charging its budget once outside the loop.
pub fn fit_preloop_lr(
    r: &Dataset,
    cfg: &CriteriaConfig,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<FittedLr> {
    let basis = LrBasis::from_public_bounds(r.layout(), &cfg.lr_target)?;
    let w = dp_linear_regression(
        r,
        &basis,
        &cfg.lr_coef_epsilon,
        ChargeScope::PreLoop,
        noise,
        ledger,
    )?;
    Ok(FittedLr { w, basis })
}

/// Evaluates all eight criteria of one trial and releases their values.
/// `preloop_lr` must be provided unless `lr_per_iteration` is set.
pub fn evaluate_all(
    r: &Dataset,
    s: &Dataset,
    cfg: &CriteriaConfig,
    preloop_lr: Option<&FittedLr>,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<Vec<CriterionReport>> {
    same_shape(r, s)?;
    cfg.validate(r.layout())?;
    let n = r.n() as f64;
    let mut reports = Vec::with_capacity(cfg.means.len() + 5);

    let push_laplace = |label: String,
                            value: f64,
                            delta: Sensitivity,
                            epsilon: &Budget,
                            threshold: f64,
                            range: Option<[f64; 2]>,
                            noise: &mut NoiseSource,
                            ledger: &mut BudgetLedger,
                            reports: &mut Vec<CriterionReport>|
     -> Result<()> {
        let released = laplace_release(
            value,
            &delta,
            epsilon,
            &label,
            ChargeScope::SelectionLoop,
            noise,
            ledger,
        )?;
        reports.push(CriterionReport {
            label,
            mechanism: "laplace",
            epsilon: epsilon.to_string(),
            threshold,
            released,
            pass: released < threshold,
            delta: Some(delta.value),
            sigma: Some(laplace_sigma(delta.value, epsilon.to_f64())),
            range,
        });
        Ok(())
    };

    // 1. Absolute k-way marginal error.
    push_laplace(
        "abs_kway_marginals".into(),
        abs_marginal_error(r, s)?,
        Sensitivity::new(1.0 / n, "one count over n per swapped record")?,
        &cfg.abs_epsilon,
        cfg.abs_threshold,
        Some([0.0, 1.0]),
        noise,
        ledger,
        &mut reports,
    )?;

    // 2. Clipped relative 1-way error; calibration comes from the public
    // candidate's extreme cell counts.
    let (s_min, s_max) = one_way_count_extrema(s);
    if cfg.rel_lambda <= 1.0 + 1.0 / s_max as f64 {
        return Err(Error::Config(format!(
            "rel_lambda must exceed 1 + 1/s_max = {}",
            1.0 + 1.0 / s_max as f64
        )));
    }
    push_laplace(
        "rel_1way_marginals".into(),
        rel_one_way_error(r, s, cfg.rel_lambda)?,
        Sensitivity::new(
            rel_sensitivity(s_min, cfg.rel_lambda),
            format!("clipped ratio formula at s_min = {s_min}"),
        )?,
        &cfg.rel_epsilon,
        cfg.rel_threshold,
        Some([1.0, cfg.rel_lambda]),
        noise,
        ledger,
        &mut reports,
    )?;

    // 3-5. Conditional means.
    for mean_cfg in &cfg.means {
        let outcome = conditional_mean_error(r, s, mean_cfg, cfg.abs_threshold, noise)?;
        let acol = r.layout().column(&mean_cfg.column)?;
        let [lo, hi] = r.layout().columns[acol].bounds;
        push_laplace(
            mean_cfg.label.clone(),
            outcome.error,
            Sensitivity::new(
                outcome.delta_max,
                format!("column range over resize floor {}", outcome.m_hat_min),
            )?,
            &mean_cfg.epsilon,
            mean_cfg.threshold,
            Some([lo as f64, hi as f64]),
            noise,
            ledger,
            &mut reports,
        )?;
    }

    // 6. Coefficient error: the private side comes from the functional
    // mechanism (inside the loop or precomputed), the candidate side is
    // public, so the distance itself needs no further noise.
    let (w_r, basis) = if cfg.lr_per_iteration {
        let basis = LrBasis::from_candidate(s, &cfg.lr_target)?;
        let w = dp_linear_regression(
            r,
            &basis,
            &cfg.lr_coef_epsilon,
            ChargeScope::SelectionLoop,
            noise,
            ledger,
        )?;
        (w, basis)
    } else {
        let fitted = preloop_lr.ok_or_else(|| {
            Error::Argument(
                "pre-loop regression is required unless lr_per_iteration is set".into(),
            )
        })?;
        (fitted.w.clone(), fitted.basis.clone())
    };
    let w_s = ols(&basis, s)?;
    let coef_err = lr_coefficient_error(&w_r, &w_s)?;
    let fm_delta = functional_mechanism_delta(basis.dim());
    reports.push(CriterionReport {
        label: "lr_coefficient".into(),
        mechanism: "functional",
        epsilon: cfg.lr_coef_epsilon.to_string(),
        threshold: cfg.lr_coef_threshold,
        released: coef_err,
        pass: coef_err < cfg.lr_coef_threshold,
        delta: Some(fm_delta),
        sigma: Some(laplace_sigma(fm_delta, cfg.lr_coef_epsilon.to_f64())),
        range: None,
    });

    // 7. Prediction error gap on the private dataset, both models public.
    let [lo, hi] = basis.target_bounds;
    push_laplace(
        "lr_mae".into(),
        lr_mae_gap(&basis, r, &w_r, &w_s)?,
        Sensitivity::new(2.0 * (hi - lo) / n, "two clipped residuals over n")?,
        &cfg.lr_mae_epsilon,
        cfg.lr_mae_threshold,
        Some([lo, hi]),
        noise,
        ledger,
        &mut reports,
    )?;

    // 8. Faithfulness.
    let pred = MatchPredicate::build(r.layout(), &cfg.matching)?;
    push_laplace(
        "faithfulness".into(),
        faithfulness_error(r, s, &pred)?,
        Sensitivity::new(1.0 / n, "one indicator over n per swapped record")?,
        &cfg.faithfulness_epsilon,
        cfg.faithfulness_threshold,
        Some([0.0, 1.0]),
        noise,
        ledger,
        &mut reports,
    )?;

    Ok(reports)
}

pub fn all_pass(reports: &[CriterionReport]) -> bool {
    reports.iter().all(|r| r.pass)
}
