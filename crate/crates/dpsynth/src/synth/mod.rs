//! Generative model families. Fitting spends the model budget exactly once
//! per trial; sampling is pure post-processing.

pub mod independent;
pub mod mwem;
pub mod privbayes;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::dp::{Budget, BudgetLedger, NoiseSource};
use crate::error::{Error, Result};
use crate::schema::Layout;

/// One generator family with its hyperparameters, as written in the
/// configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Independent per-column noisy marginals.
    Independent,
    /// Bayesian network; parent sets limited by the usefulness ratio theta.
    PrivbayesTheta { epsilon_split: Budget, theta: f64 },
    /// Bayesian network; parent sets limited to a fixed in-degree.
    PrivbayesDegree { epsilon_split: Budget, degree: usize },
    /// Multiplicative weights over a random pool of 2-way marginal cells.
    Mwem {
        num_query: usize,
        num_iterations: usize,
        num_inner_updates: usize,
    },
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorSpec::Independent => Ok(()),
            GeneratorSpec::PrivbayesTheta { epsilon_split, theta } => {
                privbayes::validate_split(epsilon_split)?;
                if !(theta.is_finite() && *theta > 0.0) {
                    return Err(Error::Config(format!(
                        "theta must be positive, got {theta}"
                    )));
                }
                Ok(())
            }
            GeneratorSpec::PrivbayesDegree { epsilon_split, degree } => {
                privbayes::validate_split(epsilon_split)?;
                if *degree == 0 {
                    return Err(Error::Config("degree must be at least 1".into()));
                }
                Ok(())
            }
            GeneratorSpec::Mwem {
                num_query,
                num_iterations,
                num_inner_updates,
            } => {
                if *num_query == 0 || *num_iterations == 0 || *num_inner_updates == 0 {
                    return Err(Error::Config(
                        "mwem parameters must all be at least 1".into(),
                    ));
                }
                if num_query < num_iterations {
                    return Err(Error::Config(format!(
                        "query pool ({num_query}) smaller than iteration count \
                         ({num_iterations}) wastes selection rounds"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Compact label for audit lines and metrics.
    pub fn id(&self) -> String {
        match self {
            GeneratorSpec::Independent => "independent".into(),
            GeneratorSpec::PrivbayesTheta { epsilon_split, theta } => {
                format!("privbayes_theta(split={epsilon_split},theta={theta})")
            }
            GeneratorSpec::PrivbayesDegree { epsilon_split, degree } => {
                format!("privbayes_degree(split={epsilon_split},degree={degree})")
            }
            GeneratorSpec::Mwem {
                num_query,
                num_iterations,
                num_inner_updates,
            } => format!(
                "mwem(queries={num_query},iterations={num_iterations},inner={num_inner_updates})"
            ),
        }
    }
}

/// A fitted model ready for ancestral or direct sampling.
pub enum FittedModel {
    Independent(independent::IndependentModel),
    Bayes(privbayes::BayesNetModel),
    Mwem(mwem::MwemModel),
}

impl FittedModel {
    pub fn layout(&self) -> &Arc<Layout> {
        match self {
            FittedModel::Independent(m) => m.layout(),
            FittedModel::Bayes(m) => m.layout(),
            FittedModel::Mwem(m) => m.layout(),
        }
    }

    pub fn sample_record(&self, noise: &mut NoiseSource) -> Record {
        match self {
            FittedModel::Independent(m) => m.sample_record(noise),
            FittedModel::Bayes(m) => m.sample_record(noise),
            FittedModel::Mwem(m) => m.sample_record(noise),
        }
    }
}

/// Fits the requested family on the transformed dataset, spending exactly
/// `epsilon_x` through the ledger.
pub fn fit(
    spec: &GeneratorSpec,
    data: &Dataset,
    epsilon_x: &Budget,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
) -> Result<FittedModel> {
    spec.validate()?;
    if data.n() == 0 {
        return Err(Error::Argument("cannot fit a model on an empty dataset".into()));
    }
    if epsilon_x.is_zero() {
        return Err(Error::Config("model budget must be positive".into()));
    }
    match spec {
        GeneratorSpec::Independent => Ok(FittedModel::Independent(independent::fit(
            data, epsilon_x, noise, ledger,
        )?)),
        GeneratorSpec::PrivbayesTheta { epsilon_split, theta } => {
            Ok(FittedModel::Bayes(privbayes::fit(
                data,
                epsilon_x,
                epsilon_split,
                &privbayes::Flavor::Theta(*theta),
                noise,
                ledger,
            )?))
        }
        GeneratorSpec::PrivbayesDegree { epsilon_split, degree } => {
            Ok(FittedModel::Bayes(privbayes::fit(
                data,
                epsilon_x,
                epsilon_split,
                &privbayes::Flavor::Degree(*degree),
                noise,
                ledger,
            )?))
        }
        GeneratorSpec::Mwem {
            num_query,
            num_iterations,
            num_inner_updates,
        } => Ok(FittedModel::Mwem(mwem::fit(
            data,
            epsilon_x,
            *num_query,
            *num_iterations,
            *num_inner_updates,
            noise,
            ledger,
        )?)),
    }
}

/// One comparison on a column: a record's bin certainly satisfies the atom
/// when every value in its effective range does.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintAtom {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above: Option<i64>,
}

/// A conjunction of atoms describing impossible records; sampled records
/// certainly violating one are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConstraint {
    pub description: String,
    pub forbid_if: Vec<ConstraintAtom>,
}

/// Constraints lowered onto a layout: per atom, a flag for each bin of its
/// column marking certain satisfaction.
#[derive(Debug, Clone, Default)]
pub struct CompiledConstraints {
    rules: Vec<Vec<(usize, Vec<bool>)>>,
}

impl CompiledConstraints {
    pub fn none() -> Self {
        CompiledConstraints::default()
    }

    pub fn compile(constraints: &[SyntheticConstraint], layout: &Layout) -> Result<Self> {
        let mut rules = Vec::with_capacity(constraints.len());
        for c in constraints {
            if c.forbid_if.is_empty() {
                return Err(Error::Config(format!(
                    "constraint {:?} has no atoms",
                    c.description
                )));
            }
            let mut atoms = Vec::with_capacity(c.forbid_if.len());
            for atom in &c.forbid_if {
                let col = layout.column(&atom.column)?;
                let bounds = layout.columns[col].bounds;
                let flags: Vec<bool> = layout.columns[col]
                    .bins
                    .iter()
                    .map(|bin| {
                        let (lo, hi) = bin.effective_range(bounds);
                        match (atom.below, atom.above) {
                            (Some(v), None) => hi < v,
                            (None, Some(v)) => lo > v,
                            _ => false,
                        }
                    })
                    .collect();
                match (atom.below, atom.above) {
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => {
                        return Err(Error::Config(format!(
                            "constraint {:?}: atom on {:?} must set exactly one of \
                             below/above",
                            c.description, atom.column
                        )))
                    }
                }
                atoms.push((col, flags));
            }
            rules.push(atoms);
        }
        Ok(CompiledConstraints { rules })
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// True when every atom of some rule is certainly satisfied.
    pub fn violates(&self, rec: &[u8]) -> bool {
        self.rules
            .iter()
            .any(|atoms| atoms.iter().all(|(col, flags)| flags[rec[*col] as usize]))
    }
}

/// Draws below this fraction of acceptances in one window abort sampling.
pub const ACCEPTANCE_FLOOR: f64 = 1e-3;
/// Window length, in raw draws, over which the floor is checked.
pub const ACCEPTANCE_WINDOW: u64 = 100_000;

/// Rejection-samples exactly `n` records satisfying the constraints.
/// Per-record draws are not written to the audit transcript.
pub fn sample_constrained(
    model: &FittedModel,
    n: u64,
    constraints: &CompiledConstraints,
    noise: &mut NoiseSource,
) -> Result<Dataset> {
    let mut out = Dataset::new(Arc::clone(model.layout()));
    let was_recording = noise.is_recording();
    noise.set_recording(false);
    let result = (|| {
        let mut accepted = 0u64;
        let mut window_drawn = 0u64;
        let mut window_accepted = 0u64;
        while accepted < n {
            let rec = model.sample_record(noise);
            window_drawn += 1;
            if !constraints.violates(&rec) {
                out.add(rec, 1);
                accepted += 1;
                window_accepted += 1;
            }
            if window_drawn == ACCEPTANCE_WINDOW {
                if (window_accepted as f64)
                    < ACCEPTANCE_FLOOR * ACCEPTANCE_WINDOW as f64
                {
                    return Err(Error::DegenerateModel {
                        accepted: window_accepted,
                        window: ACCEPTANCE_WINDOW,
                    });
                }
                window_drawn = 0;
                window_accepted = 0;
            }
        }
        Ok(())
    })();
    noise.set_recording(was_recording);
    result.map(|()| out)
}
