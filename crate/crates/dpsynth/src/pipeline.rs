//! End-to-end release pipeline: cleaning, configuration search, the
//! selection loop, projection, and the final audited bundle.
//!
//! A release run works on one fixed input table. Each trial of the selection
//! loop samples a candidate configuration (binning plan, generator, minimum
//! release count) from the configured space, fits and samples a synthetic
//! dataset of the same size, projects away rare records, and evaluates the
//! acceptance criteria. The loop stops at the first trial where every
//! criterion passes; its output is the release. The returned ledger accounts
//! the whole run at the doubled selection rate.

use std::collections::BTreeMap;
use std::path::Path;

use num::BigRational;
use serde::{Deserialize, Serialize};

use crate::criteria::{self, all_pass, CriteriaConfig, CriterionReport, FittedLr};
use crate::data::{
    bin_raw, filter_raw, CleaningRule, Dataset, FilterReport, RawTable,
};
use crate::dp::{decimal_string, Budget, BudgetLedger, NoiseSource};
use crate::error::{Error, Result};
use crate::projection::project_min_occurrence;
use crate::schema::{Schema, TransformPlan};
use crate::selection::{
    select, SelectionParams, SelectionStatus, Trial,
};
use crate::synth::{self, CompiledConstraints, GeneratorSpec, SyntheticConstraint};

/// Two privacy budgets: `epsilon_x` feeds the generator, `epsilon_q` is
/// split across the acceptance criteria. The run's accounted total is
/// `2 * (epsilon_x + epsilon_q)` plus twice any stopping-coin budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub epsilon_x: Budget,
    pub epsilon_q: Budget,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaGrid {
    pub epsilon_split: Vec<Budget>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegreeGrid {
    pub epsilon_split: Vec<Budget>,
    pub degree: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MwemGrid {
    pub num_query: Vec<usize>,
    pub num_iterations: Vec<usize>,
    pub num_inner_updates: Vec<usize>,
}

/// Which generator families participate in the search, with their
/// hyperparameter grids.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorGrid {
    #[serde(default)]
    pub independent: bool,
    #[serde(default)]
    pub privbayes_theta: Option<ThetaGrid>,
    #[serde(default)]
    pub privbayes_degree: Option<DegreeGrid>,
    #[serde(default)]
    pub mwem: Option<MwemGrid>,
}

/// One point of the configuration space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Configuration {
    pub transform: TransformPlan,
    pub generator: GeneratorSpec,
    pub min_count: u64,
}

impl Configuration {
    pub fn id(&self) -> String {
        format!(
            "{} | {} | min_count={}",
            self.transform.id(),
            self.generator.id(),
            self.min_count
        )
    }
}

/// The space trials sample from. Either an explicit allow list, or the full
/// cartesian product of per-column binning alternatives, generator grid,
/// and minimum-count values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    /// Admissible alternative ids per column; a column left out keeps all
    /// of its schema alternatives.
    #[serde(default)]
    pub transforms: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub generators: GeneratorGrid,
    pub min_count: Vec<u64>,
    /// Pre-narrowed configurations, e.g. from a public tuning run. When
    /// present the grids above are ignored.
    #[serde(default)]
    pub allow_list: Option<Vec<Configuration>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub budget: BudgetConfig,
    pub selection: SelectionParams,
    pub criteria: CriteriaConfig,
    #[serde(default)]
    pub cleaning: Vec<CleaningRule>,
    #[serde(default)]
    pub synthetic_constraints: Vec<SyntheticConstraint>,
    pub space: SpaceConfig,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks the configuration against a schema before any data is touched:
    /// budgets positive, criteria epsilons summing exactly to `epsilon_q`,
    /// every named column resolvable, and a nonempty configuration space.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.budget.epsilon_x.is_zero() {
            return Err(Error::Config("epsilon_x must be positive".into()));
        }
        if self.budget.epsilon_q.is_zero() {
            return Err(Error::Config("epsilon_q must be positive".into()));
        }
        self.selection.validate()?;
        let base = schema.base_layout()?;
        self.criteria.validate(&base)?;
        if self.criteria.total_epsilon() != *self.budget.epsilon_q.rational() {
            return Err(Error::Config(format!(
                "criteria epsilons sum to {}, budget says epsilon_q = {}",
                decimal_string(&self.criteria.total_epsilon()),
                self.budget.epsilon_q
            )));
        }
        CompiledConstraints::compile(&self.synthetic_constraints, &base)?;
        let known: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        for rule in &self.cleaning {
            for atom in &rule.drop_if {
                if !known.contains(&atom.column.as_str()) {
                    return Err(Error::Config(format!(
                        "cleaning rule {:?} names unknown column {:?}",
                        rule.description, atom.column
                    )));
                }
            }
        }
        enumerate_configurations(schema, &self.space)?;
        Ok(())
    }

    /// The exact epsilon the full run is accounted at.
    pub fn accounted_total(&self) -> BigRational {
        let two = BigRational::from_integer(2.into());
        let mut inner =
            self.budget.epsilon_x.rational() + self.budget.epsilon_q.rational();
        if self.selection.gamma > 0.0 {
            inner += self.selection.epsilon_zero.rational();
        }
        two * inner
    }
}

/// Expands the space into the concrete list trials sample from. MWEM points
/// with fewer pool queries than iterations are skipped rather than rejected:
/// the grid is a cross product and such corners are simply not runnable.
pub fn enumerate_configurations(
    schema: &Schema,
    space: &SpaceConfig,
) -> Result<Vec<Configuration>> {
    if let Some(list) = &space.allow_list {
        if list.is_empty() {
            return Err(Error::Config("allow_list is empty".into()));
        }
        for cfg in list {
            schema.layout(&cfg.transform)?;
            cfg.generator.validate()?;
            if cfg.min_count == 0 {
                return Err(Error::Config("min_count must be at least 1".into()));
            }
        }
        return Ok(list.clone());
    }

    if space.min_count.is_empty() || space.min_count.contains(&0) {
        return Err(Error::Config(
            "min_count grid must be nonempty and positive".into(),
        ));
    }

    let mut plans: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
    for col in &schema.columns {
        let ids: Vec<String> = match space.transforms.get(&col.name) {
            Some(sel) => {
                if sel.is_empty() {
                    return Err(Error::Config(format!(
                        "no transform alternatives listed for column {:?}",
                        col.name
                    )));
                }
                for id in sel {
                    if col.alternative(id).is_none() {
                        return Err(Error::Config(format!(
                            "column {:?} has no alternative {:?}",
                            col.name, id
                        )));
                    }
                }
                sel.clone()
            }
            None => col.alternatives.iter().map(|a| a.id.clone()).collect(),
        };
        let mut next = Vec::with_capacity(plans.len() * ids.len());
        for plan in &plans {
            for id in &ids {
                let mut p = plan.clone();
                p.insert(col.name.clone(), id.clone());
                next.push(p);
            }
        }
        plans = next;
    }

    let mut generators = Vec::new();
    if space.generators.independent {
        generators.push(GeneratorSpec::Independent);
    }
    if let Some(grid) = &space.generators.privbayes_theta {
        for split in &grid.epsilon_split {
            for &theta in &grid.theta {
                generators.push(GeneratorSpec::PrivbayesTheta {
                    epsilon_split: split.clone(),
                    theta,
                });
            }
        }
    }
    if let Some(grid) = &space.generators.privbayes_degree {
        for split in &grid.epsilon_split {
            for &degree in &grid.degree {
                generators.push(GeneratorSpec::PrivbayesDegree {
                    epsilon_split: split.clone(),
                    degree,
                });
            }
        }
    }
    if let Some(grid) = &space.generators.mwem {
        for &num_query in &grid.num_query {
            for &num_iterations in &grid.num_iterations {
                if num_query < num_iterations {
                    continue;
                }
                for &num_inner_updates in &grid.num_inner_updates {
                    generators.push(GeneratorSpec::Mwem {
                        num_query,
                        num_iterations,
                        num_inner_updates,
                    });
                }
            }
        }
    }
    if generators.is_empty() {
        return Err(Error::Config("generator grid is empty".into()));
    }
    for g in &generators {
        g.validate()?;
    }

    let mut out =
        Vec::with_capacity(plans.len() * generators.len() * space.min_count.len());
    for plan in &plans {
        for generator in &generators {
            for &min_count in &space.min_count {
                out.push(Configuration {
                    transform: TransformPlan {
                        choices: plan.clone(),
                    },
                    generator: generator.clone(),
                    min_count,
                });
            }
        }
    }
    Ok(out)
}

/// Cleans the raw table and bins it at the schema's base layout. Every
/// trial re-bins from this dataset under its own plan.
pub fn prepare_base(
    schema: &Schema,
    raw: &RawTable,
    cleaning: &[CleaningRule],
) -> Result<(Dataset, FilterReport)> {
    let (clean, report) = filter_raw(raw, cleaning)?;
    let base = bin_raw(&clean, &schema.base_layout()?)?;
    if base.n() == 0 {
        return Err(Error::Data("no records survive cleaning".into()));
    }
    Ok((base, report))
}

/// Runtime failures a candidate configuration can legitimately produce on
/// a given dataset. They burn the trial, not the run.
fn operational(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateModel { .. }
            | Error::ProjectionInfeasible(_)
            | Error::SingularDesign(_)
    )
}

struct TrialRun {
    candidate: Option<(Dataset, Vec<CriterionReport>)>,
    passed: bool,
    ledger: BudgetLedger,
    note: String,
}

/// One trial: re-bin, fit, sample to size n, project, evaluate. Operational
/// failures come back as failed trials carrying whatever was charged before
/// the failure; config and schema errors propagate.
fn run_trial(
    schema: &Schema,
    base: &Dataset,
    cfg: &Configuration,
    pipeline: &PipelineConfig,
    preloop_lr: Option<&FittedLr>,
    noise: &mut NoiseSource,
) -> Result<TrialRun> {
    let id = cfg.id();
    let mut ledger = BudgetLedger::new();
    let fail = |ledger: BudgetLedger, note: String| {
        Ok(TrialRun {
            candidate: None,
            passed: false,
            ledger,
            note,
        })
    };

    let r = base.apply_transform(schema, &cfg.transform)?;
    let constraints =
        CompiledConstraints::compile(&pipeline.synthetic_constraints, r.layout())?;

    let model = match synth::fit(
        &cfg.generator,
        &r,
        &pipeline.budget.epsilon_x,
        noise,
        &mut ledger,
    ) {
        Ok(m) => m,
        Err(e) if operational(&e) => return fail(ledger, format!("{id}: fit: {e}")),
        Err(e) => return Err(e),
    };
    let sampled = match synth::sample_constrained(&model, r.n(), &constraints, noise) {
        Ok(s) => s,
        Err(e) if operational(&e) => {
            return fail(ledger, format!("{id}: sample: {e}"))
        }
        Err(e) => return Err(e),
    };
    let projected = match project_min_occurrence(&sampled, cfg.min_count, noise) {
        Ok(p) => p,
        Err(e) if operational(&e) => {
            return fail(ledger, format!("{id}: project: {e}"))
        }
        Err(e) => return Err(e),
    };
    let reports = match criteria::evaluate_all(
        &r,
        &projected,
        &pipeline.criteria,
        preloop_lr,
        noise,
        &mut ledger,
    ) {
        Ok(reps) => reps,
        Err(e) if operational(&e) => {
            return fail(ledger, format!("{id}: criteria: {e}"))
        }
        Err(e) => return Err(e),
    };

    let passed = all_pass(&reports);
    let note = if passed {
        format!("{id}: all criteria passed")
    } else {
        let failing: Vec<&str> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| r.label.as_str())
            .collect();
        format!("{id}: failed {}", failing.join(", "))
    };
    Ok(TrialRun {
        candidate: Some((projected, reports)),
        passed,
        ledger,
        note,
    })
}

/// A successful run: the released dataset plus everything an auditor needs.
#[derive(Debug)]
pub struct ReleaseBundle {
    pub released: Dataset,
    pub reports: Vec<CriterionReport>,
    pub configuration: Configuration,
    pub ledger: BudgetLedger,
    pub filter: FilterReport,
    pub trials: u64,
    pub audit: Vec<String>,
}

#[derive(Debug)]
pub enum ReleaseOutcome {
    Released(Box<ReleaseBundle>),
    /// The loop stopped without an accepted trial; nothing is released.
    NoRelease {
        status: SelectionStatus,
        trials: u64,
        audit: Vec<String>,
    },
}

/// Runs the whole release pipeline on a raw table.
pub fn run_release(
    schema: &Schema,
    raw: &RawTable,
    pipeline: &PipelineConfig,
    noise: &mut NoiseSource,
) -> Result<ReleaseOutcome> {
    pipeline.validate(schema)?;
    let configs = enumerate_configurations(schema, &pipeline.space)?;
    let (base, filter) = prepare_base(schema, raw, &pipeline.cleaning)?;

    let mut ledger = BudgetLedger::new();
    let preloop_lr = if pipeline.criteria.lr_per_iteration {
        None
    } else {
        Some(criteria::fit_preloop_lr(
            &base,
            &pipeline.criteria,
            noise,
            &mut ledger,
        )?)
    };

    let outcome = select(
        &pipeline.selection,
        noise,
        &mut ledger,
        |_trial, noise| {
            let pick = noise.uniform_index("configuration_choice", configs.len());
            let cfg = &configs[pick];
            let run = run_trial(schema, &base, cfg, pipeline, preloop_lr.as_ref(), noise)?;
            Ok(Trial {
                candidate: run
                    .candidate
                    .map(|(ds, reports)| (ds, reports, cfg.clone())),
                passed: run.passed,
                ledger: run.ledger,
                summary: run.note,
            })
        },
    )?;

    match outcome.status {
        SelectionStatus::Accepted => {
            let (released, reports, configuration) =
                outcome.winner.expect("accepted selection carries a winner");
            verify_release(&released, &base, &reports, &configuration, &ledger, pipeline)?;
            Ok(ReleaseOutcome::Released(Box::new(ReleaseBundle {
                released,
                reports,
                configuration,
                ledger,
                filter,
                trials: outcome.trials,
                audit: outcome.audit,
            })))
        }
        status => Ok(ReleaseOutcome::NoRelease {
            status,
            trials: outcome.trials,
            audit: outcome.audit,
        }),
    }
}

/// Final gate before anything leaves the pipeline. These are internal
/// invariants; a violation is a bug, not an operational failure.
fn verify_release(
    released: &Dataset,
    base: &Dataset,
    reports: &[CriterionReport],
    configuration: &Configuration,
    ledger: &BudgetLedger,
    pipeline: &PipelineConfig,
) -> Result<()> {
    if !all_pass(reports) {
        return Err(Error::Argument(
            "release invariant violated: a failing trial was accepted".into(),
        ));
    }
    if released.n() != base.n() {
        return Err(Error::Argument(format!(
            "release invariant violated: {} released records vs {} input records",
            released.n(),
            base.n()
        )));
    }
    if let Some((_, &c)) = released
        .counts()
        .iter()
        .find(|(_, &c)| c < configuration.min_count)
    {
        return Err(Error::Argument(format!(
            "release invariant violated: a record occurs {c} times, \
             minimum is {}",
            configuration.min_count
        )));
    }
    let expected = pipeline.accounted_total();
    if ledger.total() != expected {
        return Err(Error::Argument(format!(
            "release invariant violated: ledger total {} differs from \
             configured {}",
            decimal_string(&ledger.total()),
            decimal_string(&expected)
        )));
    }
    Ok(())
}

/// Pass rate of one configuration over repeated trials on public data.
#[derive(Debug, Clone, Serialize)]
pub struct TuneRow {
    pub configuration: Configuration,
    pub trials: u64,
    pub passes: u64,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneReport {
    pub floor: f64,
    pub rows: Vec<TuneRow>,
    /// Configurations at or above the floor, ready to paste into a release
    /// config's allow list.
    pub allow_list: Vec<Configuration>,
}

fn mix_seed(seed: u64, config: u64, trial: u64) -> u64 {
    // splitmix64 over the three inputs; decorrelates parallel trials.
    let mut z = seed
        .wrapping_add(config.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(trial.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Estimates every configuration's pass rate on a public stand-in dataset
/// and keeps those at or above `floor`. This run spends no real budget:
/// the data is public, the noise is seeded, the ledgers are discarded.
pub fn tune_on_public(
    schema: &Schema,
    public_base: &Dataset,
    pipeline: &PipelineConfig,
    trials_per_config: u64,
    floor: f64,
    seed: u64,
) -> Result<TuneReport> {
    use rayon::prelude::*;

    if trials_per_config == 0 {
        return Err(Error::Argument("trials_per_config must be positive".into()));
    }
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::Argument(format!(
            "floor must lie in [0, 1], got {floor}"
        )));
    }
    pipeline.validate(schema)?;
    let configs = enumerate_configurations(schema, &pipeline.space)?;

    let rows: Result<Vec<TuneRow>> = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut passes = 0u64;
            for t in 0..trials_per_config {
                let mut noise =
                    NoiseSource::seeded_for_test(mix_seed(seed, i as u64, t));
                let preloop_lr = if pipeline.criteria.lr_per_iteration {
                    None
                } else {
                    let mut scratch = BudgetLedger::new();
                    Some(criteria::fit_preloop_lr(
                        public_base,
                        &pipeline.criteria,
                        &mut noise,
                        &mut scratch,
                    )?)
                };
                let run = run_trial(
                    schema,
                    public_base,
                    cfg,
                    pipeline,
                    preloop_lr.as_ref(),
                    &mut noise,
                )?;
                if run.passed {
                    passes += 1;
                }
            }
            Ok(TuneRow {
                configuration: cfg.clone(),
                trials: trials_per_config,
                passes,
                pass_rate: passes as f64 / trials_per_config as f64,
            })
        })
        .collect();
    let rows = rows?;
    let allow_list = rows
        .iter()
        .filter(|r| r.pass_rate >= floor)
        .map(|r| r.configuration.clone())
        .collect();
    Ok(TuneReport {
        floor,
        rows,
        allow_list,
    })
}

/// Writes the released dataset as one CSV row per record, bin labels as
/// values, rows in a randomized order so the output carries no trace of
/// the internal count table's sort.
pub fn write_release_csv(
    path: impl AsRef<Path>,
    released: &Dataset,
    noise: &mut NoiseSource,
) -> Result<()> {
    let layout = released.layout();
    let mut rows: Vec<Vec<&str>> = Vec::with_capacity(released.n() as usize);
    for (rec, count) in released.iter() {
        let labels: Vec<&str> = rec
            .iter()
            .zip(&layout.columns)
            .map(|(&b, col)| col.bins[b as usize].label.as_str())
            .collect();
        for _ in 0..count {
            rows.push(labels.clone());
        }
    }
    let was_recording = noise.is_recording();
    noise.set_recording(false);
    noise.shuffle("release_row_order", &mut rows);
    noise.set_recording(was_recording);

    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(layout.columns.iter().map(|c| c.name.as_str()))?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// The machine-readable run summary written next to the release CSV.
#[derive(Debug, Serialize)]
pub struct RunMetrics<'a> {
    pub n: u64,
    pub configuration: &'a Configuration,
    pub criteria: &'a [CriterionReport],
    pub epsilon_accounted: String,
    pub epsilon_spent: String,
    pub selection_factor: u32,
    pub trials: u64,
    pub filter: &'a FilterReport,
    pub charges: &'a BudgetLedger,
}

pub fn run_metrics(bundle: &ReleaseBundle) -> RunMetrics<'_> {
    RunMetrics {
        n: bundle.released.n(),
        configuration: &bundle.configuration,
        criteria: &bundle.reports,
        epsilon_accounted: decimal_string(&bundle.ledger.total()),
        epsilon_spent: decimal_string(&bundle.ledger.tight_total()),
        selection_factor: bundle.ledger.selection_factor(),
        trials: bundle.trials,
        filter: &bundle.filter,
        charges: &bundle.ledger,
    }
}
