//! Private selection over repeated trials: a base mechanism is rerun until a
//! trial passes every criterion, with an optional random stopping coin. The
//! released trial costs twice the per-trial budget plus the coin budget,
//! however many trials ran.

use crate::dp::{Budget, BudgetLedger, ChargeScope, NoiseSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionParams {
    /// Probability of halting with no release after each failed trial.
    /// Zero selects the run-until-success variant.
    pub gamma: f64,
    /// Budget consumed by the stopping coins; must be zero when gamma is.
    pub epsilon_zero: Budget,
    /// Hard trial cap. With gamma = 0 this is an operational failsafe whose
    /// exhaustion is reported, never silently released. With gamma > 0 it is
    /// part of the mechanism and must reach `min_trial_bound`.
    pub max_trials: u64,
}

/// Smallest admissible trial cap for a positive stopping probability.
pub fn min_trial_bound(gamma: f64, epsilon_zero: f64) -> f64 {
    let a = (2.0 / epsilon_zero).ln() / gamma;
    let b = 1.0 + 1.0 / (std::f64::consts::E * gamma);
    a.max(b)
}

/// Upper bound on the expected number of trials when each passes
/// independently with probability `p1`.
pub fn expected_trials_bound(p1: f64, gamma: f64) -> f64 {
    1.0 / (p1 * (1.0 - gamma) + gamma)
}

/// Upper bound on the probability of halting with no release.
pub fn abort_probability_bound(p1: f64, gamma: f64, epsilon_zero: f64) -> f64 {
    ((1.0 - p1) * (1.0 + epsilon_zero / 2.0) / p1) * gamma
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.max_trials == 0 {
            return Err(Error::Config("max_trials must be at least 1".into()));
        }
        if self.gamma == 0.0 {
            if !self.epsilon_zero.is_zero() {
                return Err(Error::Config(
                    "epsilon_zero must be 0 when gamma is 0: no stopping coins \
                     are flipped"
                        .into(),
                ));
            }
        } else {
            if self.epsilon_zero.is_zero() {
                return Err(Error::Config(
                    "a positive gamma requires a positive epsilon_zero".into(),
                ));
            }
            let need = min_trial_bound(self.gamma, self.epsilon_zero.to_f64());
            if (self.max_trials as f64) < need {
                return Err(Error::Config(format!(
                    "max_trials = {} is below the admissible bound {:.2} for \
                     gamma = {} and epsilon_zero = {}",
                    self.max_trials, need, self.gamma, self.epsilon_zero
                )));
            }
        }
        Ok(())
    }
}

/// The outcome of one base-mechanism invocation.
pub struct Trial<T> {
    /// Candidate release; may be absent on failed trials.
    pub candidate: Option<T>,
    /// Whether every criterion passed (score reached the threshold).
    pub passed: bool,
    /// Privacy spent by this trial alone.
    pub ledger: BudgetLedger,
    /// One human-readable line for the audit log.
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStatus {
    /// A trial passed and its candidate is released.
    Accepted,
    /// The stopping coin halted the run; nothing is released.
    CoinStop,
    /// The operational trial cap ran out; nothing is released.
    CapExhausted,
}

pub struct SelectionOutcome<T> {
    pub status: SelectionStatus,
    pub winner: Option<T>,
    pub trials: u64,
    pub audit: Vec<String>,
}

/// Runs trials until one passes, the coin stops the run, or the cap is hit.
///
/// Exactly one trial's charges are merged into `ledger` (the accepted one,
/// or the most expensive seen when nothing is released) and the selection
/// factor is set to two; with a positive gamma the coin budget is charged
/// once outside the doubled loop. `total()` doubles even that charge and so
/// overstates; `tight_total()` is exact.
pub fn select<T>(
    params: &SelectionParams,
    noise: &mut NoiseSource,
    ledger: &mut BudgetLedger,
    mut trial_fn: impl FnMut(u64, &mut NoiseSource) -> Result<Trial<T>>,
) -> Result<SelectionOutcome<T>> {
    params.validate()?;
    let mut audit = Vec::new();
    let mut fallback: Option<BudgetLedger> = None;
    let mut trials = 0u64;
    let outcome = loop {
        trials += 1;
        let trial = trial_fn(trials, noise)?;
        audit.push(format!(
            "trial {trials}: {} {}",
            if trial.passed { "pass" } else { "fail" },
            trial.summary
        ));
        if trial.passed {
            if trial.candidate.is_none() {
                return Err(Error::Argument(
                    "a passing trial must carry a candidate".into(),
                ));
            }
            ledger.merge(trial.ledger);
            break SelectionOutcome {
                status: SelectionStatus::Accepted,
                winner: trial.candidate,
                trials,
                audit: Vec::new(),
            };
        }
        // Remember the most expensive failed trial for honest accounting
        // when nothing is released.
        let better = match &fallback {
            Some(prev) => trial.ledger.total() > prev.total(),
            None => true,
        };
        if better {
            fallback = Some(trial.ledger);
        }
        if params.gamma > 0.0 && noise.uniform("selection_stop_coin") < params.gamma {
            audit.push(format!("stopped by coin after trial {trials}"));
            break SelectionOutcome {
                status: SelectionStatus::CoinStop,
                winner: None,
                trials,
                audit: Vec::new(),
            };
        }
        if trials >= params.max_trials {
            audit.push(format!("trial cap {} exhausted", params.max_trials));
            break SelectionOutcome {
                status: SelectionStatus::CapExhausted,
                winner: None,
                trials,
                audit: Vec::new(),
            };
        }
    };
    if outcome.status != SelectionStatus::Accepted {
        if let Some(l) = fallback {
            ledger.merge(l);
        }
    }
    ledger.set_selection_factor(2);
    if params.gamma > 0.0 {
        ledger.charge(
            "selection_stop_coins",
            &params.epsilon_zero,
            None,
            "stopping_coin",
            ChargeScope::PreLoop,
        )?;
    }
    Ok(SelectionOutcome { audit, ..outcome })
}
