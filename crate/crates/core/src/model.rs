//! Domain types and hazard arithmetic for the piecewise-constant compound
//! event process.
//!
//! Time is measured in days. A patient's follow-up is split into `J` cycles of
//! equal length `Δ`; within cycle `j` the DLT hazard is constant and equals the
//! sum of a dose-dependent drug hazard `h₁` and a dose-independent background
//! hazard `h₂,j` that may drift monotonically across cycles.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityDomain(f64),
    #[error("dose grid must be non-empty, positive and strictly increasing")]
    InvalidGrid,
    #[error("reference dose must be positive, got {0}")]
    InvalidReferenceDose(f64),
    #[error("invalid cycle plan: {0}")]
    InvalidPlan(String),
    #[error("simplex of length {got} does not match {expected} cycle transitions")]
    SimplexLength { expected: usize, got: usize },
    #[error("simplex components must be non-negative and sum to one")]
    NotASimplex,
    #[error("invalid patient record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

/// Complementary log-log link, `log(-log(1 - p))`.
pub fn cloglog(p: f64) -> Result<f64, ModelError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ModelError::ProbabilityDomain(p));
    }
    Ok((-(-p).ln_1p()).ln())
}

pub fn inv_cloglog(x: f64) -> f64 {
    -(-x.exp()).exp_m1()
}

pub fn logit(p: f64) -> Result<f64, ModelError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ModelError::ProbabilityDomain(p));
    }
    Ok((p / (1.0 - p)).ln())
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Ordered dose levels (mg) with the reference dose used to centre the slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    doses: Vec<f64>,
    reference_dose: f64,
}

impl DoseGrid {
    pub fn new(doses: Vec<f64>, reference_dose: f64) -> Result<Self, ModelError> {
        if doses.is_empty()
            || doses.iter().any(|d| !(d.is_finite() && *d > 0.0))
            || doses.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ModelError::InvalidGrid);
        }
        if !(reference_dose.is_finite() && reference_dose > 0.0) {
            return Err(ModelError::InvalidReferenceDose(reference_dose));
        }
        Ok(Self {
            doses,
            reference_dose,
        })
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn reference_dose(&self) -> f64 {
        self.reference_dose
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    /// Index of `dose` in the grid (exact match).
    pub fn index_of(&self, dose: f64) -> Option<usize> {
        self.doses.iter().position(|d| *d == dose)
    }

    /// `log(dose / d̃)`, the covariate multiplying the slope.
    pub fn log_relative(&self, dose: f64) -> f64 {
        (dose / self.reference_dose).ln()
    }
}

/// Number and length of treatment cycles plus the reference cycle `j̃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclePlan {
    n_cycles: usize,
    cycle_length: f64,
    reference_cycle: usize,
}

impl CyclePlan {
    pub fn new(n_cycles: usize, cycle_length: f64, reference_cycle: usize) -> Result<Self, ModelError> {
        if n_cycles == 0 {
            return Err(ModelError::InvalidPlan("need at least one cycle".into()));
        }
        if !(cycle_length.is_finite() && cycle_length > 0.0) {
            return Err(ModelError::InvalidPlan(format!(
                "cycle length must be positive, got {cycle_length}"
            )));
        }
        if reference_cycle == 0 || reference_cycle > n_cycles {
            return Err(ModelError::InvalidPlan(format!(
                "reference cycle {reference_cycle} outside 1..={n_cycles}"
            )));
        }
        Ok(Self {
            n_cycles,
            cycle_length,
            reference_cycle,
        })
    }

    pub fn n_cycles(&self) -> usize {
        self.n_cycles
    }

    pub fn cycle_length(&self) -> f64 {
        self.cycle_length
    }

    pub fn reference_cycle(&self) -> usize {
        self.reference_cycle
    }

    /// Reference time `t̃ = j̃·Δ` in days.
    pub fn reference_time(&self) -> f64 {
        self.reference_cycle as f64 * self.cycle_length
    }

    /// Total follow-up `J·Δ` in days.
    pub fn horizon(&self) -> f64 {
        self.n_cycles as f64 * self.cycle_length
    }
}

impl Default for CyclePlan {
    fn default() -> Self {
        Self {
            n_cycles: 3,
            cycle_length: 42.0,
            reference_cycle: 3,
        }
    }
}

/// Parameters of the time-to-DLT model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TteParams {
    pub alpha1: f64,
    pub log_beta1: f64,
    pub alpha2: f64,
    pub gamma2: f64,
    /// Fraction of the background cycle effect attained at each transition;
    /// length `J - 1`, on the simplex.
    pub xi: Vec<f64>,
}

impl TteParams {
    pub fn new(
        alpha1: f64,
        log_beta1: f64,
        alpha2: f64,
        gamma2: f64,
        xi: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let params = Self {
            alpha1,
            log_beta1,
            alpha2,
            gamma2,
            xi,
        };
        params.validate_simplex()?;
        Ok(params)
    }

    pub fn beta1(&self) -> f64 {
        self.log_beta1.exp()
    }

    fn validate_simplex(&self) -> Result<(), ModelError> {
        if self.xi.is_empty() {
            return Ok(());
        }
        let sum: f64 = self.xi.iter().sum();
        if self.xi.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(ModelError::NotASimplex);
        }
        Ok(())
    }

    pub fn check_plan(&self, plan: &CyclePlan) -> Result<(), ModelError> {
        let expected = plan.n_cycles() - 1;
        if self.xi.len() != expected {
            return Err(ModelError::SimplexLength {
                expected,
                got: self.xi.len(),
            });
        }
        self.validate_simplex()
    }
}

/// Parameters of the two-component logistic comparator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlrmParams {
    pub alpha1: f64,
    pub log_beta1: f64,
    pub alpha2: f64,
}

impl BlrmParams {
    pub fn beta1(&self) -> f64 {
        self.log_beta1.exp()
    }
}

/// Whether the background-treatment component contributes to the event
/// process. `Excluded` gives the single-agent model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Background {
    #[default]
    Included,
    Excluded,
}

/// One patient's observed follow-up at the time of an analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub dose: f64,
    pub enroll_time: f64,
    /// Completed cycles, or the cycle in which the DLT occurred.
    pub u_cycles: usize,
    /// `true` when follow-up ended in a DLT.
    pub delta: bool,
    /// `true` when censoring came from dropout rather than the data cut-off.
    pub dropout: bool,
}

impl PatientRecord {
    pub fn validate(&self, plan: &CyclePlan) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if !(self.dose.is_finite() && self.dose > 0.0) {
            return Err(fail(format!("dose must be positive, got {}", self.dose)));
        }
        if self.u_cycles > plan.n_cycles() {
            return Err(fail(format!(
                "u_cycles = {} exceeds {} cycles",
                self.u_cycles,
                plan.n_cycles()
            )));
        }
        if self.delta && self.u_cycles == 0 {
            return Err(fail("a DLT needs u_cycles >= 1".into()));
        }
        Ok(())
    }
}

/// Per-cycle hazards (1/day) for a single dose.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleHazards {
    pub drug: f64,
    pub background: Vec<f64>,
}

impl CycleHazards {
    pub fn n_cycles(&self) -> usize {
        self.background.len()
    }

    pub fn total(&self, cycle: usize) -> f64 {
        self.drug + self.background[cycle]
    }

    pub fn totals(&self) -> impl Iterator<Item = f64> + '_ {
        self.background.iter().map(move |b| self.drug + b)
    }

    /// Build directly from total per-cycle hazards (no drug/background split).
    pub fn from_totals(totals: Vec<f64>) -> Self {
        Self {
            drug: 0.0,
            background: totals,
        }
    }
}

/// Log background hazard per cycle: `α₂ + (J-1)·γ₂·Σ_{l<j} ξ_l`.
pub fn background_log_hazards(params: &TteParams, n_cycles: usize) -> Vec<f64> {
    let scale = (n_cycles as f64 - 1.0) * params.gamma2;
    let mut cum = 0.0;
    (0..n_cycles)
        .map(|j| {
            if j > 0 {
                cum += params.xi[j - 1];
            }
            params.alpha2 + scale * cum
        })
        .collect()
}

pub fn cycle_hazards(params: &TteParams, dose: f64, grid: &DoseGrid, plan: &CyclePlan) -> CycleHazards {
    cycle_hazards_with(params, dose, grid, plan, Background::Included)
}

pub fn cycle_hazards_with(
    params: &TteParams,
    dose: f64,
    grid: &DoseGrid,
    plan: &CyclePlan,
    background: Background,
) -> CycleHazards {
    debug_assert!(dose > 0.0);
    let drug = (params.alpha1 + params.beta1() * grid.log_relative(dose)).exp();
    let background = match background {
        Background::Included => background_log_hazards(params, plan.n_cycles())
            .into_iter()
            .map(f64::exp)
            .collect(),
        Background::Excluded => vec![0.0; plan.n_cycles()],
    };
    CycleHazards { drug, background }
}

/// Cumulative hazard, survivor and event density at the end of each cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalTable {
    pub cumulative_hazard: Vec<f64>,
    pub survivor: Vec<f64>,
    pub density: Vec<f64>,
}

impl SurvivalTable {
    /// `S_j` with the convention `S_0 = 1`.
    pub fn survivor_at(&self, cycle: usize) -> f64 {
        if cycle == 0 {
            1.0
        } else {
            self.survivor[cycle - 1]
        }
    }
}

pub fn survivor_and_density(hazards: &CycleHazards, plan: &CyclePlan) -> SurvivalTable {
    let n = hazards.n_cycles();
    let mut cumulative_hazard = Vec::with_capacity(n);
    let mut survivor = Vec::with_capacity(n);
    let mut density = Vec::with_capacity(n);
    let mut big_h = 0.0;
    for h in hazards.totals() {
        big_h += plan.cycle_length() * h;
        let s = (-big_h).exp();
        cumulative_hazard.push(big_h);
        survivor.push(s);
        density.push(h * s);
    }
    SurvivalTable {
        cumulative_hazard,
        survivor,
        density,
    }
}

/// Conditional per-cycle DLT probabilities and the cumulative probability over
/// all cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct EventProbabilities {
    pub conditional: Vec<f64>,
    pub cumulative: f64,
}

impl EventProbabilities {
    pub fn max_conditional(&self) -> f64 {
        self.conditional.iter().copied().fold(0.0, f64::max)
    }
}

pub fn event_probabilities(hazards: &CycleHazards, plan: &CyclePlan) -> EventProbabilities {
    let delta = plan.cycle_length();
    let conditional = hazards.totals().map(|h| -(-h * delta).exp_m1()).collect();
    let big_h: f64 = hazards.totals().map(|h| h * delta).sum();
    EventProbabilities {
        conditional,
        cumulative: -(-big_h).exp_m1(),
    }
}

pub fn blrm_dlt_probability(params: &BlrmParams, dose: f64, grid: &DoseGrid) -> f64 {
    blrm_dlt_probability_with(params, dose, grid, Background::Included)
}

pub fn blrm_dlt_probability_with(
    params: &BlrmParams,
    dose: f64,
    grid: &DoseGrid,
    background: Background,
) -> f64 {
    let p_drug = inv_logit(params.alpha1 + params.beta1() * grid.log_relative(dose));
    match background {
        Background::Included => {
            let p_bg = inv_logit(params.alpha2);
            1.0 - (1.0 - p_drug) * (1.0 - p_bg)
        }
        Background::Excluded => p_drug,
    }
}
