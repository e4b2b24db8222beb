//! Escalation with overdose control for single- and multi-cycle risk, dose
//! selection and MTD declaration.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::inference::{ModelKind, PosteriorDraws};
use crate::model::{blrm_dlt_probability, CyclePlan, DoseGrid, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwocThresholds {
    /// Overdose boundary on the DLT probability scale.
    pub pi_c: f64,
    /// Maximal admissible posterior probability of overdosing.
    pub p_c: f64,
    /// Lower edge of the target band.
    pub target_low: f64,
}

impl Default for EwocThresholds {
    fn default() -> Self {
        Self {
            pi_c: 0.33,
            p_c: 0.25,
            target_low: 0.16,
        }
    }
}

impl EwocThresholds {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.target_low > 0.0
            && self.target_low < self.pi_c
            && self.pi_c < 1.0
            && self.p_c > 0.0
            && self.p_c < 1.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidPlan(
                "thresholds need 0 < target_low < pi_c < 1 and 0 < p_c < 1".into(),
            ))
        }
    }
}

/// The four dose-escalation designs compared in the simulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Logistic model on a one-cycle DLT window.
    B1,
    /// Logistic model on a three-cycle DLT window.
    B3,
    /// Time-to-DLT model, EWOC on every conditional per-cycle risk.
    #[serde(rename = "TCO")]
    Tco,
    /// Time-to-DLT model, EWOC on the cumulative risk over all cycles.
    #[serde(rename = "TCU")]
    Tcu,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::B1, Method::B3, Method::Tco, Method::Tcu];

    /// Cycles every enrolled patient must resolve before an analysis.
    pub fn decision_window(&self, plan: &CyclePlan) -> usize {
        match self {
            Method::B3 => plan.n_cycles(),
            _ => 1,
        }
    }

    pub fn is_time_to_event(&self) -> bool {
        matches!(self, Method::Tco | Method::Tcu)
    }

    pub fn metric(&self) -> RiskMetric {
        match self {
            Method::B1 => RiskMetric::FirstCycle,
            Method::B3 | Method::Tcu => RiskMetric::Cumulative,
            Method::Tco => RiskMetric::PerCycleConditional,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::B1 => "B1",
            Method::B3 => "B3",
            Method::Tco => "TCO",
            Method::Tcu => "TCU",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "B1" => Ok(Method::B1),
            "B3" => Ok(Method::B3),
            "TCO" => Ok(Method::Tco),
            "TCU" => Ok(Method::Tcu),
            other => Err(format!("unknown method `{other}` (expected B1, B3, TCO or TCU)")),
        }
    }
}

/// Risk scale on which the bands and EWOC are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMetric {
    FirstCycle,
    Cumulative,
    /// Bands use the largest conditional per-cycle risk.
    PerCycleConditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseAssessment {
    pub dose: f64,
    pub p_under: f64,
    pub p_target: f64,
    pub p_over: f64,
    pub ewoc_ok: bool,
    pub metric: RiskMetric,
}

fn band_counts(values: impl Iterator<Item = f64>, t: &EwocThresholds) -> (usize, usize, usize) {
    let mut under = 0;
    let mut target = 0;
    let mut over = 0;
    for v in values {
        if v < t.target_low {
            under += 1;
        } else if v <= t.pi_c {
            target += 1;
        } else {
            over += 1;
        }
    }
    (under, target, over)
}

/// Monte Carlo band and EWOC summaries for every grid dose.
///
/// Logistic draws are read on their own window; time-to-DLT draws are read as
/// cumulative risk (TCU) or as the per-cycle conditional risks (TCO).
pub fn assess_doses(
    draws: &PosteriorDraws,
    method: Method,
    grid: &DoseGrid,
    plan: &CyclePlan,
    thresholds: &EwocThresholds,
) -> Vec<DoseAssessment> {
    let n = draws.n_draws();
    let metric = method.metric();
    let mut out = Vec::with_capacity(grid.len());
    match draws.kind {
        ModelKind::Blrm { .. } => {
            let params: Vec<_> = (0..n).map(|i| draws.blrm_params(i)).collect();
            for &dose in grid.doses() {
                let (u, t, o) = band_counts(params.iter().map(|p| blrm_dlt_probability(p, dose, grid)), thresholds);
                let ok = (o as f64 / n as f64) < thresholds.p_c;
                out.push(finish(dose, u, t, o, n, ok, metric));
            }
        }
        ModelKind::Tte { n_cycles } => {
            let delta = plan.cycle_length();
            let per_draw: Vec<(f64, f64, Vec<f64>)> = (0..n)
                .map(|i| {
                    let p = draws.tte_params(i);
                    let bg = crate::model::background_log_hazards(&p, n_cycles)
                        .into_iter()
                        .map(f64::exp)
                        .collect();
                    (p.alpha1, p.beta1(), bg)
                })
                .collect();
            let mut cycle_over = vec![0usize; n_cycles];
            let mut band_values = Vec::with_capacity(n);
            for &dose in grid.doses() {
                let x = grid.log_relative(dose);
                cycle_over.iter_mut().for_each(|c| *c = 0);
                band_values.clear();
                for (a1, beta, bg) in &per_draw {
                    let drug = (a1 + beta * x).exp();
                    let mut total_h = 0.0;
                    let mut max_q: f64 = 0.0;
                    for (j, b) in bg.iter().enumerate() {
                        let h = drug + b;
                        total_h += h;
                        let q = -(-h * delta).exp_m1();
                        if q > thresholds.pi_c {
                            cycle_over[j] += 1;
                        }
                        max_q = max_q.max(q);
                    }
                    band_values.push(match metric {
                        RiskMetric::PerCycleConditional => max_q,
                        _ => -(-total_h * delta).exp_m1(),
                    });
                }
                let (u, t, o) = band_counts(band_values.iter().copied(), thresholds);
                let ewoc_ok = match metric {
                    RiskMetric::PerCycleConditional => cycle_over
                        .iter()
                        .all(|c| (*c as f64 / n as f64) < thresholds.p_c),
                    _ => (o as f64 / n as f64) < thresholds.p_c,
                };
                out.push(finish(dose, u, t, o, n, ewoc_ok, metric));
            }
        }
    }
    out
}

fn finish(dose: f64, u: usize, t: usize, o: usize, n: usize, ewoc_ok: bool, metric: RiskMetric) -> DoseAssessment {
    let n = n as f64;
    DoseAssessment {
        dose,
        p_under: u as f64 / n,
        p_target: t as f64 / n,
        p_over: o as f64 / n,
        ewoc_ok,
        metric,
    }
}

/// Per-dose bookkeeping across the trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationState {
    pub enrolled: Vec<usize>,
    pub evaluable: Vec<usize>,
    pub highest_administered: Option<usize>,
    /// Dose index given to each cohort, in order.
    pub cohort_doses: Vec<usize>,
    pub recommendations: Vec<NextDose>,
}

impl EscalationState {
    pub fn new(n_doses: usize) -> Self {
        Self {
            enrolled: vec![0; n_doses],
            evaluable: vec![0; n_doses],
            highest_administered: None,
            cohort_doses: Vec::new(),
            recommendations: Vec::new(),
        }
    }

    pub fn record_cohort(&mut self, dose_index: usize, size: usize) {
        self.enrolled[dose_index] += size;
        self.cohort_doses.push(dose_index);
        self.highest_administered = Some(self.highest_administered.map_or(dose_index, |h| h.max(dose_index)));
    }

    pub fn last_cohort_dose(&self) -> Option<usize> {
        self.cohort_doses.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextDose {
    Dose(f64),
    StopToxicity,
}

/// Highest-target-probability dose among the EWOC-eligible doses, capped at
/// one level above the highest dose given so far when `escalation_cap` is set.
pub fn select_next_dose(
    assessments: &[DoseAssessment],
    state: &EscalationState,
    grid: &DoseGrid,
    escalation_cap: bool,
) -> NextDose {
    let cap = if escalation_cap {
        state.highest_administered.map_or(0, |h| (h + 1).min(grid.len() - 1))
    } else {
        grid.len() - 1
    };
    let mut best: Option<&DoseAssessment> = None;
    for a in assessments.iter().filter(|a| a.ewoc_ok) {
        let Some(idx) = grid.index_of(a.dose) else {
            continue;
        };
        if idx > cap {
            continue;
        }
        // ties go to the higher dose
        if best.is_none_or(|b| a.p_target > b.p_target || (a.p_target == b.p_target && a.dose > b.dose)) {
            best = Some(a);
        }
    }
    best.map_or(NextDose::StopToxicity, |a| NextDose::Dose(a.dose))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtdRule {
    pub min_patients_consistent: usize,
    pub min_patients_ewoc: usize,
    pub target_probability: f64,
    /// Require the selected dose to equal the most recent cohort's dose for the
    /// first branch.
    pub require_unchanged: bool,
}

impl Default for MtdRule {
    fn default() -> Self {
        Self {
            min_patients_consistent: 6,
            min_patients_ewoc: 12,
            target_probability: 0.5,
            require_unchanged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtdDecision {
    Declare(f64),
    Continue,
}

pub fn check_mtd(
    assessments: &[DoseAssessment],
    state: &EscalationState,
    next_dose: f64,
    grid: &DoseGrid,
    rule: &MtdRule,
) -> MtdDecision {
    let (Some(idx), Some(a)) = (grid.index_of(next_dose), assessments.iter().find(|a| a.dose == next_dose)) else {
        return MtdDecision::Continue;
    };
    let treated = state.enrolled[idx];
    let unchanged = !rule.require_unchanged || state.last_cohort_dose() == Some(idx);
    let consistent = treated >= rule.min_patients_consistent && unchanged && a.p_target > rule.target_probability;
    let saturated = treated >= rule.min_patients_ewoc && a.ewoc_ok;
    if consistent || saturated {
        MtdDecision::Declare(next_dose)
    } else {
        MtdDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthCategory {
    Underdose,
    Target,
    Overdose,
}

impl TruthCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            TruthCategory::Underdose => "underdose",
            TruthCategory::Target => "target",
            TruthCategory::Overdose => "overdose",
        }
    }
}

pub fn classify_truth(probability: f64, thresholds: &EwocThresholds) -> TruthCategory {
    if probability < thresholds.target_low {
        TruthCategory::Underdose
    } else if probability <= thresholds.pi_c {
        TruthCategory::Target
    } else {
        TruthCategory::Overdose
    }
}
