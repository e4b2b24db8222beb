//! Discrete-event simulation of a single dose-escalation trial.

use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::inference::{fit, InferenceError, ModelSpec, SamplerConfig};
use crate::likelihood::{Dataset, PriorSpecBlrm, PriorSpecTte};
use crate::model::{CyclePlan, DoseGrid, ModelError, PatientRecord};
use crate::policy::{
    assess_doses, check_mtd, select_next_dose, DoseAssessment, EscalationState, EwocThresholds, Method, MtdDecision,
    MtdRule, NextDose,
};
use crate::rng::{derive_seed, stream};
use crate::scenario::{sample_accrual, simulate_patient, DropoutScenario, PatientOutcome, ToxScenario};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("invalid trial configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Priors for the three model families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPriors {
    pub tte: PriorSpecTte,
    pub b1: PriorSpecBlrm,
    pub b3: PriorSpecBlrm,
}

impl ModelPriors {
    pub fn default_for(plan: &CyclePlan) -> Self {
        Self {
            tte: PriorSpecTte::default_for(plan),
            b1: PriorSpecBlrm::one_cycle(),
            b3: PriorSpecBlrm::three_cycle(),
        }
    }

    pub fn model_spec(&self, method: Method, plan: &CyclePlan) -> ModelSpec {
        match method {
            Method::B1 => ModelSpec::Blrm {
                prior: self.b1,
                window_cycles: 1,
            },
            Method::B3 => ModelSpec::Blrm {
                prior: self.b3,
                window_cycles: plan.n_cycles(),
            },
            Method::Tco | Method::Tcu => ModelSpec::Tte(self.tte.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub cohort_size: usize,
    /// Defaults to the second-lowest grid dose.
    pub start_dose: Option<f64>,
    pub max_patients: usize,
    pub accrual_mean_days: f64,
    /// Forbid skipping untested dose levels.
    pub escalation_cap: bool,
    /// Refit once with doubled draws when diagnostics fail.
    pub retry_nonconverged: bool,
    pub mtd: MtdRule,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            cohort_size: 3,
            start_dose: None,
            max_patients: 60,
            accrual_mean_days: 10.0,
            escalation_cap: true,
            retry_nonconverged: true,
            mtd: MtdRule::default(),
        }
    }
}

impl TrialConfig {
    pub fn start_index(&self, grid: &DoseGrid) -> Result<usize, TrialError> {
        match self.start_dose {
            Some(d) => grid
                .index_of(d)
                .ok_or_else(|| TrialError::Config(format!("start dose {d} is not on the grid"))),
            None => Ok(1.min(grid.len() - 1)),
        }
    }

    pub fn validate(&self, grid: &DoseGrid) -> Result<(), TrialError> {
        self.start_index(grid)?;
        if self.cohort_size == 0 {
            return Err(TrialError::Config("cohort_size must be at least 1".into()));
        }
        if self.max_patients < self.cohort_size {
            return Err(TrialError::Config("max_patients must be at least cohort_size".into()));
        }
        if !(self.accrual_mean_days > 0.0) {
            return Err(TrialError::Config("accrual_mean_days must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a trial needs besides the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSetup {
    pub grid: DoseGrid,
    pub plan: CyclePlan,
    pub priors: ModelPriors,
    pub thresholds: EwocThresholds,
    pub sampler: SamplerConfig,
    pub trial: TrialConfig,
}

impl TrialSetup {
    pub fn validate(&self) -> Result<(), TrialError> {
        self.thresholds.validate()?;
        self.trial.validate(&self.grid)?;
        self.sampler.validate()?;
        self.priors.tte.validate(&self.plan)?;
        self.priors.b1.validate()?;
        self.priors.b3.validate()?;
        Ok(())
    }
}

/// Posterior assessment of one dataset, as used at every interim analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub assessments: Vec<DoseAssessment>,
    pub converged: bool,
    pub retried: bool,
    pub max_rhat: f64,
    pub min_ess: f64,
}

pub fn analyze(
    priors: &ModelPriors,
    method: Method,
    data: &Dataset,
    thresholds: &EwocThresholds,
    sampler: &SamplerConfig,
    retry: bool,
) -> Result<Analysis, InferenceError> {
    let model = priors.model_spec(method, &data.plan);
    let mut draws = fit(&model, data, sampler)?;
    let mut retried = false;
    if !draws.converged && retry {
        let doubled = SamplerConfig {
            n_draws: sampler.n_draws * 2,
            ..sampler.clone()
        };
        draws = fit(&model, data, &doubled)?;
        retried = true;
    }
    Ok(Analysis {
        assessments: assess_doses(&draws, method, &data.grid, &data.plan, thresholds),
        converged: draws.converged,
        retried,
        max_rhat: draws.max_rhat(),
        min_ess: draws.min_ess(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dose", rename_all = "snake_case")]
pub enum TrialOutcome {
    Mtd(f64),
    StopToxicity,
    /// Enrollment cap reached without an MTD.
    MaxPatients,
}

impl TrialOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            TrialOutcome::Mtd(_) => "mtd",
            TrialOutcome::StopToxicity => "stop_toxicity",
            TrialOutcome::MaxPatients => "max_patients",
        }
    }

    pub fn mtd_dose(&self) -> Option<f64> {
        match self {
            TrialOutcome::Mtd(d) => Some(*d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrolledPatient {
    pub index: usize,
    pub cohort: usize,
    pub dose_index: usize,
    pub dose: f64,
    pub enroll_time: f64,
    pub outcome: PatientOutcome,
}

impl EnrolledPatient {
    /// Time the patient leaves the study. A DLT is recorded at the end of the
    /// cycle in which it occurs.
    pub fn exit_time(&self, plan: &CyclePlan) -> f64 {
        let o = &self.outcome;
        if o.delta {
            self.enroll_time + o.u_cycles as f64 * plan.cycle_length()
        } else {
            self.enroll_time + o.event_day
        }
    }

    /// Time by which the first `window` cycles are completed or the patient
    /// has left.
    pub fn resolved_at(&self, window: usize, plan: &CyclePlan) -> f64 {
        self.exit_time(plan)
            .min(self.enroll_time + window as f64 * plan.cycle_length())
    }

    /// Data known at calendar time `t`.
    pub fn observed_at(&self, t: f64, plan: &CyclePlan) -> PatientRecord {
        let o = &self.outcome;
        let elapsed = t - self.enroll_time;
        let mut rec = PatientRecord {
            id: self.index.to_string(),
            dose: self.dose,
            enroll_time: self.enroll_time,
            u_cycles: 0,
            delta: false,
            dropout: false,
        };
        if elapsed < 0.0 {
            return rec;
        }
        if t >= self.exit_time(plan) {
            rec.u_cycles = o.u_cycles;
            rec.delta = o.delta;
            rec.dropout = o.dropout;
        } else {
            let completed = ((elapsed + 1e-9) / plan.cycle_length()).floor() as usize;
            rec.u_cycles = completed.min(o.u_cycles);
        }
        rec
    }

    pub fn final_record(&self, plan: &CyclePlan) -> PatientRecord {
        self.observed_at(f64::INFINITY, plan)
    }
}

/// One interim analysis with its inputs and decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub analysis: usize,
    pub time: f64,
    pub sampler_seed: u64,
    pub records: Vec<PatientRecord>,
    pub analysis_result: Analysis,
    pub next_dose: NextDose,
    pub mtd: MtdDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: Method,
    pub seed: u64,
    pub outcome: TrialOutcome,
    pub n_enrolled: usize,
    pub duration_days: f64,
    pub patients: Vec<EnrolledPatient>,
    pub audit: Vec<AuditEntry>,
    /// Analyses whose draws failed diagnostics even after the retry.
    pub nonconverged_fits: usize,
    pub replacement_cohorts: usize,
}

impl TrialResult {
    /// Audit trail as line-delimited JSON.
    pub fn write_audit<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for entry in &self.audit {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

const STREAM_ACCRUAL: u64 = 1;
const STREAM_PATIENT: u64 = 2;
const STREAM_SAMPLER: u64 = 3;

pub fn run_trial(
    setup: &TrialSetup,
    scenario: &ToxScenario,
    dropout: &DropoutScenario,
    method: Method,
    seed: u64,
) -> Result<TrialResult, TrialError> {
    setup.validate()?;
    if scenario.base_hazard.len() != setup.grid.len() || scenario.multipliers.len() != setup.plan.n_cycles() {
        return Err(TrialError::Config("toxicity scenario does not match grid and plan".into()));
    }
    let TrialSetup {
        grid,
        plan,
        priors,
        thresholds,
        sampler,
        trial: cfg,
    } = setup;
    let window = method.decision_window(plan);
    let mut accrual = stream(seed, &[STREAM_ACCRUAL]);
    let mut state = EscalationState::new(grid.len());
    let mut patients: Vec<EnrolledPatient> = Vec::new();
    let mut audit = Vec::new();
    let mut nonconverged = 0;
    let mut replacements = 0;

    let mut dose_index = cfg.start_index(grid)?;
    let mut clock = 0.0;
    let mut cohort = 0;

    let end_of_data = |patients: &[EnrolledPatient]| patients.iter().map(|p| p.exit_time(plan)).fold(0.0, f64::max);

    let outcome = loop {
        // enroll one cohort; the very first patient defines time zero
        let start = patients.len();
        for k in 0..cfg.cohort_size {
            if !(cohort == 0 && k == 0) {
                clock += sample_accrual(&mut accrual, cfg.accrual_mean_days);
            }
            let index = patients.len();
            let mut rng = stream(seed, &[STREAM_PATIENT, index as u64]);
            let outcome = simulate_patient(scenario, dropout, grid, dose_index, plan, &mut rng);
            patients.push(EnrolledPatient {
                index,
                cohort,
                dose_index,
                dose: grid.doses()[dose_index],
                enroll_time: clock,
                outcome,
            });
        }
        state.record_cohort(dose_index, cfg.cohort_size);
        cohort += 1;

        let decision_time = patients
            .iter()
            .map(|p| p.resolved_at(window, plan))
            .fold(clock, f64::max);
        clock = decision_time;

        let cohort_lost = patients[start..]
            .iter()
            .all(|p| p.outcome.dropout && p.outcome.u_cycles < window);
        if cohort_lost {
            if patients.len() + cfg.cohort_size > cfg.max_patients {
                break TrialOutcome::MaxPatients;
            }
            replacements += 1;
            continue;
        }

        let records: Vec<PatientRecord> = patients.iter().map(|p| p.observed_at(decision_time, plan)).collect();
        for (k, n) in state.evaluable.iter_mut().enumerate() {
            *n = records
                .iter()
                .zip(&patients)
                .filter(|(r, p)| p.dose_index == k && crate::likelihood::window_outcome(r, window).is_some())
                .count();
        }
        let data = Dataset::new(records.clone(), grid.clone(), *plan)?;
        let sampler_seed = derive_seed(seed, &[STREAM_SAMPLER, audit.len() as u64]);
        let cfg_fit = SamplerConfig {
            seed: sampler_seed,
            parallel_chains: false,
            ..sampler.clone()
        };
        let analysis = analyze(priors, method, &data, thresholds, &cfg_fit, cfg.retry_nonconverged)?;
        if !analysis.converged {
            nonconverged += 1;
        }
        let next = select_next_dose(&analysis.assessments, &state, grid, cfg.escalation_cap);
        state.recommendations.push(next);
        let mtd = match next {
            NextDose::Dose(d) => check_mtd(&analysis.assessments, &state, d, grid, &cfg.mtd),
            NextDose::StopToxicity => MtdDecision::Continue,
        };
        audit.push(AuditEntry {
            analysis: audit.len(),
            time: decision_time,
            sampler_seed,
            records,
            analysis_result: analysis,
            next_dose: next,
            mtd,
        });
        match (next, mtd) {
            (NextDose::StopToxicity, _) => break TrialOutcome::StopToxicity,
            (_, MtdDecision::Declare(d)) => break TrialOutcome::Mtd(d),
            (NextDose::Dose(d), MtdDecision::Continue) => {
                if patients.len() + cfg.cohort_size > cfg.max_patients {
                    break TrialOutcome::MaxPatients;
                }
                dose_index = grid.index_of(d).expect("selected dose is on the grid");
            }
        }
    };

    let duration_days = match outcome {
        TrialOutcome::StopToxicity => clock,
        _ => end_of_data(&patients).max(clock),
    };
    Ok(TrialResult {
        method,
        seed,
        outcome,
        n_enrolled: patients.len(),
        duration_days,
        patients,
        audit,
        nonconverged_fits: nonconverged,
        replacement_cohorts: replacements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ToxProfile, TruthCurve};

    pub(crate) fn setup() -> TrialSetup {
        let plan = CyclePlan::default();
        TrialSetup {
            grid: DoseGrid::new(vec![10., 20., 40., 80., 160., 320., 640., 1280.], 160.0).unwrap(),
            plan,
            priors: ModelPriors::default_for(&plan),
            thresholds: EwocThresholds::default(),
            sampler: SamplerConfig {
                n_warmup: 400,
                n_draws: 400,
                ess_min: 100.0,
                ..SamplerConfig::default()
            },
            trial: TrialConfig::default(),
        }
    }

    fn constant(setup: &TrialSetup) -> ToxScenario {
        ToxScenario::new(&TruthCurve::default(), &ToxProfile::constant(3), &setup.grid, &setup.plan).unwrap()
    }

    #[test]
    fn no_toxicity_escalates_to_the_top() {
        let s = setup();
        let scn = ToxScenario::from_hazards("none", vec![0.0; 8], vec![1.0; 3]);
        let res = run_trial(&s, &scn, &DropoutScenario::none(), Method::Tcu, 5).unwrap();
        let mtd = res.outcome.mtd_dose().expect("an MTD is declared");
        assert!(mtd >= 640.0, "{mtd}");
        assert!(res.n_enrolled >= 12);
        assert!(res.patients.iter().all(|p| !p.outcome.delta));
    }

    #[test]
    fn certain_toxicity_stops() {
        let s = setup();
        let scn = ToxScenario::from_hazards("toxic", vec![20.0; 8], vec![1.0; 3]);
        for m in Method::ALL {
            let res = run_trial(&s, &scn, &DropoutScenario::none(), m, 9).unwrap();
            assert_eq!(res.outcome, TrialOutcome::StopToxicity, "{m}");
            assert!(res.n_enrolled <= 9, "{m}: {}", res.n_enrolled);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let s = setup();
        let scn = constant(&s);
        let a = run_trial(&s, &scn, &DropoutScenario::none(), Method::Tcu, 42).unwrap();
        let b = run_trial(&s, &scn, &DropoutScenario::none(), Method::Tcu, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trial_bookkeeping() {
        let s = setup();
        let scn = constant(&s);
        let drop = DropoutScenario::flat("55pct", 0.55);
        for (m, seed) in Method::ALL.iter().zip(20u64..) {
            let res = run_trial(&s, &scn, &drop, *m, seed).unwrap();
            assert_eq!(res.n_enrolled % s.trial.cohort_size, 0);
            assert!(res.n_enrolled <= s.trial.max_patients);
            assert!(res.duration_days >= 0.0);
            let times: Vec<f64> = res.audit.iter().map(|a| a.time).collect();
            assert!(times.windows(2).all(|w| w[0] <= w[1]));
            for entry in &res.audit {
                for r in &entry.records {
                    assert!(r.u_cycles <= 3);
                }
            }
            if let TrialOutcome::Mtd(d) = res.outcome {
                let last = res.audit.last().unwrap();
                let a = last.analysis_result.assessments.iter().find(|a| a.dose == d).unwrap();
                assert!(a.ewoc_ok);
            }
            let mut buf = Vec::new();
            res.write_audit(&mut buf).unwrap();
            assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), res.audit.len());
        }
    }

    #[test]
    fn observation_follows_cycle_boundaries() {
        let plan = CyclePlan::default();
        let p = EnrolledPatient {
            index: 0,
            cohort: 0,
            dose_index: 0,
            dose: 10.0,
            enroll_time: 5.0,
            outcome: PatientOutcome {
                u_cycles: 2,
                delta: true,
                dropout: false,
                event_day: 60.0,
            },
        };
        assert_eq!(p.exit_time(&plan), 89.0);
        assert_eq!(p.observed_at(46.9, &plan).u_cycles, 0);
        assert_eq!(p.observed_at(47.0, &plan).u_cycles, 1);
        let r = p.observed_at(88.0, &plan);
        assert_eq!((r.u_cycles, r.delta), (1, false));
        let r = p.observed_at(89.0, &plan);
        assert_eq!((r.u_cycles, r.delta), (2, true));
        assert_eq!(p.resolved_at(1, &plan), 47.0);

        let d = EnrolledPatient {
            outcome: PatientOutcome {
                u_cycles: 0,
                delta: false,
                dropout: true,
                event_day: 30.0,
            },
            ..p
        };
        assert_eq!(d.resolved_at(1, &plan), 35.0);
        let r = d.observed_at(200.0, &plan);
        assert_eq!((r.u_cycles, r.dropout), (0, true));
    }
}
