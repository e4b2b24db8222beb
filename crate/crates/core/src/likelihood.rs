//! Log-likelihoods and log-priors for the time-to-DLT model and the
//! fixed-window logistic comparators.
//!
//! The samplers evaluate the likelihood through [`TteStats`] / [`BlrmStats`],
//! which collapse the data to per-dose, per-cycle counts. The per-record
//! functions [`log_likelihood_tte`] and [`log_likelihood_blrm`] are the direct
//! transcriptions and are used to cross-check the collapsed forms.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::model::{
    cloglog, cycle_hazards, logit, survivor_and_density, BlrmParams, CyclePlan, DoseGrid, ModelError,
    PatientRecord, TteParams,
};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - LN_SQRT_2PI
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Normal::new(self.mean, self.sd).expect("validated sd").sample(rng)
    }

    fn validate(&self, name: &str) -> Result<(), ModelError> {
        if !(self.sd.is_finite() && self.sd > 0.0 && self.mean.is_finite()) {
            return Err(ModelError::InvalidPlan(format!("prior {name}: sd must be positive and finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpecTte {
    pub alpha1: NormalPrior,
    pub log_beta1: NormalPrior,
    pub alpha2: NormalPrior,
    pub gamma2: NormalPrior,
    pub xi_concentration: Vec<f64>,
}

impl PriorSpecTte {
    /// Default prior: the drug and background intercepts are centred so the
    /// reference dose has 9% / 11% DLT risk by the reference time.
    pub fn default_for(plan: &CyclePlan) -> Self {
        let log_t = plan.reference_time().ln();
        Self {
            alpha1: NormalPrior::new(cloglog(0.09).unwrap() - log_t, 1.0),
            log_beta1: NormalPrior::new(0.0, 4f64.ln() / 1.96),
            alpha2: NormalPrior::new(cloglog(0.11).unwrap() - log_t, 0.5),
            gamma2: NormalPrior::new(0.0, 0.5),
            xi_concentration: vec![1.0; plan.n_cycles() - 1],
        }
    }

    pub fn validate(&self, plan: &CyclePlan) -> Result<(), ModelError> {
        self.alpha1.validate("alpha1")?;
        self.log_beta1.validate("log_beta1")?;
        self.alpha2.validate("alpha2")?;
        self.gamma2.validate("gamma2")?;
        if self.xi_concentration.len() != plan.n_cycles() - 1 {
            return Err(ModelError::SimplexLength {
                expected: plan.n_cycles() - 1,
                got: self.xi_concentration.len(),
            });
        }
        if self.xi_concentration.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(ModelError::InvalidPlan("xi concentrations must be positive".into()));
        }
        Ok(())
    }

    pub fn mean_params(&self) -> TteParams {
        let total: f64 = self.xi_concentration.iter().sum();
        TteParams {
            alpha1: self.alpha1.mean,
            log_beta1: self.log_beta1.mean,
            alpha2: self.alpha2.mean,
            gamma2: self.gamma2.mean,
            xi: self.xi_concentration.iter().map(|a| a / total).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TteParams {
        TteParams {
            alpha1: self.alpha1.sample(rng),
            log_beta1: self.log_beta1.sample(rng),
            alpha2: self.alpha2.sample(rng),
            gamma2: self.gamma2.sample(rng),
            xi: sample_dirichlet(&self.xi_concentration, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpecBlrm {
    pub alpha1: NormalPrior,
    pub log_beta1: NormalPrior,
    pub alpha2: NormalPrior,
}

impl PriorSpecBlrm {
    /// One-cycle comparator prior.
    pub fn one_cycle() -> Self {
        Self {
            alpha1: NormalPrior::new(logit(0.03).unwrap(), 1.0),
            log_beta1: NormalPrior::new(0.0, 0.9),
            alpha2: NormalPrior::new(logit(0.04).unwrap(), 0.5),
        }
    }

    /// Three-cycle comparator prior.
    pub fn three_cycle() -> Self {
        Self {
            alpha1: NormalPrior::new(logit(0.09).unwrap(), 1.3),
            log_beta1: NormalPrior::new(0.0, 1.2),
            alpha2: NormalPrior::new(logit(0.12).unwrap(), 0.7),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.alpha1.validate("alpha1")?;
        self.log_beta1.validate("log_beta1")?;
        self.alpha2.validate("alpha2")
    }

    pub fn mean_params(&self) -> BlrmParams {
        BlrmParams {
            alpha1: self.alpha1.mean,
            log_beta1: self.log_beta1.mean,
            alpha2: self.alpha2.mean,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BlrmParams {
        BlrmParams {
            alpha1: self.alpha1.sample(rng),
            log_beta1: self.log_beta1.sample(rng),
            alpha2: self.alpha2.sample(rng),
        }
    }
}

fn sample_dirichlet<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Vec<f64> {
    if concentration.is_empty() {
        return Vec::new();
    }
    let mut draws: Vec<f64> = concentration
        .iter()
        .map(|a| Gamma::new(*a, 1.0).expect("validated concentration").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        // every gamma draw underflowed; fall back to the simplex centre
        let k = draws.len() as f64;
        draws.iter_mut().for_each(|x| *x = 1.0 / k);
    }
    draws
}

/// Observed data for one analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<PatientRecord>,
    pub grid: DoseGrid,
    pub plan: CyclePlan,
}

impl Dataset {
    pub fn new(records: Vec<PatientRecord>, grid: DoseGrid, plan: CyclePlan) -> Result<Self, ModelError> {
        for r in &records {
            r.validate(&plan)?;
        }
        Ok(Self { records, grid, plan })
    }

    pub fn empty(grid: DoseGrid, plan: CyclePlan) -> Self {
        Self {
            records: Vec::new(),
            grid,
            plan,
        }
    }
}

pub fn log_likelihood_tte(params: &TteParams, data: &Dataset) -> f64 {
    data.records
        .iter()
        .filter(|r| r.u_cycles > 0)
        .map(|r| {
            let h = cycle_hazards(params, r.dose, &data.grid, &data.plan);
            let table = survivor_and_density(&h, &data.plan);
            let j = r.u_cycles - 1;
            if r.delta {
                // log of the density, kept finite when the survivor underflows
                h.total(j).ln() - table.cumulative_hazard[j]
            } else {
                -table.cumulative_hazard[j]
            }
        })
        .sum()
}

/// Binary outcome of a record over a fixed window of cycles, or `None` when
/// the record does not cover the window.
pub fn window_outcome(record: &PatientRecord, window_cycles: usize) -> Option<bool> {
    if record.delta && record.u_cycles <= window_cycles {
        Some(true)
    } else if record.u_cycles >= window_cycles {
        Some(false)
    } else {
        None
    }
}

pub fn log_likelihood_blrm(params: &BlrmParams, data: &Dataset, window_cycles: usize) -> f64 {
    data.records
        .iter()
        .filter_map(|r| window_outcome(r, window_cycles).map(|y| (r.dose, y)))
        .map(|(dose, y)| {
            let (log_p, log_q) = blrm_log_probs(params, data.grid.log_relative(dose));
            if y {
                log_p
            } else {
                log_q
            }
        })
        .sum()
}

/// `softplus(x) = log(1 + e^x)`
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(log π, log(1-π))` for the combination logistic model.
fn blrm_log_probs(params: &BlrmParams, log_rel_dose: f64) -> (f64, f64) {
    let eta = params.alpha1 + params.beta1() * log_rel_dose;
    let log_q = -softplus(eta) - softplus(params.alpha2);
    let log_p = (-log_q.exp_m1()).ln();
    (log_p, log_q)
}

pub fn log_prior_tte(params: &TteParams, prior: &PriorSpecTte) -> f64 {
    prior.alpha1.ln_pdf(params.alpha1)
        + prior.log_beta1.ln_pdf(params.log_beta1)
        + prior.alpha2.ln_pdf(params.alpha2)
        + prior.gamma2.ln_pdf(params.gamma2)
        + dirichlet_ln_pdf(&params.xi, &prior.xi_concentration)
}

pub fn log_prior_blrm(params: &BlrmParams, prior: &PriorSpecBlrm) -> f64 {
    prior.alpha1.ln_pdf(params.alpha1)
        + prior.log_beta1.ln_pdf(params.log_beta1)
        + prior.alpha2.ln_pdf(params.alpha2)
}

/// Dirichlet log-density. A simplex with fewer than two components is a point
/// mass and contributes zero.
pub fn dirichlet_ln_pdf(x: &[f64], concentration: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let total: f64 = concentration.iter().sum();
    let norm = ln_gamma(total) - concentration.iter().map(|a| ln_gamma(*a)).sum::<f64>();
    norm + x
        .iter()
        .zip(concentration)
        .map(|(xi, a)| if *a == 1.0 { 0.0 } else { (a - 1.0) * xi.ln() })
        .sum::<f64>()
}

/// Additive log-ratio map between the simplex and unconstrained space, with
/// the last component as reference.
pub mod simplex {
    /// `z_k = log(ξ_k / ξ_K)` for `k < K`.
    pub fn to_unconstrained(xi: &[f64]) -> Vec<f64> {
        match xi.split_last() {
            Some((last, rest)) => rest.iter().map(|x| (x / last).ln()).collect(),
            None => Vec::new(),
        }
    }

    /// Inverse of [`to_unconstrained`] into a simplex of `z.len() + 1`
    /// components.
    pub fn from_unconstrained(z: &[f64]) -> Vec<f64> {
        let max = z.iter().copied().fold(0.0, f64::max);
        let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        out.push((-max).exp());
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
        out
    }

    /// `log |det ∂ξ/∂z| = Σ_k log ξ_k` over all components.
    pub fn log_abs_det_jacobian(xi: &[f64]) -> f64 {
        if xi.len() < 2 {
            return 0.0;
        }
        xi.iter().map(|x| x.ln()).sum()
    }
}

/// Per-dose, per-cycle event and exposure counts for the time-to-DLT model.
#[derive(Debug, Clone, PartialEq)]
pub struct TteStats {
    cycle_length: f64,
    n_cycles: usize,
    groups: Vec<TteGroup>,
}

#[derive(Debug, Clone, PartialEq)]
struct TteGroup {
    log_rel_dose: f64,
    events: Vec<f64>,
    at_risk: Vec<f64>,
}

impl TteStats {
    pub fn new(data: &Dataset) -> Self {
        let n_cycles = data.plan.n_cycles();
        let mut groups: Vec<(f64, TteGroup)> = Vec::new();
        for r in data.records.iter().filter(|r| r.u_cycles > 0) {
            let pos = match groups.iter().position(|(d, _)| *d == r.dose) {
                Some(p) => p,
                None => {
                    groups.push((
                        r.dose,
                        TteGroup {
                            log_rel_dose: data.grid.log_relative(r.dose),
                            events: vec![0.0; n_cycles],
                            at_risk: vec![0.0; n_cycles],
                        },
                    ));
                    groups.len() - 1
                }
            };
            let g = &mut groups[pos].1;
            for j in 0..r.u_cycles {
                g.at_risk[j] += 1.0;
            }
            if r.delta {
                g.events[r.u_cycles - 1] += 1.0;
            }
        }
        groups.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            cycle_length: data.plan.cycle_length(),
            n_cycles,
            groups: groups.into_iter().map(|(_, g)| g).collect(),
        }
    }

    /// `Σ e_{kj} log h_j(d_k) - Δ Σ n_{kj} h_j(d_k)`.
    pub fn log_likelihood(&self, params: &TteParams) -> f64 {
        if self.groups.is_empty() {
            return 0.0;
        }
        let beta = params.beta1();
        let scale = (self.n_cycles as f64 - 1.0) * params.gamma2;
        let mut bg_log = [0.0f64; 16];
        let mut bg_log_vec;
        let bg: &mut [f64] = if self.n_cycles <= bg_log.len() {
            &mut bg_log[..self.n_cycles]
        } else {
            bg_log_vec = vec![0.0; self.n_cycles];
            &mut bg_log_vec
        };
        let mut cum = 0.0;
        for (j, slot) in bg.iter_mut().enumerate() {
            if j > 0 {
                cum += params.xi[j - 1];
            }
            *slot = (params.alpha2 + scale * cum).exp();
        }
        let mut ll = 0.0;
        for g in &self.groups {
            let drug = (params.alpha1 + beta * g.log_rel_dose).exp();
            for j in 0..self.n_cycles {
                if g.at_risk[j] == 0.0 {
                    break;
                }
                let h = drug + bg[j];
                if g.events[j] > 0.0 {
                    ll += g.events[j] * h.ln();
                }
                ll -= self.cycle_length * g.at_risk[j] * h;
            }
        }
        ll
    }
}

/// Per-dose evaluable counts for a fixed-window logistic model.
#[derive(Debug, Clone, PartialEq)]
pub struct BlrmStats {
    groups: Vec<(f64, f64, f64)>,
}

impl BlrmStats {
    pub fn new(data: &Dataset, window_cycles: usize) -> Self {
        let mut groups: Vec<(f64, f64, f64, f64)> = Vec::new();
        for r in &data.records {
            let Some(y) = window_outcome(r, window_cycles) else {
                continue;
            };
            let pos = match groups.iter().position(|g| g.0 == r.dose) {
                Some(p) => p,
                None => {
                    groups.push((r.dose, data.grid.log_relative(r.dose), 0.0, 0.0));
                    groups.len() - 1
                }
            };
            groups[pos].2 += 1.0;
            if y {
                groups[pos].3 += 1.0;
            }
        }
        groups.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            groups: groups.into_iter().map(|(_, x, n, e)| (x, n, e)).collect(),
        }
    }

    pub fn n_evaluable(&self) -> usize {
        self.groups.iter().map(|g| g.1 as usize).sum()
    }

    pub fn log_likelihood(&self, params: &BlrmParams) -> f64 {
        self.groups
            .iter()
            .map(|&(x, n, e)| {
                let (log_p, log_q) = blrm_log_probs(params, x);
                let mut ll = (n - e) * log_q;
                if e > 0.0 {
                    ll += e * log_p;
                }
                ll
            })
            .sum()
    }
}
