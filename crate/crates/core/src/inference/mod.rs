//! Posterior sampling for the time-to-DLT and logistic models.

pub mod diagnostics;
pub mod quadrature;
pub mod sampler;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{
    log_prior_blrm, log_prior_tte, simplex, BlrmStats, Dataset, PriorSpecBlrm, PriorSpecTte, TteStats,
};
use crate::model::{BlrmParams, TteParams};
pub use diagnostics::ParamDiagnostics;
pub use quadrature::{quadrature_oracle, QuadratureGrid, QuadratureResult};
use sampler::{run_chain, ChainSettings, LogDensity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("not enough draws for diagnostics: {0}")]
    TooFewDraws(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

/// Which model to fit, with its prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Tte(PriorSpecTte),
    Blrm { prior: PriorSpecBlrm, window_cycles: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Tte { n_cycles: usize },
    Blrm { window_cycles: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub initial_step_scale: f64,
    pub rhat_max: f64,
    pub ess_min: f64,
    /// Run chains on the rayon pool. Results do not depend on this flag.
    pub parallel_chains: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_draws: 1000,
            seed: 1,
            target_accept: 0.30,
            initial_step_scale: 1.0,
            rhat_max: 1.05,
            ess_min: 400.0,
            parallel_chains: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.n_chains < 2 {
            return Err(InferenceError::InvalidConfig("n_chains must be at least 2".into()));
        }
        if self.n_warmup == 0 || self.n_draws < 100 {
            return Err(InferenceError::InvalidConfig(
                "n_warmup must be positive and n_draws at least 100".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(InferenceError::InvalidConfig("target_accept must lie in (0, 1)".into()));
        }
        if !(self.initial_step_scale > 0.0) {
            return Err(InferenceError::InvalidConfig("initial_step_scale must be positive".into()));
        }
        Ok(())
    }
}

struct TteTarget<'a> {
    stats: TteStats,
    prior: &'a PriorSpecTte,
    n_xi: usize,
}

impl TteTarget<'_> {
    fn params(&self, z: &[f64]) -> TteParams {
        let xi = if self.n_xi == 0 {
            Vec::new()
        } else {
            simplex::from_unconstrained(&z[4..])
        };
        TteParams {
            alpha1: z[0],
            log_beta1: z[1],
            alpha2: z[2],
            gamma2: z[3],
            xi,
        }
    }
}

impl LogDensity for TteTarget<'_> {
    fn dim(&self) -> usize {
        4 + self.n_xi.saturating_sub(1)
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let p = self.params(z);
        let jac = simplex::log_abs_det_jacobian(&p.xi);
        let lp = log_prior_tte(&p, self.prior) + jac;
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp + self.stats.log_likelihood(&p)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.prior.sample(rng);
        let mut z = vec![p.alpha1, p.log_beta1, p.alpha2, p.gamma2];
        z.extend(simplex::to_unconstrained(&p.xi));
        z
    }

    fn initial_scales(&self) -> Vec<f64> {
        let mut s = vec![
            self.prior.alpha1.sd,
            self.prior.log_beta1.sd,
            self.prior.alpha2.sd,
            self.prior.gamma2.sd,
        ];
        s.extend(std::iter::repeat_n(1.5, self.n_xi.saturating_sub(1)));
        s
    }
}

struct BlrmTarget<'a> {
    stats: BlrmStats,
    prior: &'a PriorSpecBlrm,
}

fn blrm_from(z: &[f64]) -> BlrmParams {
    BlrmParams {
        alpha1: z[0],
        log_beta1: z[1],
        alpha2: z[2],
    }
}

impl LogDensity for BlrmTarget<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let p = blrm_from(z);
        log_prior_blrm(&p, self.prior) + self.stats.log_likelihood(&p)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.prior.sample(rng);
        vec![p.alpha1, p.log_beta1, p.alpha2]
    }

    fn initial_scales(&self) -> Vec<f64> {
        vec![self.prior.alpha1.sd, self.prior.log_beta1.sd, self.prior.alpha2.sd]
    }
}

/// Retained posterior draws in constrained parameterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub kind: ModelKind,
    pub param_names: Vec<String>,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    /// Row-major, chain-major: rows `c*draws_per_chain .. (c+1)*draws_per_chain`
    /// belong to chain `c`.
    values: Vec<f64>,
    pub diagnostics: Vec<ParamDiagnostics>,
    pub acceptance_rates: Vec<f64>,
    pub converged: bool,
}

impl PosteriorDraws {
    /// Assemble from explicit rows, bypassing sampling. Diagnostics are left
    /// empty and `converged` is set.
    pub fn from_rows(kind: ModelKind, param_names: Vec<String>, rows: &[Vec<f64>]) -> Self {
        let values = rows.iter().flatten().copied().collect();
        Self {
            kind,
            param_names,
            n_chains: 1,
            draws_per_chain: rows.len(),
            values,
            diagnostics: Vec::new(),
            acceptance_rates: Vec::new(),
            converged: true,
        }
    }

    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    /// Parameters that vary freely; the last simplex component is determined by
    /// the others and is left out of convergence diagnostics.
    pub fn n_free_params(&self) -> usize {
        match self.kind {
            ModelKind::Tte { n_cycles } if n_cycles >= 2 => self.n_params() - 1,
            _ => self.n_params(),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.draws_per_chain
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_params();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_params())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn chains_of(&self, j: usize) -> Vec<Vec<f64>> {
        let col = self.column(j);
        col.chunks(self.draws_per_chain).map(|c| c.to_vec()).collect()
    }

    pub fn tte_params(&self, i: usize) -> TteParams {
        let r = self.row(i);
        TteParams {
            alpha1: r[0],
            log_beta1: r[1],
            alpha2: r[2],
            gamma2: r[3],
            xi: r[4..].to_vec(),
        }
    }

    pub fn blrm_params(&self, i: usize) -> BlrmParams {
        blrm_from(self.row(i))
    }

    pub fn max_rhat(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.rhat).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.ess_bulk).fold(f64::INFINITY, f64::min)
    }
}

/// Split-R̂ and bulk ESS for every parameter column.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Vec<ParamDiagnostics>, InferenceError> {
    if draws.n_chains < 2 || draws.draws_per_chain < 100 {
        return Err(InferenceError::TooFewDraws(format!(
            "{} chains x {} draws; need >= 2 x 100",
            draws.n_chains, draws.draws_per_chain
        )));
    }
    (0..draws.n_free_params())
        .map(|j| {
            let chains = draws.chains_of(j);
            Ok(ParamDiagnostics {
                name: draws.param_names[j].clone(),
                rhat: diagnostics::split_rhat(&chains)?,
                ess_bulk: diagnostics::ess_bulk(&chains)?,
            })
        })
        .collect()
}

fn tte_names(n_cycles: usize) -> Vec<String> {
    let mut names: Vec<String> = ["alpha1", "log_beta1", "alpha2", "gamma2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..n_cycles).map(|l| format!("xi{l}")));
    names
}

fn blrm_names() -> Vec<String> {
    ["alpha1", "log_beta1", "alpha2"].iter().map(|s| s.to_string()).collect()
}

fn sample_chains<T: LogDensity>(target: &T, cfg: &SamplerConfig) -> Vec<sampler::ChainOutput> {
    let settings = ChainSettings {
        n_warmup: cfg.n_warmup,
        n_draws: cfg.n_draws,
        target_accept: cfg.target_accept,
        initial_step_scale: cfg.initial_step_scale,
    };
    if cfg.parallel_chains {
        (0..cfg.n_chains as u64)
            .into_par_iter()
            .map(|c| run_chain(target, &settings, cfg.seed, c))
            .collect()
    } else {
        (0..cfg.n_chains as u64)
            .map(|c| run_chain(target, &settings, cfg.seed, c))
            .collect()
    }
}

/// Draw from the posterior of `model` given `data`.
///
/// Deterministic in `(model, data, cfg)`. Non-convergence is reported through
/// [`PosteriorDraws::converged`], never as an error.
pub fn fit(model: &ModelSpec, data: &Dataset, cfg: &SamplerConfig) -> Result<PosteriorDraws, InferenceError> {
    cfg.validate()?;
    let n_cycles = data.plan.n_cycles();
    match model {
        ModelSpec::Tte(prior) => {
            prior
                .validate(&data.plan)
                .map_err(|e| InferenceError::InvalidConfig(e.to_string()))?;
            let target = TteTarget {
                stats: TteStats::new(data),
                prior,
                n_xi: n_cycles - 1,
            };
            let outs = sample_chains(&target, cfg);
            let rates = outs.iter().map(|o| o.acceptance_rate).collect();
            let chains = outs
                .iter()
                .map(|o| {
                    o.draws
                        .iter()
                        .map(|z| {
                            let p = target.params(z);
                            let mut row = vec![p.alpha1, p.log_beta1, p.alpha2, p.gamma2];
                            row.extend(p.xi);
                            row
                        })
                        .collect()
                })
                .collect();
            finish(ModelKind::Tte { n_cycles }, tte_names(n_cycles), chains, rates, cfg)
        }
        ModelSpec::Blrm { prior, window_cycles } => {
            prior
                .validate()
                .map_err(|e| InferenceError::InvalidConfig(e.to_string()))?;
            let target = BlrmTarget {
                stats: BlrmStats::new(data, *window_cycles),
                prior,
            };
            let outs = sample_chains(&target, cfg);
            let rates = outs.iter().map(|o| o.acceptance_rate).collect();
            let chains = outs.into_iter().map(|o| o.draws).collect();
            let kind = ModelKind::Blrm {
                window_cycles: *window_cycles,
            };
            finish(kind, blrm_names(), chains, rates, cfg)
        }
    }
}

fn finish(
    kind: ModelKind,
    param_names: Vec<String>,
    chains: Vec<Vec<Vec<f64>>>,
    acceptance_rates: Vec<f64>,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws, InferenceError> {
    let values = chains.iter().flatten().flatten().copied().collect();
    let mut draws = PosteriorDraws {
        kind,
        param_names,
        n_chains: cfg.n_chains,
        draws_per_chain: cfg.n_draws,
        values,
        diagnostics: Vec::new(),
        acceptance_rates,
        converged: false,
    };
    draws.diagnostics = diagnostics(&draws)?;
    draws.converged = draws
        .diagnostics
        .iter()
        .all(|d| d.rhat <= cfg.rhat_max && d.ess_bulk >= cfg.ess_min);
    Ok(draws)
}
