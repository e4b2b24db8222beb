//! Tensor-product quadrature over the three logistic-model parameters, used as
//! an exact reference for the sampler.
//!
//! The box spans `±half_width_sds` prior standard deviations around the prior
//! mean on every axis with midpoint nodes. Events of the form `π(d) > c` are
//! monotone in `α₁` for fixed `(log β₁, α₂)`, so the indicator is integrated by
//! the fraction of each `α₁` cell lying above the threshold, keeping the error
//! second order.

use serde::Serialize;

use super::{InferenceError, ModelSpec};
use crate::likelihood::{log_prior_blrm, BlrmStats, Dataset, NormalPrior};
use crate::model::{logit, BlrmParams};
use crate::policy::EwocThresholds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureGrid {
    pub nodes_per_axis: usize,
    pub half_width_sds: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        Self {
            nodes_per_axis: 161,
            half_width_sds: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureResult {
    /// Posterior normalizing constant `∫ L(θ) p(θ) dθ` over the box.
    pub normalizer: f64,
    /// Posterior means of `(α₁, log β₁, α₂)`.
    pub mean: [f64; 3],
    pub doses: Vec<f64>,
    pub p_under: Vec<f64>,
    pub p_target: Vec<f64>,
    pub p_over: Vec<f64>,
}

struct Axis {
    lo: f64,
    h: f64,
    n: usize,
}

impl Axis {
    fn new(prior: &NormalPrior, spec: &QuadratureGrid) -> Self {
        let lo = prior.mean - spec.half_width_sds * prior.sd;
        Self {
            lo,
            h: 2.0 * spec.half_width_sds * prior.sd / spec.nodes_per_axis as f64,
            n: spec.nodes_per_axis,
        }
    }

    fn node(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.h
    }
}

/// `α₁` above which `π(d) > c`, given the other parameters. `-∞` when the
/// background alone already exceeds `c`.
fn alpha1_threshold(c: f64, log_rel_dose: f64, beta: f64, alpha2: f64) -> f64 {
    let p_bg = crate::model::inv_logit(alpha2);
    let c_drug = 1.0 - (1.0 - c) / (1.0 - p_bg);
    if c_drug <= 0.0 {
        f64::NEG_INFINITY
    } else {
        logit(c_drug).expect("threshold in (0, 1)") - beta * log_rel_dose
    }
}

fn fraction_above(x: f64, h: f64, threshold: f64) -> f64 {
    ((x + 0.5 * h - threshold) / h).clamp(0.0, 1.0)
}

pub fn quadrature_oracle(
    model: &ModelSpec,
    data: &Dataset,
    spec: &QuadratureGrid,
    thresholds: &EwocThresholds,
) -> Result<QuadratureResult, InferenceError> {
    let (prior, window) = match model {
        ModelSpec::Blrm { prior, window_cycles } => (prior, *window_cycles),
        ModelSpec::Tte(_) => {
            return Err(InferenceError::Unsupported(
                "quadrature is limited to the 3-parameter logistic model".into(),
            ))
        }
    };
    if spec.nodes_per_axis < 2 || !(spec.half_width_sds > 0.0) {
        return Err(InferenceError::InvalidConfig("quadrature grid too small".into()));
    }
    let stats = BlrmStats::new(data, window);
    let doses = data.grid.doses().to_vec();
    let log_rel: Vec<f64> = doses.iter().map(|d| data.grid.log_relative(*d)).collect();
    let ax_a1 = Axis::new(&prior.alpha1, spec);
    let ax_lb = Axis::new(&prior.log_beta1, spec);
    let ax_a2 = Axis::new(&prior.alpha2, spec);
    let n_doses = doses.len();

    // streaming log-sum-exp accumulators, all scaled by exp(-shift)
    let mut shift = f64::NEG_INFINITY;
    let mut z = 0.0;
    let mut moments = [0.0; 3];
    let mut above_hi = vec![0.0; n_doses];
    let mut above_lo = vec![0.0; n_doses];
    let mut thr_hi = vec![0.0; n_doses];
    let mut thr_lo = vec![0.0; n_doses];

    for ib in 0..ax_lb.n {
        let lb = ax_lb.node(ib);
        let beta = lb.exp();
        for i2 in 0..ax_a2.n {
            let a2 = ax_a2.node(i2);
            for k in 0..n_doses {
                thr_hi[k] = alpha1_threshold(thresholds.pi_c, log_rel[k], beta, a2);
                thr_lo[k] = alpha1_threshold(thresholds.target_low, log_rel[k], beta, a2);
            }
            for i1 in 0..ax_a1.n {
                let a1 = ax_a1.node(i1);
                let p = BlrmParams {
                    alpha1: a1,
                    log_beta1: lb,
                    alpha2: a2,
                };
                let lp = log_prior_blrm(&p, prior) + stats.log_likelihood(&p);
                if lp > shift {
                    let scale = (shift - lp).exp();
                    z *= scale;
                    moments.iter_mut().for_each(|m| *m *= scale);
                    above_hi.iter_mut().for_each(|m| *m *= scale);
                    above_lo.iter_mut().for_each(|m| *m *= scale);
                    shift = lp;
                }
                let w = (lp - shift).exp();
                z += w;
                moments[0] += w * a1;
                moments[1] += w * lb;
                moments[2] += w * a2;
                for k in 0..n_doses {
                    above_hi[k] += w * fraction_above(a1, ax_a1.h, thr_hi[k]);
                    above_lo[k] += w * fraction_above(a1, ax_a1.h, thr_lo[k]);
                }
            }
        }
    }

    let cell = ax_a1.h * ax_lb.h * ax_a2.h;
    let p_over: Vec<f64> = above_hi.iter().map(|a| a / z).collect();
    let p_above_low: Vec<f64> = above_lo.iter().map(|a| a / z).collect();
    Ok(QuadratureResult {
        normalizer: z * cell * shift.exp(),
        mean: [moments[0] / z, moments[1] / z, moments[2] / z],
        doses,
        p_under: p_above_low.iter().map(|p| 1.0 - p).collect(),
        p_target: p_above_low.iter().zip(&p_over).map(|(lo, hi)| lo - hi).collect(),
        p_over,
    })
}
