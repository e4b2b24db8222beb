//! Adaptive random-walk Metropolis on an unconstrained parameter vector.
//!
//! Warmup runs a fast initial buffer, three covariance windows and a final
//! step-size buffer. Within each stage the global step size follows a
//! Robbins–Monro recursion towards the target acceptance rate; at the end of a
//! window the proposal covariance is replaced by the regularized sample
//! covariance of that window.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Unnormalized log density over `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, z: &[f64]) -> f64;
    /// Independent starting point, typically a prior draw.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Rough per-coordinate scale used for the first proposals.
    fn initial_scales(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSettings {
    pub n_warmup: usize,
    pub n_draws: usize,
    pub target_accept: f64,
    pub initial_step_scale: f64,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Retained draws, one unconstrained vector each.
    pub draws: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
}

struct Welford {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    /// Sample covariance shrunk towards a small multiple of the identity.
    fn regularized(&self) -> DMatrix<f64> {
        let n = self.n as f64;
        let d = self.mean.len();
        let cov = &self.m2 / (n - 1.0).max(1.0);
        cov * (n / (n + 5.0)) + DMatrix::identity(d, d) * (1e-3 * 5.0 / (n + 5.0))
    }
}

fn cholesky(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let mut jitter = 0.0;
    loop {
        let m = cov + DMatrix::identity(d, d) * jitter;
        if let Some(ch) = m.cholesky() {
            return ch.l();
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
    }
}

/// Warmup stage boundaries as fractions of the warmup length.
const WINDOW_BOUNDS: [f64; 4] = [0.15, 0.30, 0.55, 0.90];

pub fn run_chain<T: LogDensity>(target: &T, settings: &ChainSettings, seed: u64, chain: u64) -> ChainOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain);
    let d = target.dim();

    let mut z = target.initial_point(&mut rng);
    let mut lp = target.log_density(&z);
    let mut tries = 0;
    while !lp.is_finite() && tries < 100 {
        z = target.initial_point(&mut rng);
        lp = target.log_density(&z);
        tries += 1;
    }

    let scales = target.initial_scales();
    let mut chol = DMatrix::from_diagonal(&DVector::from_iterator(d, scales.iter().copied()));
    let base_log_eps = (2.38 / (d as f64).sqrt() * settings.initial_step_scale).ln();
    let mut log_eps = base_log_eps;
    let mut adapt_t = 0usize;
    let mut final_log_eps_sum = 0.0;
    let mut final_count = 0usize;

    let warmup = settings.n_warmup;
    let bounds: Vec<usize> = WINDOW_BOUNDS
        .iter()
        .map(|f| (f * warmup as f64).round() as usize)
        .collect();
    let mut window = Welford::new(d);

    let mut proposal = vec![0.0; d];
    let mut noise = DVector::<f64>::zeros(d);
    let mut draws = Vec::with_capacity(settings.n_draws);
    let mut accepted = 0usize;

    for iter in 0..warmup + settings.n_draws {
        let adapting = iter < warmup;
        let eps = log_eps.exp();
        for v in noise.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let step = &chol * &noise;
        for k in 0..d {
            proposal[k] = z[k] + eps * step[k];
        }
        let lp_new = target.log_density(&proposal);
        let log_ratio = lp_new - lp;
        let accept_prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.exp().min(1.0) };
        let u: f64 = rng.random();
        if u < accept_prob {
            z.copy_from_slice(&proposal);
            lp = lp_new;
            if !adapting {
                accepted += 1;
            }
        }

        if adapting {
            adapt_t += 1;
            log_eps += (accept_prob - settings.target_accept) / (adapt_t as f64).powf(0.6);
            if iter >= bounds[0] && iter < bounds[3] {
                window.push(&z);
            }
            if iter + 1 == bounds[1] || iter + 1 == bounds[2] || iter + 1 == bounds[3] {
                if window.n > d + 1 {
                    chol = cholesky(&window.regularized());
                    // covariance now carries the scale; restart from the optimal RWM step
                    log_eps = (2.38 / (d as f64).sqrt()).ln();
                    adapt_t = 0;
                }
                window = Welford::new(d);
            }
            if iter >= bounds[3] {
                final_log_eps_sum += log_eps;
                final_count += 1;
            }
            if iter + 1 == warmup && final_count > 0 {
                log_eps = final_log_eps_sum / final_count as f64;
            }
        } else {
            draws.push(z.clone());
        }
    }

    ChainOutput {
        draws,
        acceptance_rate: if settings.n_draws > 0 {
            accepted as f64 / settings.n_draws as f64
        } else {
            0.0
        },
    }
}
