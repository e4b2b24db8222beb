//! Ground-truth toxicity and dropout scenarios, patient outcome generation and
//! accrual.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::model::{cloglog, inv_cloglog, CyclePlan, DoseGrid, ModelError};

/// True cumulative DLT probability over all cycles as a function of dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthCurve {
    /// `cloglog π(d) = cloglog(p_pivot) + slope · log(d / pivot_dose)`.
    CloglogLinear {
        cumulative_at_pivot: f64,
        slope: f64,
        pivot_dose: f64,
    },
    /// One cumulative probability per grid dose.
    Table { cumulative: Vec<f64> },
}

impl Default for TruthCurve {
    fn default() -> Self {
        TruthCurve::CloglogLinear {
            cumulative_at_pivot: 0.25,
            slope: 0.8,
            pivot_dose: 160.0,
        }
    }
}

impl TruthCurve {
    pub fn cumulative(&self, grid: &DoseGrid) -> Result<Vec<f64>, ModelError> {
        match self {
            TruthCurve::CloglogLinear {
                cumulative_at_pivot,
                slope,
                pivot_dose,
            } => {
                if !(*pivot_dose > 0.0) || !slope.is_finite() {
                    return Err(ModelError::InvalidPlan("truth curve needs pivot_dose > 0".into()));
                }
                let a = cloglog(*cumulative_at_pivot)?;
                Ok(grid
                    .doses()
                    .iter()
                    .map(|d| inv_cloglog(a + slope * (d / pivot_dose).ln()))
                    .collect())
            }
            TruthCurve::Table { cumulative } => {
                if cumulative.len() != grid.len() {
                    return Err(ModelError::InvalidPlan(format!(
                        "truth table has {} entries for {} doses",
                        cumulative.len(),
                        grid.len()
                    )));
                }
                if let Some(p) = cumulative.iter().find(|p| !(0.0..1.0).contains(*p)) {
                    return Err(ModelError::ProbabilityDomain(*p));
                }
                Ok(cumulative.clone())
            }
        }
    }
}

/// Cycle multipliers applied to a shared per-cycle hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToxProfile {
    pub name: String,
    pub multipliers: Vec<f64>,
}

impl ToxProfile {
    pub fn constant(n_cycles: usize) -> Self {
        Self {
            name: "constant".into(),
            multipliers: vec![1.0; n_cycles],
        }
    }

    pub fn defaults() -> Vec<Self> {
        vec![
            Self::constant(3),
            Self {
                name: "increasing".into(),
                multipliers: vec![0.2, 1.0, 1.8],
            },
            Self {
                name: "decreasing".into(),
                multipliers: vec![1.8, 1.0, 0.2],
            },
        ]
    }

    pub fn validate(&self, plan: &CyclePlan) -> Result<(), ModelError> {
        let m = &self.multipliers;
        let bad = |why: &str| Err(ModelError::InvalidPlan(format!("toxicity profile `{}`: {why}", self.name)));
        if m.len() != plan.n_cycles() {
            return bad("one multiplier per cycle required");
        }
        if m.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return bad("multipliers must be positive");
        }
        if (m.iter().sum::<f64>() - m.len() as f64).abs() > 1e-9 {
            return bad("multipliers must sum to the number of cycles");
        }
        if m.len() >= 2 && (m[1] - 1.0).abs() > 1e-12 {
            return bad("the second multiplier must be 1");
        }
        let strictly = |f: fn(f64, f64) -> bool| m.windows(2).all(|w| f(w[0], w[1]));
        match self.name.as_str() {
            "increasing" if !strictly(|a, b| a < b) => bad("must be strictly increasing"),
            "decreasing" if !strictly(|a, b| a > b) => bad("must be strictly decreasing"),
            _ => Ok(()),
        }
    }
}

/// Fully resolved toxicity truth on a dose grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToxScenario {
    pub name: String,
    /// Per-cycle hazard `H_c(d)` for each grid dose (1/cycle).
    pub base_hazard: Vec<f64>,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleProbs {
    pub conditional: Vec<f64>,
    pub cumulative: f64,
}

impl ToxScenario {
    pub fn new(curve: &TruthCurve, profile: &ToxProfile, grid: &DoseGrid, plan: &CyclePlan) -> Result<Self, ModelError> {
        profile.validate(plan)?;
        let j = plan.n_cycles() as f64;
        let base_hazard = curve.cumulative(grid)?.iter().map(|p| -(-p).ln_1p() / j).collect();
        Ok(Self {
            name: profile.name.clone(),
            base_hazard,
            multipliers: profile.multipliers.clone(),
        })
    }

    /// Build directly from per-dose hazards.
    pub fn from_hazards(name: &str, base_hazard: Vec<f64>, multipliers: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            base_hazard,
            multipliers,
        }
    }

    pub fn true_cycle_probs(&self, dose_index: usize) -> CycleProbs {
        let h = self.base_hazard[dose_index];
        let conditional = self.multipliers.iter().map(|m| -(-m * h).exp_m1()).collect();
        let total: f64 = self.multipliers.iter().map(|m| m * h).sum();
        CycleProbs {
            conditional,
            cumulative: -(-total).exp_m1(),
        }
    }

    pub fn cumulative(&self) -> Vec<f64> {
        (0..self.base_hazard.len()).map(|k| self.true_cycle_probs(k).cumulative).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutScenario {
    pub name: String,
    /// Probability of dropping out over all cycles at doses up to `boundary`.
    pub rate_low: f64,
    /// Same, above `boundary`.
    pub rate_high: f64,
    #[serde(default = "default_boundary")]
    pub boundary: f64,
}

fn default_boundary() -> f64 {
    80.0
}

impl DropoutScenario {
    pub fn none() -> Self {
        Self::flat("none", 0.0)
    }

    pub fn flat(name: &str, rate: f64) -> Self {
        Self {
            name: name.into(),
            rate_low: rate,
            rate_high: rate,
            boundary: default_boundary(),
        }
    }

    /// The five regimes: none, 33%, 55%, decreasing 55/0 and increasing 0/55.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::none(),
            Self::flat("33pct", 0.33),
            Self::flat("55pct", 0.55),
            Self {
                name: "decreasing".into(),
                rate_low: 0.55,
                rate_high: 0.0,
                boundary: default_boundary(),
            },
            Self {
                name: "increasing".into(),
                rate_low: 0.0,
                rate_high: 0.55,
                boundary: default_boundary(),
            },
        ]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if [self.rate_low, self.rate_high].iter().all(|r| (0.0..1.0).contains(r)) && self.boundary.is_finite() {
            Ok(())
        } else {
            Err(ModelError::InvalidPlan(format!(
                "dropout `{}`: rates must lie in [0, 1)",
                self.name
            )))
        }
    }

    pub fn rate(&self, dose: f64) -> f64 {
        if dose <= self.boundary {
            self.rate_low
        } else {
            self.rate_high
        }
    }
}

/// Constant dropout hazard per day matching the scenario's multi-cycle rate.
pub fn dropout_hazard(scn: &DropoutScenario, dose: f64, plan: &CyclePlan) -> f64 {
    -(-scn.rate(dose)).ln_1p() / plan.horizon()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub u_cycles: usize,
    pub delta: bool,
    pub dropout: bool,
    /// Days from enrollment to the latent DLT or dropout, or to the end of the
    /// last cycle when neither occurs.
    pub event_day: f64,
}

fn exp_time<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Per-cycle race between a latent DLT and a latent dropout time.
pub fn simulate_outcome<R: Rng + ?Sized>(q: &[f64], dropout_rate: f64, plan: &CyclePlan, rng: &mut R) -> PatientOutcome {
    let delta_t = plan.cycle_length();
    for (j, qj) in q.iter().enumerate() {
        let t_dlt = exp_time(rng, -(-qj).ln_1p() / delta_t);
        let t_drop = exp_time(rng, dropout_rate);
        let start = j as f64 * delta_t;
        if t_dlt < delta_t && t_dlt <= t_drop {
            return PatientOutcome {
                u_cycles: j + 1,
                delta: true,
                dropout: false,
                event_day: start + t_dlt,
            };
        }
        if t_drop < delta_t {
            return PatientOutcome {
                u_cycles: j,
                delta: false,
                dropout: true,
                event_day: start + t_drop,
            };
        }
    }
    PatientOutcome {
        u_cycles: q.len(),
        delta: false,
        dropout: false,
        event_day: plan.horizon(),
    }
}

pub fn simulate_patient<R: Rng + ?Sized>(
    scn: &ToxScenario,
    drop: &DropoutScenario,
    grid: &DoseGrid,
    dose_index: usize,
    plan: &CyclePlan,
    rng: &mut R,
) -> PatientOutcome {
    let q = scn.true_cycle_probs(dose_index).conditional;
    let lambda = dropout_hazard(drop, grid.doses()[dose_index], plan);
    simulate_outcome(&q, lambda, plan, rng)
}

/// Exponential inter-arrival gap with the given mean (days).
pub fn sample_accrual<R: Rng + ?Sized>(rng: &mut R, mean_days: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e * mean_days
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> DoseGrid {
        DoseGrid::new(vec![10., 20., 40., 80., 160., 320., 640., 1280.], 160.0).unwrap()
    }

    fn scenarios() -> Vec<ToxScenario> {
        let plan = CyclePlan::default();
        ToxProfile::defaults()
            .iter()
            .map(|p| ToxScenario::new(&TruthCurve::default(), p, &grid(), &plan).unwrap())
            .collect()
    }

    #[test]
    fn default_truth_curve() {
        let expected = [0.031, 0.053, 0.091, 0.152, 0.25, 0.394, 0.582, 0.781];
        let got = TruthCurve::default().cumulative(&grid()).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert_abs_diff_eq!(*g, e, epsilon = 5e-4);
        }
    }

    #[test]
    fn cycle_probabilities() {
        let c = ToxScenario::from_hazards("constant", vec![0.0959], vec![1.0; 3]);
        let p = c.true_cycle_probs(0);
        for q in &p.conditional {
            assert_abs_diff_eq!(*q, 0.0914, epsilon = 1e-4);
        }
        assert_abs_diff_eq!(p.cumulative, 0.25, epsilon = 1e-3);

        let inc = ToxScenario::from_hazards("increasing", vec![0.0959], vec![0.2, 1.0, 1.8]);
        let p = inc.true_cycle_probs(0);
        assert_abs_diff_eq!(p.conditional[0], 0.0190, epsilon = 1e-4);
        assert_abs_diff_eq!(p.conditional[2], 0.1586, epsilon = 2e-4);
        assert_abs_diff_eq!(p.cumulative, 0.25, epsilon = 1e-3);

        let zero = ToxScenario::from_hazards("constant", vec![0.0], vec![1.0; 3]);
        let p = zero.true_cycle_probs(0);
        assert!(p.conditional.iter().all(|q| *q == 0.0));
        assert_eq!(p.cumulative, 0.0);
    }

    #[test]
    fn scenarios_coincide_cumulatively() {
        let s = scenarios();
        for k in 0..grid().len() {
            let base = s[0].true_cycle_probs(k);
            for other in &s[1..] {
                let p = other.true_cycle_probs(k);
                assert!((p.cumulative - base.cumulative).abs() < 1e-12);
                assert_eq!(p.conditional[1], base.conditional[1]);
            }
        }
    }

    #[test]
    fn profile_validation() {
        let plan = CyclePlan::default();
        let bad = |m: Vec<f64>, name: &str| {
            ToxProfile {
                name: name.into(),
                multipliers: m,
            }
            .validate(&plan)
            .is_err()
        };
        assert!(bad(vec![1.0, 1.0], "x"));
        assert!(bad(vec![0.5, 1.0, 1.0], "x"));
        assert!(bad(vec![0.0, 1.0, 2.0], "x"));
        assert!(bad(vec![0.5, 1.1, 1.4], "x"));
        assert!(bad(vec![1.8, 1.0, 0.2], "increasing"));
        assert!(!bad(vec![0.5, 1.0, 1.5], "custom"));
    }

    #[test]
    fn dropout_hazards() {
        let plan = CyclePlan::default();
        let d = DropoutScenario::flat("33pct", 0.33);
        assert_abs_diff_eq!(dropout_hazard(&d, 160.0, &plan), 3.178e-3, epsilon = 1e-6);
        assert_eq!(dropout_hazard(&DropoutScenario::none(), 160.0, &plan), 0.0);
        let dec = &DropoutScenario::defaults()[3];
        assert_eq!(dropout_hazard(dec, 320.0, &plan), 0.0);
        assert!(dropout_hazard(dec, 80.0, &plan) > 0.0);
    }

    #[test]
    fn limiting_outcomes() {
        let plan = CyclePlan::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let o = simulate_outcome(&[0.0; 3], 0.0, &plan, &mut rng);
            assert_eq!((o.u_cycles, o.delta, o.dropout), (3, false, false));
            let o = simulate_outcome(&[1.0, 0.5, 0.5], 0.0, &plan, &mut rng);
            assert_eq!((o.u_cycles, o.delta), (1, true));
        }
    }

    #[test]
    fn dlt_fraction_matches_cumulative() {
        let plan = CyclePlan::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = [1.0 - 0.75f64.powf(1.0 / 3.0); 3];
        let n = 1_000_000;
        let dlt = (0..n)
            .filter(|_| simulate_outcome(&q, 0.0, &plan, &mut rng).delta)
            .count();
        assert_abs_diff_eq!(dlt as f64 / n as f64, 0.25, epsilon = 0.001);
    }

    #[test]
    fn dropout_marginal() {
        let plan = CyclePlan::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lambda = dropout_hazard(&DropoutScenario::flat("55pct", 0.55), 10.0, &plan);
        let n = 1_000_000;
        let mut dropped = 0;
        for _ in 0..n {
            let o = simulate_outcome(&[0.0; 3], lambda, &plan, &mut rng);
            if o.dropout {
                dropped += 1;
                assert!(o.u_cycles < 3);
                assert_eq!(o.u_cycles, (o.event_day / plan.cycle_length()) as usize);
            }
        }
        assert_abs_diff_eq!(dropped as f64 / n as f64, 0.55, epsilon = 0.002);
    }

    #[test]
    fn accrual_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let g = sample_accrual(&mut rng, 10.0);
            assert!(g > 0.0);
            sum += g;
        }
        assert_abs_diff_eq!(sum / n as f64, 10.0, epsilon = 0.05);
        let a = sample_accrual(&mut ChaCha8Rng::seed_from_u64(9), 10.0);
        let b = sample_accrual(&mut ChaCha8Rng::seed_from_u64(9), 10.0);
        assert_eq!(a, b);
    }
}
