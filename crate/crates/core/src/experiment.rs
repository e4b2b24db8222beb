//! Factorial simulation experiments and their Monte Carlo summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};
use std::panic::{catch_unwind, AssertUnwindSafe};
use thiserror::Error;

use crate::policy::{classify_truth, Method, TruthCategory};
use crate::rng::{derive_seed, stable_hash};
use crate::scenario::{DropoutScenario, ToxScenario};
use crate::trial::{run_trial, TrialOutcome, TrialResult, TrialSetup};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment plan: {0}")]
    Plan(String),
    #[error("cell {cell}, replication {replication}: {message}")]
    Replication {
        cell: String,
        replication: usize,
        message: String,
    },
    #[error("no results to summarize")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub toxicity: ToxScenario,
    pub dropout: DropoutScenario,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.method, self.toxicity.name, self.dropout.name)
    }
}

/// Every combination of method, toxicity scenario and dropout regime, with
/// dropout varying fastest.
pub fn factorial(methods: &[Method], toxicity: &[ToxScenario], dropout: &[DropoutScenario]) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(methods.len() * toxicity.len() * dropout.len());
    for m in methods {
        for t in toxicity {
            for d in dropout {
                cells.push(Cell {
                    method: *m,
                    toxicity: t.clone(),
                    dropout: d.clone(),
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub setup: TrialSetup,
    pub cells: Vec<Cell>,
    pub replications: usize,
    pub master_seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub parallelism: usize,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.replications == 0 {
            return Err(ExperimentError::Plan("replications must be at least 1".into()));
        }
        if self.cells.is_empty() {
            return Err(ExperimentError::Plan("no cells".into()));
        }
        let mut ids: Vec<String> = self.cells.iter().map(Cell::id).collect();
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ExperimentError::Plan(format!("duplicate cell `{}`", w[0])));
        }
        self.setup
            .validate()
            .map_err(|e| ExperimentError::Plan(e.to_string()))
    }

    pub fn replication_seed(&self, cell: &Cell, replication: usize) -> u64 {
        derive_seed(self.master_seed, &[stable_hash(&cell.id()), replication as u64])
    }
}

/// One row of the per-replication table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub cell: String,
    pub method: String,
    pub toxicity: String,
    pub dropout: String,
    pub replication: usize,
    pub seed: u64,
    pub outcome: String,
    pub mtd_dose: Option<f64>,
    /// Truth category of the declared MTD, or `stopped`.
    pub truth_category: String,
    pub n_enrolled: usize,
    pub duration_days: f64,
    pub n_underdose: usize,
    pub n_target: usize,
    pub n_overdose: usize,
    pub nonconverged_fits: usize,
    pub replacement_cohorts: usize,
}

impl ReplicationRow {
    pub fn from_result(cell: &Cell, replication: usize, res: &TrialResult, setup: &TrialSetup) -> Self {
        let truth = cell.toxicity.cumulative();
        let category = |k: usize| classify_truth(truth[k], &setup.thresholds);
        let mut counts = [0usize; 3];
        for p in &res.patients {
            counts[category_index(category(p.dose_index))] += 1;
        }
        let truth_category = match res.outcome {
            TrialOutcome::Mtd(d) => category(setup.grid.index_of(d).expect("MTD on grid")).as_str(),
            _ => "stopped",
        };
        Self {
            cell: cell.id(),
            method: cell.method.to_string(),
            toxicity: cell.toxicity.name.clone(),
            dropout: cell.dropout.name.clone(),
            replication,
            seed: res.seed,
            outcome: res.outcome.label().into(),
            mtd_dose: res.outcome.mtd_dose(),
            truth_category: truth_category.into(),
            n_enrolled: res.n_enrolled,
            duration_days: res.duration_days,
            n_underdose: counts[0],
            n_target: counts[1],
            n_overdose: counts[2],
            nonconverged_fits: res.nonconverged_fits,
            replacement_cohorts: res.replacement_cohorts,
        }
    }
}

fn category_index(c: TruthCategory) -> usize {
    match c {
        TruthCategory::Underdose => 0,
        TruthCategory::Target => 1,
        TruthCategory::Overdose => 2,
    }
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Run every replication of every cell. Rows come back grouped by cell in
/// plan order, replications ascending, independent of thread count.
pub fn run_replications(plan: &ExperimentPlan) -> Result<Vec<ReplicationRow>, ExperimentError> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.cells.len())
        .flat_map(|c| (0..plan.replications).map(move |r| (c, r)))
        .collect();
    let run = |&(c, r): &(usize, usize)| -> Result<ReplicationRow, ExperimentError> {
        let cell = &plan.cells[c];
        let seed = plan.replication_seed(cell, r);
        let fail = |message: String| ExperimentError::Replication {
            cell: cell.id(),
            replication: r,
            message,
        };
        let res = catch_unwind(AssertUnwindSafe(|| {
            run_trial(&plan.setup, &cell.toxicity, &cell.dropout, cell.method, seed)
        }))
        .map_err(|e| fail(panic_message(e)))?
        .map_err(|e| fail(e.to_string()))?;
        Ok(ReplicationRow::from_result(cell, r, &res, &plan.setup))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| ExperimentError::Plan(e.to_string()))?;
    let rows: Vec<Result<ReplicationRow, ExperimentError>> = pool.install(|| jobs.par_iter().map(run).collect());
    rows.into_iter().collect()
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub mcse: f64,
}

/// Proportion over `r` independent replications.
pub fn proportion(successes: usize, r: usize) -> Estimate {
    let p = successes as f64 / r as f64;
    Estimate {
        value: p,
        mcse: (p * (1.0 - p) / r as f64).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtdCategories {
    pub underdose: Estimate,
    pub target: Estimate,
    pub overdose: Estimate,
    pub stopped: Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub underdose: Estimate,
    pub target: Estimate,
    pub overdose: Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationSummary {
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q25: f64,
    pub q75: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: String,
    pub method: String,
    pub toxicity: String,
    pub dropout: String,
    pub replications: usize,
    pub mtd: MtdCategories,
    pub stop_toxicity: Estimate,
    pub max_patients: Estimate,
    pub allocation: Allocation,
    pub duration_days: DurationSummary,
    pub n_enrolled: Estimate,
    pub nonconverged_fits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub master_seed: u64,
    pub cells: Vec<CellReport>,
}

/// Patient allocation by the true risk category of the assigned dose, as a
/// ratio over all enrolled patients with a cluster (per-replication) MCSE.
pub fn allocation_metrics(rows: &[ReplicationRow]) -> Result<Allocation, ExperimentError> {
    let total: usize = rows.iter().map(|r| r.n_enrolled).sum();
    if rows.is_empty() || total == 0 {
        return Err(ExperimentError::Empty);
    }
    let r = rows.len() as f64;
    let n_bar = total as f64 / r;
    let est = |get: fn(&ReplicationRow) -> usize| {
        let f = rows.iter().map(get).sum::<usize>() as f64 / total as f64;
        let mcse = if rows.len() > 1 {
            let ss: f64 = rows
                .iter()
                .map(|row| (get(row) as f64 - f * row.n_enrolled as f64).powi(2))
                .sum();
            (ss / (r * (r - 1.0))).sqrt() / n_bar
        } else {
            0.0
        };
        Estimate { value: f, mcse }
    };
    Ok(Allocation {
        underdose: est(|x| x.n_underdose),
        target: est(|x| x.n_target),
        overdose: est(|x| x.n_overdose),
    })
}

pub fn summarize_cell(rows: &[ReplicationRow]) -> Result<CellReport, ExperimentError> {
    let first = rows.first().ok_or(ExperimentError::Empty)?;
    let r = rows.len();
    let count = |f: &dyn Fn(&ReplicationRow) -> bool| rows.iter().filter(|x| f(x)).count();
    let mut durations = Data::new(rows.iter().map(|x| x.duration_days).collect::<Vec<_>>());
    let n: Vec<f64> = rows.iter().map(|x| x.n_enrolled as f64).collect();
    let n_mean = n.iter().sum::<f64>() / r as f64;
    let n_mcse = if r > 1 {
        (n.iter().map(|v| (v - n_mean).powi(2)).sum::<f64>() / (r as f64 - 1.0) / r as f64).sqrt()
    } else {
        0.0
    };
    Ok(CellReport {
        cell: first.cell.clone(),
        method: first.method.clone(),
        toxicity: first.toxicity.clone(),
        dropout: first.dropout.clone(),
        replications: r,
        mtd: MtdCategories {
            underdose: proportion(count(&|x| x.truth_category == "underdose"), r),
            target: proportion(count(&|x| x.truth_category == "target"), r),
            overdose: proportion(count(&|x| x.truth_category == "overdose"), r),
            stopped: proportion(count(&|x| x.truth_category == "stopped"), r),
        },
        stop_toxicity: proportion(count(&|x| x.outcome == "stop_toxicity"), r),
        max_patients: proportion(count(&|x| x.outcome == "max_patients"), r),
        allocation: allocation_metrics(rows)?,
        duration_days: DurationSummary {
            mean: rows.iter().map(|x| x.duration_days).sum::<f64>() / r as f64,
            median: durations.median(),
            q10: durations.quantile(0.10),
            q25: durations.quantile(0.25),
            q75: durations.quantile(0.75),
            q90: durations.quantile(0.90),
        },
        n_enrolled: Estimate {
            value: n_mean,
            mcse: n_mcse,
        },
        nonconverged_fits: rows.iter().map(|x| x.nonconverged_fits).sum(),
    })
}

/// Group rows by cell (preserving order) and summarize each group.
pub fn aggregate(rows: &[ReplicationRow], master_seed: u64) -> Result<AggregateReport, ExperimentError> {
    let mut cells = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let end = start + rows[start..].iter().take_while(|x| x.cell == rows[start].cell).count();
        cells.push(summarize_cell(&rows[start..end])?);
        start = end;
    }
    if cells.is_empty() {
        return Err(ExperimentError::Empty);
    }
    Ok(AggregateReport { master_seed, cells })
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<(Vec<ReplicationRow>, AggregateReport), ExperimentError> {
    let rows = run_replications(plan)?;
    let report = aggregate(&rows, plan.master_seed)?;
    Ok((rows, report))
}
