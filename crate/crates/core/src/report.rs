//! File outputs: per-replication CSV, aggregate report, tidy figure tables,
//! prior summaries and patient data input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

use crate::experiment::{AggregateReport, CellReport, Estimate, ReplicationRow};
use crate::likelihood::PriorSpecBlrm;
use crate::model::{blrm_dlt_probability, cycle_hazards, event_probabilities, CyclePlan, DoseGrid, PatientRecord, TteParams};
use crate::policy::DoseAssessment;
use crate::trial::TrialSetup;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("report serialization failed: {0}")]
    Toml(#[from] toml::ser::Error),
}

pub const REPLICATIONS_CSV: &str = "replications.csv";
pub const REPORT_TOML: &str = "report.toml";
pub const MTD_CSV: &str = "mtd_declaration.csv";
pub const ALLOCATION_CSV: &str = "patient_allocation.csv";
pub const LENGTH_CSV: &str = "trial_length.csv";
pub const SAMPLE_SIZE_CSV: &str = "sample_size.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub cell: String,
    pub method: String,
    pub toxicity: String,
    pub dropout: String,
    pub category: String,
    pub probability: f64,
    pub mcse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticRow {
    pub cell: String,
    pub method: String,
    pub toxicity: String,
    pub dropout: String,
    pub statistic: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeRow {
    pub cell: String,
    pub method: String,
    pub toxicity: String,
    pub dropout: String,
    pub mean: f64,
    pub mcse: f64,
}

fn category_rows(c: &CellReport, items: &[(&str, Estimate)]) -> Vec<CategoryRow> {
    items
        .iter()
        .map(|(name, e)| CategoryRow {
            cell: c.cell.clone(),
            method: c.method.clone(),
            toxicity: c.toxicity.clone(),
            dropout: c.dropout.clone(),
            category: name.to_string(),
            probability: e.value,
            mcse: e.mcse,
        })
        .collect()
}

pub fn mtd_rows(report: &AggregateReport) -> Vec<CategoryRow> {
    report
        .cells
        .iter()
        .flat_map(|c| {
            let m = c.mtd;
            category_rows(
                c,
                &[
                    ("underdose", m.underdose),
                    ("target", m.target),
                    ("overdose", m.overdose),
                    ("stopped", m.stopped),
                ],
            )
        })
        .collect()
}

pub fn allocation_rows(report: &AggregateReport) -> Vec<CategoryRow> {
    report
        .cells
        .iter()
        .flat_map(|c| {
            let a = c.allocation;
            category_rows(
                c,
                &[("underdose", a.underdose), ("target", a.target), ("overdose", a.overdose)],
            )
        })
        .collect()
}

pub fn length_rows(report: &AggregateReport) -> Vec<StatisticRow> {
    report
        .cells
        .iter()
        .flat_map(|c| {
            let d = c.duration_days;
            [
                ("mean", d.mean),
                ("median", d.median),
                ("q10", d.q10),
                ("q25", d.q25),
                ("q75", d.q75),
                ("q90", d.q90),
            ]
            .into_iter()
            .map(|(s, v)| StatisticRow {
                cell: c.cell.clone(),
                method: c.method.clone(),
                toxicity: c.toxicity.clone(),
                dropout: c.dropout.clone(),
                statistic: s.into(),
                value: v,
            })
        })
        .collect()
}

pub fn sample_size_rows(report: &AggregateReport) -> Vec<SampleSizeRow> {
    report
        .cells
        .iter()
        .map(|c| SampleSizeRow {
            cell: c.cell.clone(),
            method: c.method.clone(),
            toxicity: c.toxicity.clone(),
            dropout: c.dropout.clone(),
            mean: c.n_enrolled.value,
            mcse: c.n_enrolled.mcse,
        })
        .collect()
}

pub fn write_rows<W: std::io::Write, T: Serialize>(writer: W, rows: &[T]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    write_rows(fs::File::create(path)?, rows)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    master_seed: u64,
    cell: Vec<CellReport>,
}

pub fn report_to_toml(report: &AggregateReport) -> Result<String, ReportError> {
    Ok(toml::to_string(&ReportFile {
        master_seed: report.master_seed,
        cell: report.cells.clone(),
    })?)
}

pub fn report_from_toml(text: &str) -> Result<AggregateReport, toml::de::Error> {
    let f: ReportFile = toml::from_str(text)?;
    Ok(AggregateReport {
        master_seed: f.master_seed,
        cells: f.cell,
    })
}

/// Write every simulation output into `dir`.
pub fn write_outputs(dir: &Path, rows: &[ReplicationRow], report: &AggregateReport) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join(REPLICATIONS_CSV), rows)?;
    fs::write(dir.join(REPORT_TOML), report_to_toml(report)?)?;
    write_csv(&dir.join(MTD_CSV), &mtd_rows(report))?;
    write_csv(&dir.join(ALLOCATION_CSV), &allocation_rows(report))?;
    write_csv(&dir.join(LENGTH_CSV), &length_rows(report))?;
    write_csv(&dir.join(SAMPLE_SIZE_CSV), &sample_size_rows(report))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSummaryRow {
    pub model: String,
    pub dose: f64,
    /// `conditional` (per-cycle) or `cumulative` (up to and including `cycle`).
    pub scale: String,
    pub cycle: usize,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
    pub prior_mean_value: f64,
}

fn summary_row(model: &str, dose: f64, scale: &str, cycle: usize, values: Vec<f64>, at_mean: f64) -> PriorSummaryRow {
    let mut d = Data::new(values);
    PriorSummaryRow {
        model: model.into(),
        dose,
        scale: scale.into(),
        cycle,
        q025: d.quantile(0.025),
        q25: d.quantile(0.25),
        q50: d.quantile(0.5),
        q75: d.quantile(0.75),
        q975: d.quantile(0.975),
        prior_mean_value: at_mean,
    }
}

/// `1 - Π_{l≤j} (1 - q_l)` for zero-based cycle `j`.
fn cumulative_through(conditional: &[f64], j: usize) -> f64 {
    1.0 - conditional[..=j].iter().map(|q| 1.0 - q).product::<f64>()
}

fn tte_rows(params: &[TteParams], mean: &TteParams, grid: &DoseGrid, plan: &CyclePlan) -> Vec<PriorSummaryRow> {
    let mut rows = Vec::new();
    for &dose in grid.doses() {
        let probs: Vec<_> = params
            .iter()
            .map(|p| event_probabilities(&cycle_hazards(p, dose, grid, plan), plan))
            .collect();
        let at_mean = event_probabilities(&cycle_hazards(mean, dose, grid, plan), plan);
        for j in 0..plan.n_cycles() {
            let cond = probs.iter().map(|e| e.conditional[j]).collect();
            rows.push(summary_row("TTE", dose, "conditional", j + 1, cond, at_mean.conditional[j]));
        }
        for j in 0..plan.n_cycles() {
            let cum = probs.iter().map(|e| cumulative_through(&e.conditional, j)).collect();
            let m = cumulative_through(&at_mean.conditional, j);
            rows.push(summary_row("TTE", dose, "cumulative", j + 1, cum, m));
        }
    }
    rows
}

fn blrm_rows(model: &str, prior: &PriorSpecBlrm, window: usize, n: usize, rng: &mut ChaCha8Rng, grid: &DoseGrid) -> Vec<PriorSummaryRow> {
    let draws: Vec<_> = (0..n).map(|_| prior.sample(rng)).collect();
    let mean = prior.mean_params();
    grid.doses()
        .iter()
        .map(|&dose| {
            let v = draws.iter().map(|p| blrm_dlt_probability(p, dose, grid)).collect();
            summary_row(model, dose, "cumulative", window, v, blrm_dlt_probability(&mean, dose, grid))
        })
        .collect()
}

/// Prior DLT-probability quantiles per dose for the time-to-DLT model and
/// both logistic comparators, from `n_draws` prior draws each.
pub fn prior_summary(setup: &TrialSetup, n_draws: usize, seed: u64) -> Vec<PriorSummaryRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (grid, plan, priors) = (&setup.grid, &setup.plan, &setup.priors);
    let tte: Vec<_> = (0..n_draws).map(|_| priors.tte.sample(&mut rng)).collect();
    let mut rows = tte_rows(&tte, &priors.tte.mean_params(), grid, plan);
    rows.extend(blrm_rows("B1", &priors.b1, 1, n_draws, &mut rng, grid));
    rows.extend(blrm_rows("B3", &priors.b3, plan.n_cycles(), n_draws, &mut rng, grid));
    rows
}

/// Aligned text table of dose assessments.
pub fn format_assessments(assessments: &[DoseAssessment]) -> String {
    let mut s = format!(
        "{:>10} {:>9} {:>9} {:>9} {:>8}\n",
        "dose_mg", "p_under", "p_target", "p_over", "ewoc_ok"
    );
    for a in assessments {
        let _ = writeln!(
            s,
            "{:>10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            a.dose, a.p_under, a.p_target, a.p_over, a.ewoc_ok
        );
    }
    s
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("{}", .0.iter().map(|(l, m)| format!("line {l}: {m}")).collect::<Vec<_>>().join("\n"))]
    Rows(Vec<(u64, String)>),
}

fn parse_flag(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(format!("expected 0/1, got `{other}`")),
    }
}

/// Patient records from CSV with columns `id, dose_mg, u_cycles, delta` and
/// an optional `dropout` column. Every malformed row is reported.
pub fn read_patient_csv<R: Read>(reader: R, grid: &DoseGrid, plan: &CyclePlan) -> Result<Vec<PatientRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let id = col("id").ok_or(DataError::MissingColumn("id"))?;
    let dose = col("dose_mg").ok_or(DataError::MissingColumn("dose_mg"))?;
    let u = col("u_cycles").ok_or(DataError::MissingColumn("u_cycles"))?;
    let delta = col("delta").ok_or(DataError::MissingColumn("delta"))?;
    let dropout = col("dropout");

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |i: usize| row.get(i).unwrap_or("");
        let parsed = (|| -> Result<PatientRecord, String> {
            let d: f64 = get(dose).parse().map_err(|_| format!("bad dose_mg `{}`", get(dose)))?;
            if grid.index_of(d).is_none() {
                return Err(format!("dose {d} is not on the grid"));
            }
            let rec = PatientRecord {
                id: get(id).to_string(),
                dose: d,
                enroll_time: 0.0,
                u_cycles: get(u).parse().map_err(|_| format!("bad u_cycles `{}`", get(u)))?,
                delta: parse_flag(get(delta))?,
                dropout: match dropout {
                    Some(k) if !get(k).is_empty() => parse_flag(get(k))?,
                    _ => false,
                },
            };
            rec.validate(plan).map_err(|e| e.to_string())?;
            Ok(rec)
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(m) => errors.push((line, m)),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(DataError::Rows(errors))
    }
}

pub fn write_patient_csv<W: std::io::Write>(w: W, records: &[PatientRecord]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["id", "dose_mg", "u_cycles", "delta", "dropout"])?;
    for r in records {
        wtr.write_record([
            r.id.clone(),
            r.dose.to_string(),
            r.u_cycles.to_string(),
            (r.delta as u8).to_string(),
            (r.dropout as u8).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
