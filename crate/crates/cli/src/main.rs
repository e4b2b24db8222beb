use clap::{Parser, Subcommand};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use tite_core::config::{ConfigError, ExperimentConfig};
use tite_core::experiment::run_experiment;
use tite_core::likelihood::Dataset;
use tite_core::policy::{select_next_dose, EscalationState, Method, NextDose};
use tite_core::report::{format_assessments, prior_summary, read_patient_csv, write_csv, write_outputs, write_rows};
use tite_core::trial::{analyze, run_trial};

#[derive(Parser)]
#[command(name = "tite", version, about = "Multi-cycle dose-escalation models and trial simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation experiment described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `experiment.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `experiment.replications`.
        #[arg(long)]
        replications: Option<usize>,
        /// Worker threads (0 = all cores).
        #[arg(long, env = "TITE_THREADS")]
        threads: Option<usize>,
    },
    /// Assess every dose given observed patient data and recommend the next one.
    Fit {
        #[arg(long)]
        model: Method,
        /// CSV with columns id, dose_mg, u_cycles, delta (and optionally dropout).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Override the sampler seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prior DLT-probability quantiles per dose and model as CSV.
    PriorSummary {
        #[arg(long)]
        config: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulate one trial and write its audit trail as JSON lines.
    Trial {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value = "constant")]
        toxicity: String,
        #[arg(long, default_value = "none")]
        dropout: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Audit trail destination; stdout when omitted.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Data(String),
    Other(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(other)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn simulate(
    config: PathBuf,
    out: Option<PathBuf>,
    replications: Option<usize>,
    threads: Option<usize>,
) -> Result<ExitCode, Failure> {
    let mut cfg = ExperimentConfig::from_path(&config)?;
    if let Some(r) = replications {
        if r == 0 {
            return Err(Failure::Config("--replications must be at least 1".into()));
        }
        cfg.experiment.replications = r;
    }
    if let Some(t) = threads {
        cfg.experiment.parallelism = t;
    }
    let dir = out
        .or_else(|| cfg.experiment.out_dir.clone())
        .ok_or_else(|| Failure::Config("no output directory: pass --out or set experiment.out_dir".into()))?;
    let plan = cfg.experiment_plan();
    let (rows, report) = run_experiment(&plan).map_err(other)?;
    write_outputs(&dir, &rows, &report).map_err(other)?;
    eprintln!(
        "{} cells x {} replications written to {}",
        plan.cells.len(),
        plan.replications,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn fit(model: Method, data: PathBuf, config: PathBuf, seed: Option<u64>) -> Result<ExitCode, Failure> {
    let cfg = ExperimentConfig::from_path(&config)?;
    let setup = &cfg.setup;
    let file = File::open(&data).map_err(|e| Failure::Data(format!("{}: {e}", data.display())))?;
    let records = read_patient_csv(file, &setup.grid, &setup.plan)
        .map_err(|e| Failure::Data(format!("{}:\n{e}", data.display())))?;

    let mut state = EscalationState::new(setup.grid.len());
    for r in &records {
        let k = setup.grid.index_of(r.dose).expect("validated dose");
        state.enrolled[k] += 1;
        state.highest_administered = Some(state.highest_administered.map_or(k, |h| h.max(k)));
    }
    if let Some(last) = records.last() {
        state.cohort_doses.push(setup.grid.index_of(last.dose).expect("validated dose"));
    } else {
        let start = setup.trial.start_index(&setup.grid).map_err(|e| Failure::Config(e.to_string()))?;
        state.highest_administered = start.checked_sub(1);
    }

    let dataset = Dataset::new(records, setup.grid.clone(), setup.plan).map_err(|e| Failure::Data(e.to_string()))?;
    let mut sampler = setup.sampler.clone();
    if let Some(s) = seed {
        sampler.seed = s;
    }
    let analysis = analyze(
        &setup.priors,
        model,
        &dataset,
        &setup.thresholds,
        &sampler,
        setup.trial.retry_nonconverged,
    )
    .map_err(other)?;
    let next = select_next_dose(&analysis.assessments, &state, &setup.grid, setup.trial.escalation_cap);

    let mut out = io::stdout().lock();
    let write = |out: &mut io::StdoutLock, s: String| out.write_all(s.as_bytes()).map_err(other);
    write(&mut out, format!("model {model}, {} patients\n", dataset.records.len()))?;
    write(&mut out, format_assessments(&analysis.assessments))?;
    if !analysis.converged {
        write(
            &mut out,
            format!(
                "warning: diagnostics not met (max rhat {:.3}, min ess {:.0})\n",
                analysis.max_rhat, analysis.min_ess
            ),
        )?;
    }
    match next {
        NextDose::Dose(d) => {
            write(&mut out, format!("recommended next dose: {d}\n"))?;
            Ok(ExitCode::SUCCESS)
        }
        NextDose::StopToxicity => {
            write(&mut out, "recommendation: stop for toxicity\n".into())?;
            Ok(ExitCode::from(4))
        }
    }
}

fn prior(config: PathBuf, out: Option<PathBuf>, draws: usize, seed: u64) -> Result<ExitCode, Failure> {
    let cfg = ExperimentConfig::from_path(&config)?;
    if draws < 2 {
        return Err(Failure::Config("--draws must be at least 2".into()));
    }
    let rows = prior_summary(&cfg.setup, draws, seed);
    match out {
        Some(p) => write_csv(&p, &rows).map_err(other)?,
        None => write_rows(io::stdout().lock(), &rows).map_err(other)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn trial(
    config: PathBuf,
    method: Method,
    toxicity: String,
    dropout: String,
    seed: u64,
    audit: Option<PathBuf>,
) -> Result<ExitCode, Failure> {
    let cfg = ExperimentConfig::from_path(&config)?;
    let tox = cfg
        .toxicity
        .iter()
        .find(|t| t.name == toxicity)
        .ok_or_else(|| Failure::Config(format!("no toxicity scenario named `{toxicity}`")))?;
    let drop = cfg
        .dropout
        .iter()
        .find(|d| d.name == dropout)
        .ok_or_else(|| Failure::Config(format!("no dropout regime named `{dropout}`")))?;
    let res = run_trial(&cfg.setup, tox, drop, method, seed).map_err(other)?;
    res.write_audit(output(audit.as_ref())?).map_err(other)?;
    eprintln!(
        "{}: {} patients, {:.1} days, {} analyses",
        match res.outcome.mtd_dose() {
            Some(d) => format!("MTD {d}"),
            None => res.outcome.label().to_string(),
        },
        res.n_enrolled,
        res.duration_days,
        res.audit.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            replications,
            threads,
        } => simulate(config, out, replications, threads),
        Command::Fit {
            model,
            data,
            config,
            seed,
        } => fit(model, data, config, seed),
        Command::PriorSummary {
            config,
            out,
            draws,
            seed,
        } => prior(config, out, draws, seed),
        Command::Trial {
            config,
            method,
            toxicity,
            dropout,
            seed,
            audit,
        } => trial(config, method, toxicity, dropout, seed, audit),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
