//! Experiment configuration file (TOML). Unknown keys are rejected and every
//! omitted section falls back to its default, except `grid.reference_dose`.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::experiment::{factorial, ExperimentPlan};
use crate::inference::SamplerConfig;
use crate::likelihood::{PriorSpecBlrm, PriorSpecTte};
use crate::model::{CyclePlan, DoseGrid};
use crate::policy::{EwocThresholds, Method};
use crate::scenario::{DropoutScenario, ToxProfile, ToxScenario, TruthCurve};
use crate::trial::{ModelPriors, TrialConfig, TrialSetup};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub const DEFAULT_DOSES: [f64; 8] = [10., 20., 40., 80., 160., 320., 640., 1280.];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_doses")]
    pub doses: Vec<f64>,
    /// Required; there is no default reference dose.
    pub reference_dose: f64,
}

fn default_doses() -> Vec<f64> {
    DEFAULT_DOSES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub n_cycles: usize,
    pub cycle_length: f64,
    pub reference_cycle: Option<usize>,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            n_cycles: 3,
            cycle_length: 42.0,
            reference_cycle: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub tte: Option<PriorSpecTte>,
    pub b1: Option<PriorSpecBlrm>,
    pub b3: Option<PriorSpecBlrm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub methods: Vec<Method>,
    pub replications: usize,
    pub master_seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub parallelism: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            replications: 1000,
            master_seed: 20_240_601,
            parallelism: 0,
            out_dir: None,
        }
    }
}

/// The file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub grid: GridSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub priors: PriorSection,
    #[serde(default)]
    pub thresholds: EwocThresholds,
    #[serde(default)]
    pub rules: TrialConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub truth: TruthCurve,
    #[serde(default)]
    pub toxicity: Option<Vec<ToxProfile>>,
    #[serde(default)]
    pub dropout: Option<Vec<DropoutScenario>>,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Validated configuration with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub setup: TrialSetup,
    pub truth: TruthCurve,
    pub toxicity: Vec<ToxScenario>,
    pub dropout: Vec<DropoutScenario>,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_raw(raw)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let grid = DoseGrid::new(raw.grid.doses, raw.grid.reference_dose).map_err(|e| invalid(&e))?;
        let p = &raw.plan;
        let plan = CyclePlan::new(p.n_cycles, p.cycle_length, p.reference_cycle.unwrap_or(p.n_cycles))
            .map_err(|e| invalid(&e))?;
        let defaults = ModelPriors::default_for(&plan);
        let priors = ModelPriors {
            tte: raw.priors.tte.unwrap_or(defaults.tte),
            b1: raw.priors.b1.unwrap_or(defaults.b1),
            b3: raw.priors.b3.unwrap_or(defaults.b3),
        };
        let setup = TrialSetup {
            grid,
            plan,
            priors,
            thresholds: raw.thresholds,
            sampler: raw.sampler,
            trial: raw.rules,
        };
        setup.validate().map_err(|e| invalid(&e))?;

        let profiles = raw.toxicity.unwrap_or_else(|| {
            if plan.n_cycles() == 3 {
                ToxProfile::defaults()
            } else {
                vec![ToxProfile::constant(plan.n_cycles())]
            }
        });
        let toxicity = profiles
            .iter()
            .map(|t| ToxScenario::new(&raw.truth, t, &setup.grid, &plan))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(&e))?;
        let dropout = raw.dropout.unwrap_or_else(DropoutScenario::defaults);
        for d in &dropout {
            d.validate().map_err(|e| invalid(&e))?;
        }
        unique(toxicity.iter().map(|t| t.name.as_str()), "toxicity")?;
        unique(dropout.iter().map(|d| d.name.as_str()), "dropout")?;
        unique(raw.experiment.methods.iter().map(|m| m.to_string()), "method")?;
        if raw.experiment.methods.is_empty() || toxicity.is_empty() || dropout.is_empty() {
            return Err(ConfigError::Invalid("methods, toxicity and dropout lists must be non-empty".into()));
        }
        if raw.experiment.replications == 0 {
            return Err(ConfigError::Invalid("experiment.replications must be at least 1".into()));
        }
        Ok(Self {
            setup,
            truth: raw.truth,
            toxicity,
            dropout,
            experiment: raw.experiment,
        })
    }

    pub fn experiment_plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            setup: self.setup.clone(),
            cells: factorial(&self.experiment.methods, &self.toxicity, &self.dropout),
            replications: self.experiment.replications,
            master_seed: self.experiment.master_seed,
            parallelism: self.experiment.parallelism,
        }
    }
}

fn unique<S: AsRef<str>>(names: impl Iterator<Item = S>, what: &str) -> Result<(), ConfigError> {
    let mut seen: Vec<String> = Vec::new();
    for n in names {
        let n = n.as_ref();
        if seen.iter().any(|s| s == n) {
            return Err(ConfigError::Invalid(format!("duplicate {what} name `{n}`")));
        }
        seen.push(n.to_string());
    }
    Ok(())
}
