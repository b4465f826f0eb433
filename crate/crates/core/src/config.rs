//! Run configuration: a flat TOML file layered over a named profile.
//!
//! Every key of [`RunConfig`] may appear in the file; anything else is an
//! error. Keys absent from the file keep the profile's value.

use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anneal::{AnnealSchedule, InitRanges};
use crate::dynamics::ModelSpec;
use crate::error::{Error, Result};
use crate::optimizer::OptimizerSettings;
use crate::sampler::{AcceptanceRule, ProposalScheme, RunSettings};
use crate::twin::{measured_indices, NoiseSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 20 inits, 20 walkers, 1e5 steps.
    Desk,
    /// 100 inits, 100 walkers, 1e6 steps.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile '{other}' (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub dt: f64,
    pub g_true: f64,
    /// Number of intervals in the window; the window holds `n_window + 1` states.
    pub n_window: usize,
    pub t_pred: usize,
    pub noise_fraction: f64,
    pub dynamic_range: f64,
    pub n_measured: usize,
    /// `r_f0 / r_m`.
    pub r_f0_ratio: f64,
    pub alpha: f64,
    pub beta_max: u32,
    pub n_inits: usize,
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    pub lbfgs_memory: usize,
    pub walkers: usize,
    pub burn_in: usize,
    pub steps: usize,
    pub thin: usize,
    pub step_scale: f64,
    pub acceptance_rule: AcceptanceRule,
    pub proposal_scheme: ProposalScheme,
    pub record_states: bool,
    pub output: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = RunConfig {
            dim: 11,
            dt: 0.025,
            g_true: 10.0,
            n_window: 165,
            t_pred: 100,
            noise_fraction: 0.034,
            dynamic_range: 20.0,
            n_measured: 7,
            r_f0_ratio: 1e-4,
            alpha: 1.5,
            beta_max: 45,
            n_inits: 20,
            grad_tolerance: 1e-8,
            max_iterations: 5000,
            lbfgs_memory: 10,
            walkers: 20,
            burn_in: 2000,
            steps: 100_000,
            thin: 80,
            step_scale: 0.02,
            acceptance_rule: AcceptanceRule::PosteriorTimesBias,
            proposal_scheme: ProposalScheme::Componentwise,
            record_states: false,
            output: PathBuf::from("runs/desk"),
            seed: 1,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => RunConfig {
                n_inits: 100,
                walkers: 100,
                steps: 1_000_000,
                output: PathBuf::from("runs/paper"),
                ..desk
            },
        }
    }

    /// Profile defaults overridden by the keys present in `text`.
    pub fn from_toml_str(text: &str, profile: Profile) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
            merged.insert(k, v);
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_toml_str(&text, profile).map_err(|e| match e {
            Error::Config(msg) => Error::Parse { path: path.to_path_buf(), msg },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Checks every constraint of the stages this config drives.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.model()?;
        self.noise().validate().map_err(as_config)?;
        measured_indices(self.dim, self.n_measured).map_err(as_config)?;
        if !(self.g_true.is_finite()) {
            return cfg("g_true must be finite".into());
        }
        if self.n_window < 1 || self.t_pred < 1 {
            return cfg("n_window and t_pred must be >= 1".into());
        }
        if self.n_inits < 2 {
            return cfg(format!("n_inits must be >= 2, got {}", self.n_inits));
        }
        if !(self.r_f0_ratio > 0.0) {
            return cfg("r_f0_ratio must be > 0".into());
        }
        self.schedule(1.0).validate().map_err(as_config)?;
        self.optimizer().validate().map_err(as_config)?;
        self.run_settings().validate().map_err(as_config)?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::lorenz96(self.dim, self.dt).map_err(as_config)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { fraction: self.noise_fraction, dynamic_range: self.dynamic_range, seed: self.seed }
    }

    /// Measurement precision matched to the noise variance, `3 / a^2`.
    pub fn r_m(&self) -> f64 {
        1.0 / self.noise().variance()
    }

    pub fn schedule(&self, r_m: f64) -> AnnealSchedule {
        AnnealSchedule { r_f0: self.r_f0_ratio * r_m, alpha: self.alpha, beta_max: self.beta_max }
    }

    pub fn init_ranges(&self) -> InitRanges {
        InitRanges::default()
    }

    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            grad_tolerance: self.grad_tolerance,
            max_iterations: self.max_iterations,
            memory: self.lbfgs_memory,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            walkers: self.walkers,
            burn_in: self.burn_in,
            steps: self.steps,
            thin: self.thin,
            step_scale: self.step_scale,
            rule: self.acceptance_rule,
            scheme: self.proposal_scheme,
            record_states: self.record_states,
            ..RunSettings::default()
        }
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    }
}
