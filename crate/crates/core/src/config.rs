//! TOML experiment configuration.
//!
//! Every section is optional and falls back to the two-user defaults. Users
//! are identical: one energy, channel and arrival description applies to all
//! of them. Unknown keys are rejected, and every error names the offending
//! key as a dotted path.
//!
//! ```toml
//! [system]
//! users = 2
//! horizon = 10
//! r_max = 4.0
//! b_max = 4.0
//! cost = "exp-distortion"
//! rate = "log-rate"
//!
//! [energy]
//! support = [0.0, 1.0]
//! probs = [0.6, 0.4]
//!
//! [channel]
//! support = [0.1, 1.0]
//! probs = [0.4, 0.6]
//!
//! [arrival]
//! prob = 0.4
//!
//! [weight]
//! support = [1.0, 2.0]
//! probs = [0.6, 0.4]
//!
//! [discretization]
//! step = 1.0
//!
//! [nn]
//! hidden = [64, 64]
//! learning_rate = 1e-3
//! momentum = 0.9
//! batch_size = 64
//! epochs = 200
//! patience = 20
//! validation_fraction = 0.1
//! training_paths = 2000
//!
//! [offline]
//! ktol = 1e-6
//! t0 = 1.0
//! mu = 10.0
//! alpha = 0.25
//! beta = 0.5
//! max_newton = 2000
//!
//! [experiment]
//! seed = 1
//! episodes = 10000
//! policies = ["offline", "nn", "mdp", "greedy"]
//! sweep_param = "i_prob"
//! sweep_values = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
//! dominance_tol = 1e-6
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{CostFn, Distribution, RateFn, StochasticModel, SystemParams, UserProcesses};
use crate::nn::TrainConfig;
use crate::sim::{ExperimentConfig, PolicyKind, Sweep, SweepParam};
use crate::solver::SolverOptions;

fn key_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub users: usize,
    pub horizon: usize,
    pub r_max: f64,
    pub b_max: f64,
    pub cost: String,
    pub rate: String,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            users: 2,
            horizon: 10,
            r_max: 4.0,
            b_max: 4.0,
            cost: "exp-distortion".into(),
            rate: "log-rate".into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistSection {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DistSection {
    fn new(support: &[f64], probs: &[f64]) -> Self {
        Self {
            support: support.to_vec(),
            probs: probs.to_vec(),
        }
    }

    fn build(&self, key: &str) -> Result<Distribution> {
        if self.support.len() != self.probs.len() {
            return Err(key_err(
                &format!("{key}.probs"),
                format!(
                    "{} probabilities for {} support points",
                    self.probs.len(),
                    self.support.len()
                ),
            ));
        }
        if self.support.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(key_err(
                &format!("{key}.support"),
                "values must be finite and non-negative",
            ));
        }
        Distribution::new(self.support.clone(), self.probs.clone())
            .map_err(|e| key_err(&format!("{key}.probs"), e.to_string()))
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ArrivalSection {
    pub prob: f64,
}

impl Default for ArrivalSection {
    fn default() -> Self {
        Self { prob: 0.4 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationSection {
    pub step: f64,
}

impl Default for DiscretizationSection {
    fn default() -> Self {
        Self { step: 1.0 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NnSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub training_paths: usize,
}

impl Default for NnSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: t.hidden,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            validation_fraction: t.validation_fraction,
            training_paths: 2000,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineSection {
    pub ktol: f64,
    pub t0: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_newton: usize,
}

impl Default for OfflineSection {
    fn default() -> Self {
        let s = SolverOptions::default();
        Self {
            ktol: s.ktol,
            t0: s.t0,
            mu: s.mu,
            alpha: s.alpha,
            beta: s.beta,
            max_newton: s.max_newton,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub episodes: usize,
    pub policies: Vec<String>,
    pub sweep_param: Option<String>,
    pub sweep_values: Vec<f64>,
    pub dominance_tol: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 1,
            episodes: 10_000,
            policies: PolicyKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            sweep_param: None,
            sweep_values: Vec::new(),
            dominance_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub system: SystemSection,
    pub energy: DistSection,
    pub channel: DistSection,
    pub arrival: ArrivalSection,
    pub weight: DistSection,
    pub discretization: DiscretizationSection,
    pub nn: NnSection,
    pub offline: OfflineSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            system: SystemSection::default(),
            energy: DistSection::new(&[0.0, 1.0], &[0.6, 0.4]),
            channel: DistSection::new(&[0.1, 1.0], &[0.4, 0.6]),
            arrival: ArrivalSection::default(),
            weight: DistSection::new(&[1.0, 2.0], &[0.6, 0.4]),
            discretization: DiscretizationSection::default(),
            nn: NnSection::default(),
            offline: OfflineSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl Config {
    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let msg = e.inner().message().to_string();
            key_err(if key == "." { "(root)" } else { &key }, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        self.model()?;
        self.train_config()?;
        self.solver_options()?;
        self.policies()?;
        self.sweep()?;
        if self.discretization.step <= 0.0 || !self.discretization.step.is_finite() {
            return Err(key_err("discretization.step", "must be positive"));
        }
        if self.experiment.episodes == 0 {
            return Err(key_err("experiment.episodes", "must be at least 1"));
        }
        if !(self.experiment.dominance_tol >= 0.0) {
            return Err(key_err("experiment.dominance_tol", "must be non-negative"));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<SystemParams> {
        let s = &self.system;
        if s.users == 0 || s.users > 8 {
            return Err(key_err("system.users", "must be between 1 and 8"));
        }
        if s.horizon == 0 {
            return Err(key_err("system.horizon", "must be at least 1"));
        }
        if !(s.r_max > 0.0 && s.r_max.is_finite()) {
            return Err(key_err("system.r_max", "must be positive"));
        }
        if !(s.b_max > 0.0 && s.b_max.is_finite()) {
            return Err(key_err("system.b_max", "must be positive"));
        }
        let cost = CostFn::from_name(&s.cost, s.r_max)
            .ok_or_else(|| key_err("system.cost", format!("unknown cost function `{}`", s.cost)))?;
        let rate = RateFn::from_name(&s.rate)
            .ok_or_else(|| key_err("system.rate", format!("unknown rate function `{}`", s.rate)))?;
        SystemParams::new(s.users, s.horizon, s.r_max, s.b_max, cost, rate)
            .map_err(|e| key_err("system", e.to_string()))
    }

    pub fn model(&self) -> Result<StochasticModel> {
        let energy = self.energy.build("energy")?;
        let channel = self.channel.build("channel")?;
        if channel.support().iter().any(|&h| h <= 0.0) {
            return Err(key_err("channel.support", "gains must be positive"));
        }
        if !(0.0..=1.0).contains(&self.arrival.prob) {
            return Err(key_err("arrival.prob", "must lie in [0, 1]"));
        }
        let weight = self.weight.build("weight")?;
        if weight.support().iter().any(|&w| w <= 0.0) {
            return Err(key_err("weight.support", "weights must be positive"));
        }
        let user = UserProcesses {
            energy,
            channel,
            arrival_prob: self.arrival.prob,
        };
        Ok(StochasticModel {
            users: vec![user; self.system.users.max(1)],
            weight,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let n = &self.nn;
        if n.hidden.is_empty() || n.hidden.contains(&0) {
            return Err(key_err(
                "nn.hidden",
                "needs at least one non-empty hidden layer",
            ));
        }
        if !(n.learning_rate > 0.0) {
            return Err(key_err("nn.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&n.momentum) {
            return Err(key_err("nn.momentum", "must lie in [0, 1)"));
        }
        if n.batch_size == 0 {
            return Err(key_err("nn.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&n.validation_fraction) {
            return Err(key_err("nn.validation_fraction", "must lie in [0, 1)"));
        }
        if n.training_paths == 0 {
            return Err(key_err("nn.training_paths", "must be at least 1"));
        }
        Ok(TrainConfig {
            hidden: n.hidden.clone(),
            learning_rate: n.learning_rate,
            momentum: n.momentum,
            batch_size: n.batch_size,
            epochs: n.epochs,
            patience: n.patience,
            validation_fraction: n.validation_fraction,
            seed: self.experiment.seed,
        })
    }

    pub fn solver_options(&self) -> Result<SolverOptions> {
        let o = &self.offline;
        if !(o.ktol > 0.0) {
            return Err(key_err("offline.ktol", "must be positive"));
        }
        if !(o.t0 > 0.0) {
            return Err(key_err("offline.t0", "must be positive"));
        }
        if !(o.mu > 1.0) {
            return Err(key_err("offline.mu", "must exceed 1"));
        }
        if !(o.alpha > 0.0 && o.alpha < 0.5) {
            return Err(key_err("offline.alpha", "must lie in (0, 0.5)"));
        }
        if !(o.beta > 0.0 && o.beta < 1.0) {
            return Err(key_err("offline.beta", "must lie in (0, 1)"));
        }
        Ok(SolverOptions {
            ktol: o.ktol,
            t0: o.t0,
            mu: o.mu,
            alpha: o.alpha,
            beta: o.beta,
            max_newton: o.max_newton,
            ..SolverOptions::default()
        })
    }

    pub fn policies(&self) -> Result<Vec<PolicyKind>> {
        if self.experiment.policies.is_empty() {
            return Err(key_err("experiment.policies", "select at least one policy"));
        }
        self.experiment
            .policies
            .iter()
            .map(|p| {
                PolicyKind::from_name(p)
                    .ok_or_else(|| key_err("experiment.policies", format!("unknown policy `{p}`")))
            })
            .collect()
    }

    pub fn sweep(&self) -> Result<Option<Sweep>> {
        let Some(name) = &self.experiment.sweep_param else {
            return Ok(None);
        };
        let param = SweepParam::from_name(name).ok_or_else(|| {
            key_err(
                "experiment.sweep_param",
                format!("unknown parameter `{name}` (expected e_prob, p_prob or i_prob)"),
            )
        })?;
        if self.experiment.sweep_values.is_empty() {
            return Err(key_err("experiment.sweep_values", "no values to sweep"));
        }
        if let Some(v) = self
            .experiment
            .sweep_values
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(key_err(
                "experiment.sweep_values",
                format!("{v} outside [0, 1]"),
            ));
        }
        let two_point = |d: &DistSection, key: &str| {
            if d.support.len() == 2 {
                Ok(())
            } else {
                Err(key_err(
                    key,
                    format!("sweeping {name} needs exactly two support points"),
                ))
            }
        };
        match param {
            SweepParam::EProb => two_point(&self.energy, "energy.support")?,
            SweepParam::IProb => two_point(&self.weight, "weight.support")?,
            SweepParam::PProb => {}
        }
        Ok(Some(Sweep {
            param,
            values: self.experiment.sweep_values.clone(),
        }))
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let sweep = self
            .sweep()?
            .ok_or_else(|| key_err("experiment.sweep_param", "required for an experiment run"))?;
        Ok(ExperimentConfig {
            params: self.params()?,
            model: self.model()?,
            sweep,
            episodes: self.experiment.episodes,
            seed: self.experiment.seed,
            policies: self.policies()?,
            grid_step: self.discretization.step,
            training_paths: self.nn.training_paths,
            train: self.train_config()?,
            solver: self.solver_options()?,
            dominance_tol: self.experiment.dominance_tol,
        })
    }
}
