//! Experiment configuration: one JSON document drives every subcommand.
//!
//! Every section has defaults, so `{}` is the bimodal reference experiment.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use flowlab::analysis::{FdSteps, GridSpec};
use flowlab::sim::IntegrateOptions;
use flowlab::{Activation, GaussianMixture, IsotropicGaussian, Method, Oracle, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub weight: f64,
}

impl ComponentSpec {
    fn new(mean: Vec<f64>, sigma: f64, weight: f64) -> Self {
        Self { mean, sigma, weight }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub epsilon_time: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            epsilon_time: flowlab::EPS_TIME,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: flowlab::net::DEFAULT_HIDDEN.to_vec(),
            activation: Activation::Silu,
        }
    }
}

/// Optimizer settings; the time clipping comes from `path.epsilon_time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            steps_per_epoch: d.steps_per_epoch,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrateConfig {
    pub method: Method,
    pub steps: usize,
    pub t_end: f64,
    pub particles: usize,
    /// Record every n-th step of the first `trajectory_particles` particles; 0 records nothing.
    pub record_every: usize,
    pub trajectory_particles: usize,
}

impl Default for IntegrateConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps: 200,
            t_end: 1.0 - flowlab::EPS_TIME,
            particles: 10_000,
            record_every: 10,
            trajectory_particles: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub t_list: Vec<f64>,
    pub deltas: Vec<f64>,
    pub headline_delta: f64,
    pub headline_t: f64,
    pub field_t: f64,
    pub field_grid: GridSpec,
    pub residual_t_list: Vec<f64>,
    pub residual_grid: GridSpec,
    pub residual_shift: Vec<f64>,
    pub fd: FdSteps,
    pub profile_points: usize,
    pub profile_extent: f64,
    pub band_halfwidth: f64,
    pub band_samples: usize,
    pub mode_radius: f64,
    pub midpoint_radius: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        use flowlab::analysis::*;
        Self {
            t_list: vec![0.3, 0.5, 0.7, 0.9],
            deltas: DEFAULT_DELTAS.to_vec(),
            headline_delta: HEADLINE_DELTA,
            headline_t: 0.5,
            field_t: 0.5,
            field_grid: GridSpec { n: 41, min: -5.0, max: 5.0 },
            residual_t_list: vec![0.3, 0.5, 0.7],
            residual_grid: GridSpec { n: 61, min: -5.0, max: 5.0 },
            residual_shift: vec![0.5, 0.5],
            fd: FdSteps::default(),
            profile_points: 201,
            profile_extent: 5.0,
            band_halfwidth: BAND_HALFWIDTH,
            band_samples: 20_000,
            mode_radius: MODE_RADIUS,
            midpoint_radius: MIDPOINT_RADIUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub dimension: usize,
    pub prior: Vec<ComponentSpec>,
    /// The first component is "mode 1": posterior columns and boundary
    /// normals refer to it.
    pub target: Vec<ComponentSpec>,
    pub path: PathConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub integrate: IntegrateConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            dimension: 2,
            prior: vec![ComponentSpec::new(vec![0.0, 0.0], 1.0, 1.0)],
            target: vec![
                ComponentSpec::new(vec![3.0, 0.0], 0.5, 0.5),
                ComponentSpec::new(vec![-3.0, 0.0], 0.5, 0.5),
            ],
            path: PathConfig::default(),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            integrate: IntegrateConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn invalid(field: impl Into<String>, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", field.into()))
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        Err(invalid(field, "must be >= 1"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }

    fn mixture(&self, field: &str, specs: &[ComponentSpec]) -> Result<GaussianMixture, CliError> {
        if specs.is_empty() {
            return Err(invalid(field, "needs at least one component"));
        }
        let mut components = Vec::with_capacity(specs.len());
        for (i, c) in specs.iter().enumerate() {
            let name = format!("{field}[{i}]");
            if c.mean.len() != self.dimension {
                return Err(invalid(
                    format!("{name}.mean"),
                    format!("has {} entries, dimension is {}", c.mean.len(), self.dimension),
                ));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(invalid(format!("{name}.mean"), "must be finite"));
            }
            positive(&format!("{name}.sigma"), c.sigma)?;
            positive(&format!("{name}.weight"), c.weight)?;
            components.push(
                IsotropicGaussian::new(c.mean.clone(), c.sigma)
                    .map_err(|e| invalid(&name, e))?,
            );
        }
        let weights = specs.iter().map(|c| c.weight).collect();
        GaussianMixture::new(components, weights).map_err(|e| invalid(format!("{field} weights"), e))
    }

    pub fn prior_mixture(&self) -> Result<GaussianMixture, CliError> {
        self.mixture("prior", &self.prior)
    }

    pub fn target_mixture(&self) -> Result<GaussianMixture, CliError> {
        self.mixture("target", &self.target)
    }

    pub fn oracle(&self) -> Result<Oracle, CliError> {
        Oracle::new(self.prior_mixture()?, self.target_mixture()?)
            .and_then(|o| o.with_eps_time(self.path.epsilon_time))
            .map_err(|e| invalid("prior/target", e))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            steps_per_epoch: t.steps_per_epoch,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            eps_time: self.path.epsilon_time,
        }
    }

    pub fn integrate_options(&self) -> IntegrateOptions {
        let i = &self.integrate;
        IntegrateOptions {
            method: i.method,
            steps: i.steps,
            t_end: i.t_end,
            record_every: i.record_every,
            record_particles: Some(i.trajectory_particles),
        }
    }

    fn t_max(&self) -> f64 {
        1.0 - self.path.epsilon_time
    }

    fn times(&self, field: &str, ts: &[f64], open_start: bool) -> Result<(), CliError> {
        if ts.is_empty() {
            return Err(invalid(field, "must not be empty"));
        }
        for (i, t) in ts.iter().enumerate() {
            let lower_ok = if open_start { *t > 0.0 } else { *t >= 0.0 };
            if !(lower_ok && *t <= self.t_max()) {
                let lo = if open_start { "(0" } else { "[0" };
                return Err(invalid(
                    format!("{field}[{i}]"),
                    format!("must lie in {lo}, {}], got {t}", self.t_max()),
                ));
            }
        }
        Ok(())
    }

    /// Field-level checks; the first failure is reported with its key path.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_name.is_empty()
            || self.run_name.contains(['/', '\\'])
            || self.run_name == "."
            || self.run_name == ".."
        {
            return Err(invalid("run_name", format!("must be a plain directory name, got {:?}", self.run_name)));
        }
        at_least_one("dimension", self.dimension)?;
        let eps = self.path.epsilon_time;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(invalid("path.epsilon_time", format!("must lie in (0, 1), got {eps}")));
        }
        self.oracle()?;

        let net = &self.network;
        if net.hidden.is_empty() {
            return Err(invalid("network.hidden", "needs at least one hidden layer"));
        }
        if let Some(i) = net.hidden.iter().position(|w| *w == 0) {
            return Err(invalid(format!("network.hidden[{i}]"), "must be >= 1"));
        }

        let t = &self.train;
        at_least_one("train.batch_size", t.batch_size)?;
        at_least_one("train.steps_per_epoch", t.steps_per_epoch)?;
        if !(t.learning_rate.is_finite() && t.learning_rate >= 0.0) {
            return Err(invalid("train.learning_rate", format!("must be >= 0, got {}", t.learning_rate)));
        }
        for (name, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        positive("train.adam_eps", t.adam_eps)?;

        let i = &self.integrate;
        at_least_one("integrate.steps", i.steps)?;
        at_least_one("integrate.particles", i.particles)?;
        if !(i.t_end > 0.0 && i.t_end <= self.t_max()) {
            return Err(invalid(
                "integrate.t_end",
                format!("must lie in (0, {}], got {}", self.t_max(), i.t_end),
            ));
        }
        if i.trajectory_particles > i.particles {
            return Err(invalid(
                "integrate.trajectory_particles",
                format!("exceeds integrate.particles ({})", i.particles),
            ));
        }

        let a = &self.analysis;
        self.times("analysis.t_list", &a.t_list, true)?;
        self.times("analysis.residual_t_list", &a.residual_t_list, true)?;
        self.times("analysis.field_t", &[a.field_t], false)?;
        self.times("analysis.headline_t", &[a.headline_t], true)?;
        if a.deltas.is_empty() {
            return Err(invalid("analysis.deltas", "must not be empty"));
        }
        for (k, d) in a.deltas.iter().enumerate() {
            positive(&format!("analysis.deltas[{k}]"), *d)?;
        }
        positive("analysis.headline_delta", a.headline_delta)?;
        for (name, g) in [("analysis.field_grid", &a.field_grid), ("analysis.residual_grid", &a.residual_grid)] {
            g.validate().map_err(|e| invalid(name, e))?;
        }
        if a.residual_shift.len() != self.dimension {
            return Err(invalid(
                "analysis.residual_shift",
                format!("has {} entries, dimension is {}", a.residual_shift.len(), self.dimension),
            ));
        }
        positive("analysis.fd.space", a.fd.space)?;
        positive("analysis.fd.time", a.fd.time)?;
        if a.profile_points < 2 {
            return Err(invalid("analysis.profile_points", "must be >= 2"));
        }
        positive("analysis.profile_extent", a.profile_extent)?;
        positive("analysis.band_halfwidth", a.band_halfwidth)?;
        at_least_one("analysis.band_samples", a.band_samples)?;
        positive("analysis.mode_radius", a.mode_radius)?;
        positive("analysis.midpoint_radius", a.midpoint_radius)?;
        Ok(())
    }
}
