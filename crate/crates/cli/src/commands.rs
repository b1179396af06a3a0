use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use flowlab::analysis::{
    continuity_residual, error_band_scan, linspace, max_slope, mode_metrics, posterior_profile,
    profile_jump, underestimation_ratio, velocity_profile, JumpProfile, ResidualStats, ShiftedField,
};
use flowlab::net::{read_checkpoint, train as train_net, write_checkpoint};
use flowlab::rng::{stream, Stream};
use flowlab::sim::integrate;
use flowlab::{FieldHandle, Oracle, VelocityField, VelocityNet};
use ndarray::Array2;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::export;
use crate::metrics::MetricsDoc;
use crate::CliError;

pub const ECHO_FILE: &str = "config.echo.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const ENDPOINTS_FILE: &str = "endpoints.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const PROFILES_DIR: &str = "profiles";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Oracle,
    Network,
    Averaged,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Oracle => "oracle",
            Source::Network => "network",
            Source::Averaged => "averaged",
        }
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub source: Option<Source>,
    pub checkpoint: Option<PathBuf>,
    pub t: Option<f64>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn field_file(source: Source, t: f64) -> String {
    format!("field_{}_t{}.csv", source.name(), export::fmt(t))
}

pub fn profile_file(source: &str, t: f64) -> String {
    format!("{source}_t{}.csv", export::fmt(t))
}

struct Run {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    /// Loads the config, applies overrides, validates, and echoes the
    /// resolved config into the run directory.
    fn open(
        config: &Path,
        opts: &Options,
        apply_t: impl FnOnce(&mut ExperimentConfig, f64),
    ) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::load(config)?;
        if let Some(out) = &opts.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = opts.seed {
            cfg.seed = seed;
        }
        if let Some(t) = opts.t {
            apply_t(&mut cfg, t);
        }
        cfg.validate()?;
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let echo = dir.join(ECHO_FILE);
        fs::write(&echo, cfg.to_json())
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", echo.display())))?;
        Ok(Self { cfg, dir })
    }

    fn metrics(&self) -> Result<MetricsDoc, CliError> {
        let mut doc = MetricsDoc::open(&self.dir)?;
        doc.set("config", &self.cfg)?;
        Ok(doc)
    }

    fn checkpoint_path(&self, opts: &Options) -> PathBuf {
        opts.checkpoint
            .clone()
            .unwrap_or_else(|| self.dir.join(CHECKPOINT_FILE))
    }

    fn load_network(&self, path: &Path) -> Result<VelocityNet, CliError> {
        let file = File::open(path)
            .map_err(|e| CliError::Input(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let net = read_checkpoint(BufReader::new(file))?;
        if net.dim() != self.cfg.dimension {
            return Err(CliError::Input(format!(
                "checkpoint {} has dimension {}, config has {}",
                path.display(),
                net.dim(),
                self.cfg.dimension
            )));
        }
        Ok(net)
    }

    /// `--checkpoint` if given, else the run's own checkpoint when present.
    fn optional_network(&self, opts: &Options) -> Result<Option<VelocityNet>, CliError> {
        let path = self.checkpoint_path(opts);
        if opts.checkpoint.is_none() && !path.exists() {
            return Ok(None);
        }
        self.load_network(&path).map(Some)
    }

    fn field(&self, source: Source, oracle: &Oracle, opts: &Options) -> Result<FieldHandle, CliError> {
        Ok(match source {
            Source::Oracle => FieldHandle::Oracle(oracle.clone()),
            Source::Averaged => FieldHandle::Averaged(oracle.clone()),
            Source::Network => FieldHandle::Network(self.load_network(&self.checkpoint_path(opts))?),
        })
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    epoch_losses: &'a [f64],
    steps: usize,
    checksum: &'a str,
    parameters: usize,
}

/// Trains the velocity network; writes the checkpoint and loss curve.
pub fn train(config: &Path, opts: &Options) -> Result<String, CliError> {
    let run = Run::open(config, opts, |_, _| {})?;
    let cfg = &run.cfg;
    let mut net = VelocityNet::new(
        cfg.dimension,
        &cfg.network.hidden,
        cfg.network.activation,
        &mut stream(cfg.seed, Stream::Init),
    )?;
    let report = train_net(
        &mut net,
        &cfg.prior_mixture()?,
        &cfg.target_mixture()?,
        &cfg.train_config(),
        &mut stream(cfg.seed, Stream::Train),
    )?;

    let ckpt = run.dir.join(CHECKPOINT_FILE);
    let file = File::create(&ckpt)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", ckpt.display())))?;
    write_checkpoint(&net, BufWriter::new(file))?;
    export::write_loss(&run.dir.join(LOSS_FILE), &report.epoch_losses)?;

    let mut doc = run.metrics()?;
    doc.set(
        "train",
        TrainSummary {
            epoch_losses: &report.epoch_losses,
            steps: report.steps,
            checksum: &report.checksum,
            parameters: net.num_params(),
        },
    )?;
    doc.save(&run.dir)?;

    let loss = match (report.epoch_losses.first(), report.epoch_losses.last()) {
        (Some(a), Some(b)) => format!("loss {a:.4} -> {b:.4}"),
        _ => "no epochs".into(),
    };
    Ok(format!(
        "trained {} steps in {:.1}s, {loss}; checkpoint {}",
        report.steps,
        report.wall_time_secs,
        ckpt.display()
    ))
}

/// Dumps the field and posterior over the configured grid at one time.
pub fn field(config: &Path, opts: &Options) -> Result<String, CliError> {
    let run = Run::open(config, opts, |c, t| c.analysis.field_t = t)?;
    let cfg = &run.cfg;
    let source = opts.source.unwrap_or(Source::Oracle);
    let oracle = cfg.oracle()?;
    let handle = run.field(source, &oracle, opts)?;
    let t = cfg.analysis.field_t;

    let points = cfg.analysis.field_grid.points(cfg.dimension)?;
    let mut xs = Array2::zeros((points.len(), cfg.dimension));
    for (mut row, p) in xs.rows_mut().into_iter().zip(&points) {
        row.iter_mut().zip(p).for_each(|(o, v)| *o = *v);
    }
    let v = handle.eval_batch(t, xs.view())?;
    let alpha = match source {
        Source::Network => None,
        _ => Some(
            points
                .iter()
                .map(|p| oracle.alpha(t, p))
                .collect::<flowlab::Result<Vec<_>>>()?,
        ),
    };
    let path = run.dir.join(field_file(source, t));
    export::write_field(&path, t, xs.view(), v.view(), alpha.as_deref())?;
    Ok(format!("{} rows -> {}", points.len(), path.display()))
}

#[derive(Serialize)]
struct SampleSummary {
    source: &'static str,
    particles: usize,
    steps: usize,
    method: flowlab::Method,
    t_end: f64,
}

/// Transports prior particles through the chosen field.
pub fn sample(config: &Path, opts: &Options) -> Result<String, CliError> {
    let run = Run::open(config, opts, |_, _| {})?;
    let cfg = &run.cfg;
    let source = opts.source.unwrap_or(Source::Oracle);
    let oracle = cfg.oracle()?;
    let handle = run.field(source, &oracle, opts)?;
    let prior = cfg.prior_mixture()?;
    let target = cfg.target_mixture()?;
    let n = cfg.integrate.particles;

    let x0 = prior.sample(n, &mut stream(cfg.seed, Stream::Particles))?;
    let reference = target.sample(n, &mut stream(cfg.seed, Stream::Reference))?;
    let opts_int = cfg.integrate_options();
    let transport = integrate(&handle, x0.view(), &opts_int)?;

    export::write_trajectories(&run.dir.join(TRAJECTORIES_FILE), cfg.dimension, &transport.trajectories)?;
    export::write_endpoints(
        &run.dir.join(ENDPOINTS_FILE),
        transport.endpoints.view(),
        opts_int.steps,
        opts_int.t_end,
    )?;
    export::write_samples(
        &run.dir.join(SAMPLES_FILE),
        &[("prior", x0.view()), ("target", reference.view())],
    )?;

    let modes = mode_metrics(
        transport.endpoints.view(),
        &target,
        cfg.analysis.mode_radius,
        cfg.analysis.midpoint_radius,
    )?;
    let mut doc = run.metrics()?;
    doc.set_nested("modes", source.name(), &modes)?;
    doc.set(
        "sample",
        SampleSummary {
            source: source.name(),
            particles: n,
            steps: opts_int.steps,
            method: opts_int.method,
            t_end: opts_int.t_end,
        },
    )?;
    doc.save(&run.dir)?;
    Ok(format!(
        "{} particles via {}: per-mode {:?}, midpoint mass {}",
        n,
        source.name(),
        modes.per_mode,
        modes.midpoint_mass
    ))
}

#[derive(Serialize)]
struct Sharpness {
    t: f64,
    max_slope: f64,
}

#[derive(Serialize)]
struct ProfileSection {
    headline_t: f64,
    headline_delta: f64,
    jump_profiles: std::collections::BTreeMap<&'static str, Vec<JumpProfile>>,
    posterior_sharpness: Vec<Sharpness>,
    residuals: Vec<ResidualStats>,
    residual_negative_control: Vec<ResidualStats>,
    residual_bound_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_band: Option<Vec<flowlab::analysis::BandError>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    underestimation_ratio: Option<f64>,
    profile_files: Vec<String>,
}

/// Jump and posterior profiles, continuity residuals, and with a network
/// the error band and underestimation ratio.
pub fn profile(config: &Path, opts: &Options) -> Result<String, CliError> {
    let run = Run::open(config, opts, |c, t| c.analysis.t_list = vec![t])?;
    let cfg = &run.cfg;
    let a = &cfg.analysis;
    let oracle = cfg.oracle()?;
    oracle.require_symmetric_two_modes()?;
    let net = run.optional_network(opts)?;

    let profiles_dir = run.dir.join(PROFILES_DIR);
    fs::create_dir_all(&profiles_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", profiles_dir.display())))?;
    let offsets = linspace(-a.profile_extent, a.profile_extent, a.profile_points);

    let mut fields: Vec<(&'static str, &dyn VelocityField)> = vec![("oracle", &oracle)];
    if let Some(n) = &net {
        fields.push(("network", n));
    }

    let mut jump_profiles = std::collections::BTreeMap::new();
    let mut posterior_sharpness = Vec::new();
    let mut profile_files = Vec::new();
    for &t in &a.t_list {
        let line = oracle.decision_boundary(t)?;
        posterior_sharpness.push(Sharpness {
            t,
            max_slope: max_slope(&posterior_profile(&oracle, t, &line, &offsets)?),
        });
        for (name, f) in &fields {
            jump_profiles
                .entry(*name)
                .or_insert_with(Vec::new)
                .push(profile_jump(*f, &oracle, t, &a.deltas)?);
            let rows = velocity_profile(*f, &oracle, t, &line, &offsets)?;
            let file = profile_file(name, t);
            export::write_profile(&profiles_dir.join(&file), cfg.dimension, &rows)?;
            profile_files.push(format!("{PROFILES_DIR}/{file}"));
        }
    }

    let mut residuals = Vec::new();
    let mut negative = Vec::new();
    let shifted = ShiftedField {
        inner: &oracle,
        shift: a.residual_shift.clone(),
    };
    for &t in &a.residual_t_list {
        residuals.push(continuity_residual(&oracle, &oracle, t, &a.residual_grid, &a.fd)?);
        negative.push(continuity_residual(&oracle, &shifted, t, &a.residual_grid, &a.fd)?);
    }

    let (error_band, ratio) = match &net {
        Some(n) => {
            let band = error_band_scan(
                n,
                &oracle,
                &a.t_list,
                a.band_halfwidth,
                a.band_samples,
                &mut stream(cfg.seed, Stream::Band),
            )?;
            let d = [a.headline_delta];
            let ratio = underestimation_ratio(
                &profile_jump(n, &oracle, a.headline_t, &d)?,
                &profile_jump(&oracle, &oracle, a.headline_t, &d)?,
                a.headline_delta,
            );
            (Some(band), ratio)
        }
        None => (None, None),
    };

    let summary = match ratio {
        Some(r) => format!("underestimation ratio {r:.3}"),
        None => "oracle only".to_string(),
    };
    let mut doc = run.metrics()?;
    doc.set(
        "profile",
        ProfileSection {
            headline_t: a.headline_t,
            headline_delta: a.headline_delta,
            jump_profiles,
            posterior_sharpness,
            residuals,
            residual_negative_control: negative,
            residual_bound_factor: 1e-3,
            error_band,
            underestimation_ratio: ratio,
            profile_files,
        },
    )?;
    doc.save(&run.dir)?;
    Ok(format!("profiles at {} times, {summary}", a.t_list.len()))
}
