//! Measurements behind the discontinuity study: two-sided jump profiles
//! across the decision boundary, posterior sharpness, near-boundary error
//! bands, continuity-equation residuals and endpoint mode coverage.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_dim, FlowError, Result};
use crate::mixture::GaussianMixture;
use crate::oracle::{Boundary, Oracle};
use crate::sim::VelocityField;

/// Offsets used for the jump estimator unless configured otherwise.
pub const DEFAULT_DELTAS: [f64; 4] = [0.1, 0.25, 0.5, 1.0];
/// Offset used for the headline underestimation ratio.
pub const HEADLINE_DELTA: f64 = 0.5;
pub const MODE_RADIUS: f64 = 1.5;
pub const MIDPOINT_RADIUS: f64 = 1.0;
pub const BAND_HALFWIDTH: f64 = 0.5;

/// `n` evenly spaced points per axis on `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub min: f64,
    pub max: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(FlowError::InvalidParameter(format!(
                "grid needs at least 2 points per axis, got {}",
                self.n
            )));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(FlowError::InvalidParameter(format!(
                "grid range [{}, {}] is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        linspace(self.min, self.max, self.n)
    }

    /// Cartesian grid in `dim` dimensions, last coordinate fastest.
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let axis = self.axis();
        match dim {
            1 => Ok(axis.iter().map(|x| vec![*x]).collect()),
            2 => Ok(axis
                .iter()
                .flat_map(|x| axis.iter().map(move |y| vec![*x, *y]))
                .collect()),
            _ => Err(FlowError::Unsupported(format!(
                "grids are defined for 1 or 2 dimensions, got {dim}"
            ))),
        }
    }
}

pub fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    max
                } else {
                    min + (max - min) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Central finite-difference steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdSteps {
    pub space: f64,
    pub time: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            space: 1e-3,
            time: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEntry {
    pub delta: f64,
    pub v_plus: Vec<f64>,
    pub v_minus: Vec<f64>,
    /// `||v(+delta) - v(-delta)||`.
    pub jump: f64,
    /// Oracle posterior of the first mode at both probes.
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    /// `|alpha_plus - alpha_minus| * J(t)`: the part of the oracle change
    /// carried by the posterior switch alone.
    pub step_part: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpProfile {
    pub t: f64,
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    /// `J(t) = ||m_1 - m_2|| / (1 - t)` from conjugate posterior means.
    pub idealized: f64,
    /// `||mu_1 - mu_2|| / (1 - t)`.
    pub mode_shorthand: f64,
    pub entries: Vec<JumpEntry>,
}

impl JumpProfile {
    pub fn at(&self, delta: f64) -> Option<&JumpEntry> {
        self.entries.iter().find(|e| (e.delta - delta).abs() < 1e-12)
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Two-sided differences of `field` across `H_t` at each offset.
pub fn profile_jump<F: VelocityField + ?Sized>(
    field: &F,
    oracle: &Oracle,
    t: f64,
    deltas: &[f64],
) -> Result<JumpProfile> {
    check_dim(oracle.dim(), field.dim())?;
    if let Some(d) = deltas.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(FlowError::InvalidParameter(format!(
            "jump offsets must be positive, got {d}"
        )));
    }
    let line = oracle.decision_boundary(t)?;
    let idealized = oracle.jump_magnitude(t, &line.point)?;
    let mode_shorthand = oracle.mode_shorthand_jump(t)?;
    let entries = deltas
        .iter()
        .map(|&delta| {
            let (xp, xm) = (line.probe(delta), line.probe(-delta));
            let v_plus = field.eval(t, &xp)?;
            let v_minus = field.eval(t, &xm)?;
            let jump = norm(v_plus.iter().zip(&v_minus).map(|(a, b)| a - b));
            let alpha_plus = oracle.alpha(t, &xp)?;
            let alpha_minus = oracle.alpha(t, &xm)?;
            Ok(JumpEntry {
                delta,
                v_plus,
                v_minus,
                jump,
                alpha_plus,
                alpha_minus,
                step_part: (alpha_plus - alpha_minus).abs() * idealized,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JumpProfile {
        t,
        point: line.point,
        normal: line.normal,
        idealized,
        mode_shorthand,
        entries,
    })
}

/// `Jhat_net / Jhat_oracle` at one offset.
pub fn underestimation_ratio(
    network: &JumpProfile,
    oracle: &JumpProfile,
    delta: f64,
) -> Option<f64> {
    let n = network.at(delta)?.jump;
    let o = oracle.at(delta)?.jump;
    (o > 0.0).then_some(n / o)
}

/// Oracle posterior of the first mode along `line` at the given offsets.
pub fn posterior_profile(
    oracle: &Oracle,
    t: f64,
    line: &Boundary,
    offsets: &[f64],
) -> Result<Vec<(f64, f64)>> {
    offsets
        .iter()
        .map(|&s| Ok((s, oracle.alpha(t, &line.probe(s))?)))
        .collect()
}

/// Largest finite-difference slope of a sampled profile.
pub fn max_slope(profile: &[(f64, f64)]) -> f64 {
    profile
        .windows(2)
        .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub t: f64,
    pub offset: f64,
    pub velocity: Vec<f64>,
    pub alpha: f64,
}

/// Field values and oracle posterior along `line`.
pub fn velocity_profile<F: VelocityField + ?Sized>(
    field: &F,
    oracle: &Oracle,
    t: f64,
    line: &Boundary,
    offsets: &[f64],
) -> Result<Vec<ProfileRow>> {
    let pts: Vec<Vec<f64>> = offsets.iter().map(|s| line.probe(*s)).collect();
    let xs = to_matrix(&pts, oracle.dim())?;
    let v = field.eval_batch(t, xs.view())?;
    offsets
        .iter()
        .zip(&pts)
        .enumerate()
        .map(|(i, (s, x))| {
            Ok(ProfileRow {
                t,
                offset: *s,
                velocity: v.row(i).to_vec(),
                alpha: oracle.alpha(t, x)?,
            })
        })
        .collect()
}

fn to_matrix(points: &[Vec<f64>], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((points.len(), dim));
    for (mut row, p) in out.rows_mut().into_iter().zip(points) {
        check_dim(dim, p.len())?;
        row.iter_mut().zip(p).for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}

/// Exact sampler for `p_t` restricted to `|<x - point, normal>| <= halfwidth`.
///
/// Each marginal component is reweighted by its band mass; within a component
/// the normal coordinate is a truncated normal (inverse CDF, evaluated in the
/// lower tail for precision) and the tangential coordinates are untouched.
pub struct BandSampler {
    line: Boundary,
    halfwidth: f64,
    centres: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
    /// Standardized truncation interval per component.
    bounds: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
    std_normal: Normal,
}

impl BandSampler {
    pub fn new(oracle: &Oracle, t: f64, halfwidth: f64) -> Result<Self> {
        if !(halfwidth.is_finite() && halfwidth > 0.0) {
            return Err(FlowError::InvalidParameter(format!(
                "band halfwidth must be positive, got {halfwidth}"
            )));
        }
        let line = oracle.decision_boundary(t)?;
        let marginal = oracle.marginal_at(t)?;
        let std_normal = Normal::standard();
        let mut centres = Vec::new();
        let mut sigmas = Vec::new();
        let mut bounds = Vec::new();
        let mut masses = Vec::new();
        for (c, w) in marginal.components().iter().zip(marginal.weights()) {
            let a = line.signed_offset(c.mean());
            let (lo, hi) = ((-halfwidth - a) / c.sigma(), (halfwidth - a) / c.sigma());
            let mass = if lo > 0.0 {
                std_normal.cdf(-lo) - std_normal.cdf(-hi)
            } else {
                std_normal.cdf(hi) - std_normal.cdf(lo)
            };
            centres.push(c.mean().to_vec());
            sigmas.push(c.sigma());
            bounds.push((lo, hi));
            masses.push(w * mass);
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(FlowError::InvalidParameter(
                "band carries no probability mass at this time".into(),
            ));
        }
        let mut acc = 0.0;
        let cumulative = masses
            .iter()
            .map(|m| {
                acc += m / total;
                acc
            })
            .collect();
        Ok(Self {
            line,
            halfwidth,
            centres,
            sigmas,
            bounds,
            cumulative,
            std_normal,
        })
    }

    pub fn halfwidth(&self) -> f64 {
        self.halfwidth
    }

    fn truncated<R: Rng + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        // work in whichever tail keeps the CDF values small
        let (lo_r, hi_r, flip) = if lo > 0.0 { (-hi, -lo, true) } else { (lo, hi, false) };
        let (p_lo, p_hi) = (self.std_normal.cdf(lo_r), self.std_normal.cdf(hi_r));
        let u = p_lo + rng.random::<f64>() * (p_hi - p_lo);
        let z = self.std_normal.inverse_cdf(u).clamp(lo_r, hi_r);
        if flip {
            -z
        } else {
            z
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let k = self
            .cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or(self.cumulative.len() - 1);
        let (lo, hi) = self.bounds[k];
        let z = self.truncated(lo, hi, rng);
        let n = &self.line.normal;
        let xi: Vec<f64> = (0..out.len()).map(|_| rng.sample(StandardNormal)).collect();
        let along: f64 = xi.iter().zip(n).map(|(a, b)| a * b).sum();
        for i in 0..out.len() {
            let perp = xi[i] - along * n[i];
            out[i] = self.centres[k][i] + self.sigmas[k] * (perp + z * n[i]);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.line.normal.len();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            self.sample_into(rng, row.as_slice_mut().unwrap());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandError {
    pub t: f64,
    /// Mean of `||v(x, t) - v*(x, t)||^2` over band samples.
    pub error: f64,
    pub samples: usize,
}

/// Near-boundary squared error of `field` against the oracle at each time.
pub fn error_band_scan<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    oracle: &Oracle,
    times: &[f64],
    halfwidth: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<BandError>> {
    check_dim(oracle.dim(), field.dim())?;
    if samples == 0 {
        return Err(FlowError::InvalidParameter("band samples must be >= 1".into()));
    }
    times
        .iter()
        .map(|&t| {
            let xs = BandSampler::new(oracle, t, halfwidth)?.sample(samples, rng);
            let v = field.eval_batch(t, xs.view())?;
            let exact = oracle.eval_batch(t, xs.view())?;
            let total: f64 = (&v - &exact).iter().map(|d| d * d).sum();
            Ok(BandError {
                t,
                error: total / samples as f64,
                samples,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub particles: usize,
    /// Fraction of endpoints within `mode_radius` of each target mean.
    pub per_mode: Vec<f64>,
    /// Fraction within `mode_radius` of any target mean.
    pub covered: f64,
    /// Fraction within `midpoint_radius` of the weighted mean of the modes.
    pub midpoint_mass: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub mode_radius: f64,
    pub midpoint_radius: f64,
}

pub fn mode_metrics(
    endpoints: ArrayView2<f64>,
    target: &GaussianMixture,
    mode_radius: f64,
    midpoint_radius: f64,
) -> Result<ModeMetrics> {
    let n = endpoints.nrows();
    if n == 0 {
        return Err(FlowError::InvalidParameter("no endpoints".into()));
    }
    check_dim(target.dim(), endpoints.ncols())?;
    let dist = |row: ndarray::ArrayView1<f64>, c: &[f64]| {
        norm(row.iter().zip(c).map(|(a, b)| a - b))
    };
    let centre = target.mean();
    let mut per_mode = vec![0usize; target.len()];
    let (mut covered, mut mid) = (0usize, 0usize);
    for row in endpoints.rows() {
        let mut hit = false;
        for (k, c) in target.components().iter().enumerate() {
            if dist(row, c.mean()) <= mode_radius {
                per_mode[k] += 1;
                hit = true;
            }
        }
        covered += hit as usize;
        mid += (dist(row, &centre) <= midpoint_radius) as usize;
    }
    let frac = |c: usize| c as f64 / n as f64;
    let mean: Vec<f64> = endpoints.columns().into_iter().map(|c| c.sum() / n as f64).collect();
    let std = endpoints
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    Ok(ModeMetrics {
        particles: n,
        per_mode: per_mode.into_iter().map(frac).collect(),
        covered: frac(covered),
        midpoint_mass: frac(mid),
        mean,
        std,
        mode_radius,
        midpoint_radius,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub t: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub max_density: f64,
    /// `max_abs / max_density`.
    pub relative_max: f64,
}

/// `v(t, x) + shift`, for negative controls.
pub struct ShiftedField<'a, F: ?Sized> {
    pub inner: &'a F,
    pub shift: Vec<f64>,
}

impl<F: VelocityField + ?Sized> VelocityField for ShiftedField<'_, F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn t_max(&self) -> f64 {
        self.inner.t_max()
    }

    fn eval_batch(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut v = self.inner.eval_batch(t, xs)?;
        for mut row in v.rows_mut() {
            row.iter_mut().zip(&self.shift).for_each(|(a, b)| *a += b);
        }
        Ok(v)
    }
}

/// Finite-difference residual of `d/dt p_t + div(p_t v)` on a grid, with
/// `p_t` the oracle's exact marginal and `v` the supplied field.
pub fn continuity_residual<F: VelocityField + ?Sized>(
    oracle: &Oracle,
    field: &F,
    t: f64,
    grid: &GridSpec,
    fd: &FdSteps,
) -> Result<ResidualStats> {
    let d = oracle.dim();
    check_dim(d, field.dim())?;
    if !(fd.space > 0.0 && fd.time > 0.0) {
        return Err(FlowError::InvalidParameter("finite-difference steps must be positive".into()));
    }
    if t - fd.time < 0.0 || t + fd.time > field.t_max() {
        return Err(FlowError::Domain {
            t,
            domain: "the field's time range shrunk by the time step",
        });
    }
    let points = grid.points(d)?;
    let now = oracle.marginal_at(t)?;
    let later = oracle.marginal_at(t + fd.time)?;
    let earlier = oracle.marginal_at(t - fd.time)?;
    let density = |m: &GaussianMixture, x: &[f64]| -> Result<f64> { Ok(m.log_density(x)?.exp()) };

    let residuals = points
        .par_iter()
        .map(|x| -> Result<(f64, f64)> {
            let dp_dt = (density(&later, x)? - density(&earlier, x)?) / (2.0 * fd.time);
            let mut div = 0.0;
            for i in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += fd.space;
                xm[i] -= fd.space;
                let flux_p = density(&now, &xp)? * field.eval(t, &xp)?[i];
                let flux_m = density(&now, &xm)? * field.eval(t, &xm)?[i];
                div += (flux_p - flux_m) / (2.0 * fd.space);
            }
            Ok(((dp_dt + div).abs(), density(&now, x)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let max_abs = residuals.iter().map(|r| r.0).fold(0.0, f64::max);
    let mean_abs = residuals.iter().map(|r| r.0).sum::<f64>() / residuals.len() as f64;
    let max_density = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(ResidualStats {
        t,
        max_abs,
        mean_abs,
        max_density,
        relative_max: max_abs / max_density,
    })
}

/// Experiment-level summary assembled by the driver.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_mode: Vec<f64>,
    pub midpoint_mass: Option<f64>,
    pub underestimation_ratio: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub error_band: Vec<BandError>,
}
