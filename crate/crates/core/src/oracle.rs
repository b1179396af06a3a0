//! Closed-form conditional flow matching for Gaussian mixtures.
//!
//! With `x_t = t x1 + (1 - t) x0`, `x0 ~ p0` and `x1 ~ p1` both isotropic
//! Gaussian mixtures, every prior/target component pair `(j, k)` contributes a
//! Gaussian slice of the time-t marginal:
//!
//! ```text
//! c_jk(t)   = t mu1_k + (1 - t) mu0_j
//! s_jk(t)^2 = t^2 sigma1_k^2 + (1 - t)^2 sigma0_j^2
//! ```
//!
//! Conditioned on the pair, `(x0, x1, x_t)` is jointly Gaussian, so the
//! posterior means of `x1` and `x0` given `x_t = x` are exact linear
//! functions of `x`. The optimal field is the responsibility-weighted
//! average of `E[x1 - x0 | x, jk]`, which equals `(E[x1 | x] - x) / (1 - t)`
//! but never divides by `1 - t`.

use crate::error::{check_dim, FlowError, Result};
use crate::mixture::{GaussianMixture, IsotropicGaussian};

/// Closest approach to `t = 1` accepted by time-dependent operations.
pub const EPS_TIME: f64 = 1e-3;

/// `x_t = t x1 + (1 - t) x0`.
pub fn conditional_sample(t: f64, x0: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dim(x0.len(), x1.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Domain { t, domain: "[0, 1]" });
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(a, b)| t * b + (1.0 - t) * a)
        .collect())
}

/// `u_t(x | x1) = (x1 - x) / (1 - t)`.
pub fn conditional_velocity(t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
    check_dim(x.len(), x1.len())?;
    check_velocity_time(t, EPS_TIME)?;
    Ok(x.iter().zip(x1).map(|(a, b)| (b - a) / (1.0 - t)).collect())
}

fn check_velocity_time(t: f64, eps: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(FlowError::Domain { t, domain: "[0, 1)" });
    }
    if t > 1.0 - eps {
        return Err(FlowError::Singularity { t, eps });
    }
    Ok(())
}

/// Schedule of the single-prior path at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathParams {
    pub t: f64,
    pub sigma0: f64,
    pub prior_mean: Vec<f64>,
    /// Per target component: `t mu_k + (1 - t) mu0`.
    pub means: Vec<Vec<f64>>,
    /// Per target component: `t^2 sigma_k^2 + (1 - t)^2 sigma0^2`.
    pub variances: Vec<f64>,
}

/// Posterior over target components at `(x, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    /// `gamma_k(x, t)`, one per target component.
    pub alpha: Vec<f64>,
    /// `m_k(x, t) = E[x1 | x_t = x, component k]`.
    pub component_means: Vec<Vec<f64>>,
    /// `E[x1 | x_t = x] = sum_k gamma_k m_k`.
    pub mean: Vec<f64>,
}

/// Decision hyperplane `H_t` of a symmetric two-mode target.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundary {
    pub point: Vec<f64>,
    /// Unit normal pointing toward the first target component.
    pub normal: Vec<f64>,
}

impl Boundary {
    /// Signed distance of `x` from the hyperplane along the normal.
    pub fn signed_offset(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.point)
            .zip(&self.normal)
            .map(|((a, p), n)| (a - p) * n)
            .sum()
    }

    /// `point + offset * normal`.
    pub fn probe(&self, offset: f64) -> Vec<f64> {
        self.point
            .iter()
            .zip(&self.normal)
            .map(|(p, n)| p + offset * n)
            .collect()
    }
}

/// One prior/target component pair evaluated at time `t`.
#[derive(Clone, Copy, Debug)]
struct Slice<'a> {
    log_weight: f64,
    prior: &'a IsotropicGaussian,
    target: &'a IsotropicGaussian,
    var: f64,
    /// `t sigma1^2 / s^2`: gain of `E[x1 | x]` on `x - c`.
    gain1: f64,
    /// `(1 - t) sigma0^2 / s^2`: gain of `E[x0 | x]` on `x - c`.
    gain0: f64,
}

impl Slice<'_> {
    fn centre(&self, t: f64, i: usize) -> f64 {
        t * self.target.mean()[i] + (1.0 - t) * self.prior.mean()[i]
    }

    fn log_density(&self, t: f64, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let sq: f64 = (0..x.len())
            .map(|i| {
                let r = x[i] - self.centre(t, i);
                r * r
            })
            .sum();
        self.log_weight
            - 0.5 * d * (std::f64::consts::TAU.ln() + self.var.ln())
            - sq / (2.0 * self.var)
    }
}

/// The exact flow-matching solution for a prior/target mixture pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    prior: GaussianMixture,
    target: GaussianMixture,
    eps_time: f64,
}

impl Oracle {
    pub fn new(prior: GaussianMixture, target: GaussianMixture) -> Result<Self> {
        check_dim(prior.dim(), target.dim())?;
        Ok(Self {
            prior,
            target,
            eps_time: EPS_TIME,
        })
    }

    pub fn with_eps_time(mut self, eps_time: f64) -> Result<Self> {
        if !(eps_time > 0.0 && eps_time < 1.0) {
            return Err(FlowError::InvalidParameter(format!(
                "eps_time must lie in (0, 1), got {eps_time}"
            )));
        }
        self.eps_time = eps_time;
        Ok(self)
    }

    pub fn prior(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn eps_time(&self) -> f64 {
        self.eps_time
    }

    /// Largest time at which velocities are defined.
    pub fn t_max(&self) -> f64 {
        1.0 - self.eps_time
    }

    fn check_marginal_time(&self, t: f64) -> Result<()> {
        if t.is_nan() || !(0.0..1.0).contains(&t) {
            return Err(FlowError::Domain { t, domain: "[0, 1)" });
        }
        Ok(())
    }

    fn slices(&self, t: f64) -> impl Iterator<Item = Slice<'_>> + '_ {
        let prior = self.prior.components().iter().zip(self.prior.log_weights());
        prior.flat_map(move |(p, lwp)| {
            self.target
                .components()
                .iter()
                .zip(self.target.log_weights())
                .map(move |(q, lwq)| {
                    let v1 = t * t * q.variance();
                    let v0 = (1.0 - t) * (1.0 - t) * p.variance();
                    let var = v1 + v0;
                    Slice {
                        log_weight: lwp + lwq,
                        prior: p,
                        target: q,
                        var,
                        gain1: t * q.variance() / var,
                        gain0: (1.0 - t) * p.variance() / var,
                    }
                })
        })
    }

    /// Schedule of the single-prior path.
    pub fn path_params(&self, t: f64) -> Result<PathParams> {
        self.check_marginal_time(t)?;
        let prior = self.single_prior()?;
        let slices: Vec<_> = self.slices(t).collect();
        Ok(PathParams {
            t,
            sigma0: prior.sigma(),
            prior_mean: prior.mean().to_vec(),
            means: slices
                .iter()
                .map(|s| (0..self.dim()).map(|i| s.centre(t, i)).collect())
                .collect(),
            variances: slices.iter().map(|s| s.var).collect(),
        })
    }

    fn single_prior(&self) -> Result<&IsotropicGaussian> {
        match self.prior.components() {
            [p] => Ok(p),
            _ => Err(FlowError::Unsupported(format!(
                "operation needs a single-component prior, got {}",
                self.prior.len()
            ))),
        }
    }

    /// Time-t marginal `p_t`: one component per (prior, target) pair, in
    /// prior-major order.
    pub fn marginal_at(&self, t: f64) -> Result<GaussianMixture> {
        self.check_marginal_time(t)?;
        let mut components = Vec::new();
        let mut weights = Vec::new();
        for s in self.slices(t) {
            let mean = (0..self.dim()).map(|i| s.centre(t, i)).collect();
            components.push(IsotropicGaussian::new(mean, s.var.sqrt())?);
            weights.push(s.log_weight.exp());
        }
        // products of valid weights can drift off 1 by a few ulps
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GaussianMixture::new(components, weights)
    }

    /// Posterior over target components and their conditional means.
    pub fn posterior(&self, t: f64, x: &[f64]) -> Result<PosteriorSummary> {
        self.check_marginal_time(t)?;
        check_dim(self.dim(), x.len())?;
        let gamma = self.marginal_at(t)?.responsibilities(x)?;
        let k_count = self.target.len();
        let d = self.dim();

        let mut alpha = vec![0.0; k_count];
        let mut weighted = vec![vec![0.0; d]; k_count];
        let mut fallback = vec![vec![0.0; d]; k_count];
        for (idx, s) in self.slices(t).enumerate() {
            let (j, k) = (idx / k_count, idx % k_count);
            let w0 = self.prior.weights()[j];
            alpha[k] += gamma[idx];
            for i in 0..d {
                let m1 = s.target.mean()[i] + s.gain1 * (x[i] - s.centre(t, i));
                weighted[k][i] += gamma[idx] * m1;
                fallback[k][i] += w0 * m1;
            }
        }
        let component_means: Vec<Vec<f64>> = (0..k_count)
            .map(|k| {
                if alpha[k] > 0.0 {
                    weighted[k].iter().map(|v| v / alpha[k]).collect()
                } else {
                    fallback[k].clone()
                }
            })
            .collect();
        let mut mean = vec![0.0; d];
        for (a, m) in alpha.iter().zip(&component_means) {
            for (o, v) in mean.iter_mut().zip(m) {
                *o += a * v;
            }
        }
        Ok(PosteriorSummary {
            alpha,
            component_means,
            mean,
        })
    }

    /// Posterior probability of the first target component.
    pub fn alpha(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.posterior(t, x)?.alpha[0])
    }

    /// `v*_t(x) = E[x1 - x0 | x_t = x]`.
    pub fn optimal_velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.velocity_into(t, x, &mut out)?;
        Ok(out)
    }

    /// Allocation-free form of [`Oracle::optimal_velocity`].
    pub fn velocity_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_velocity_time(t, self.eps_time)?;
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), out.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("velocity query point".into()));
        }
        let max = self
            .slices(t)
            .map(|s| s.log_density(t, x))
            .fold(f64::NEG_INFINITY, f64::max);
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut total = 0.0;
        for s in self.slices(t) {
            let w = (s.log_density(t, x) - max).exp();
            total += w;
            for (i, o) in out.iter_mut().enumerate() {
                let r = x[i] - s.centre(t, i);
                let mean_diff = s.target.mean()[i] - s.prior.mean()[i];
                *o += w * (mean_diff + (s.gain1 - s.gain0) * r);
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(())
    }

    /// Mode-averaging reference field `(m_1 + m_2) / (2(1 - t)) - x / (1 - t)`.
    pub fn averaged_velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_velocity_time(t, self.eps_time)?;
        self.require_two_modes()?;
        let post = self.posterior(t, x)?;
        let (m1, m2) = (&post.component_means[0], &post.component_means[1]);
        Ok((0..self.dim())
            .map(|i| ((m1[i] + m2[i]) / 2.0 - x[i]) / (1.0 - t))
            .collect())
    }

    fn require_two_modes(&self) -> Result<()> {
        if self.target.len() != 2 {
            return Err(FlowError::Unsupported(format!(
                "needs a two-component target, got {}",
                self.target.len()
            )));
        }
        Ok(())
    }

    /// Checks the symmetric two-mode setting in which `H_t` is a hyperplane
    /// with the posterior exactly 1/2 on it.
    pub fn require_symmetric_two_modes(&self) -> Result<()> {
        self.require_two_modes()?;
        self.single_prior()?;
        let [a, b] = self.target.components() else {
            unreachable!()
        };
        let w = self.target.weights();
        if (w[0] - w[1]).abs() > 1e-12 {
            return Err(FlowError::Unsupported(format!(
                "target weights must be equal, got {} and {}",
                w[0], w[1]
            )));
        }
        if (a.sigma() - b.sigma()).abs() > 1e-12 * a.sigma().max(b.sigma()) {
            return Err(FlowError::Unsupported(format!(
                "target components must share sigma, got {} and {}",
                a.sigma(),
                b.sigma()
            )));
        }
        if a.mean() == b.mean() {
            return Err(FlowError::Unsupported("target modes coincide".into()));
        }
        Ok(())
    }

    /// `H_t`: points equidistant from the two time-t component centres.
    pub fn decision_boundary(&self, t: f64) -> Result<Boundary> {
        if !(t > 0.0 && t < 1.0) {
            return Err(FlowError::Domain { t, domain: "(0, 1)" });
        }
        self.require_symmetric_two_modes()?;
        let prior = self.single_prior()?;
        let (mu1, mu2) = (
            self.target.components()[0].mean(),
            self.target.components()[1].mean(),
        );
        let diff: Vec<f64> = mu1.iter().zip(mu2).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let point = (0..self.dim())
            .map(|i| t * (mu1[i] + mu2[i]) / 2.0 + (1.0 - t) * prior.mean()[i])
            .collect();
        Ok(Boundary {
            point,
            normal: diff.iter().map(|v| v / norm).collect(),
        })
    }

    /// Idealized step amplitude `||m_1 - m_2|| / (1 - t)` at a point of `H_t`:
    /// the velocity change when the posterior switches from one mode to the
    /// other, using exact conjugate posterior means.
    pub fn jump_magnitude(&self, t: f64, boundary_point: &[f64]) -> Result<f64> {
        check_velocity_time(t, self.eps_time)?;
        check_dim(self.dim(), boundary_point.len())?;
        let boundary = self.decision_boundary(t)?;
        let scale = 1.0 + boundary_point.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let off = boundary.signed_offset(boundary_point);
        if off.abs() > 1e-9 * scale {
            return Err(FlowError::InvalidParameter(format!(
                "point lies {off} off the decision boundary"
            )));
        }
        let post = self.posterior(t, boundary_point)?;
        let (m1, m2) = (&post.component_means[0], &post.component_means[1]);
        let gap = m1
            .iter()
            .zip(m2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(gap / (1.0 - t))
    }

    /// Step amplitude with posterior means replaced by the modes,
    /// `||mu_1 - mu_2|| / (1 - t)`; the zero-variance limit of
    /// [`Oracle::jump_magnitude`].
    pub fn mode_shorthand_jump(&self, t: f64) -> Result<f64> {
        check_velocity_time(t, self.eps_time)?;
        self.require_symmetric_two_modes()?;
        let (mu1, mu2) = (
            self.target.components()[0].mean(),
            self.target.components()[1].mean(),
        );
        let gap = mu1
            .iter()
            .zip(mu2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(gap / (1.0 - t))
    }
}
