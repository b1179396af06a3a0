//! Isotropic Gaussian mixtures.
//!
//! All mixture-level quantities (densities, responsibilities) are computed in
//! log space: well-separated modes underflow linear-space densities long
//! before the posterior itself becomes degenerate.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Weight sums must hit 1 this closely.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// `N(mean, sigma^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicGaussian {
    mean: Vec<f64>,
    sigma: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(FlowError::InvalidParameter(
                "gaussian mean must have at least one dimension".into(),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(FlowError::NonFinite("gaussian mean".into()));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(FlowError::InvalidParameter(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self { mean, sigma })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Log density without a dimension check; `x` must have `self.dim()` entries.
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let var = self.variance();
        let sq: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        -0.5 * (self.dim() as f64) * (LN_2PI + var.ln()) - sq / (2.0 * var)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_density_unchecked(x))
    }
}

/// A finite mixture of isotropic Gaussians sharing one ambient dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    components: Vec<IsotropicGaussian>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<IsotropicGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(FlowError::InvalidParameter(
                "mixture needs at least one component".into(),
            ));
        }
        if components.len() != weights.len() {
            return Err(FlowError::InvalidParameter(format!(
                "{} components but {} weights",
                components.len(),
                weights.len()
            )));
        }
        let dim = components[0].dim();
        for c in &components[1..] {
            check_dim(dim, c.dim())?;
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(FlowError::InvalidParameter(format!(
                "mixture weights must be nonnegative, got {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(FlowError::InvalidParameter(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            components,
            weights,
            log_weights,
        })
    }

    pub fn single(component: IsotropicGaussian) -> Self {
        Self {
            components: vec![component],
            weights: vec![1.0],
            log_weights: vec![0.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[IsotropicGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Weighted mean of the component means.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (c, w) in self.components.iter().zip(&self.weights) {
            for (o, m) in out.iter_mut().zip(c.mean()) {
                *o += w * m;
            }
        }
        out
    }

    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density_unchecked(x))
            .collect()
    }

    /// `log sum_k w_k N(x; mu_k, sigma_k^2 I)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(log_sum_exp(&self.log_terms(x)))
    }

    /// Posterior component probabilities `gamma_k(x)`, normalized in log space.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("responsibility query point".into()));
        }
        let mut terms = self.log_terms(x);
        let lse = log_sum_exp(&terms);
        for v in terms.iter_mut() {
            *v = (*v - lse).exp();
        }
        // exp rounding can leave the sum a few ulps off 1
        let total: f64 = terms.iter().sum();
        for v in terms.iter_mut() {
            *v /= total;
        }
        Ok(terms)
    }

    /// Draws a component index according to the weights.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.weights
            .iter()
            .rposition(|w| *w > 0.0)
            .unwrap_or(self.weights.len() - 1)
    }

    /// One draw written into `out` (length `dim`).
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let c = &self.components[self.sample_component(rng)];
        for (o, m) in out.iter_mut().zip(c.mean()) {
            let z: f64 = rng.sample(StandardNormal);
            *o = m + c.sigma() * z;
        }
    }

    /// `n` i.i.d. draws as an `n x d` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(FlowError::InvalidParameter("sample count must be >= 1".into()));
        }
        let mut out = Array2::zeros((n, self.dim()));
        for mut row in out.rows_mut() {
            self.sample_into(rng, row.as_slice_mut().expect("standard layout"));
        }
        Ok(out)
    }
}

/// Numerically stable `log sum exp(values)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn paper_target() -> GaussianMixture {
        GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-3.0, 0.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![3.0, 0.0], 0.5).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    fn normal_pdf_1d(x: f64, mu: f64, sigma: f64) -> f64 {
        (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = GaussianMixture::single(IsotropicGaussian::standard(1).unwrap());
        assert_relative_eq!(
            m.log_density(&[0.0]).unwrap(),
            -0.918_938_533_204_672_7,
            max_relative = 1e-15
        );
    }

    #[test]
    fn symmetric_1d_mixture_at_origin() {
        let m = GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-3.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![3.0], 0.5).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let expected = (2.0 * 0.5 * normal_pdf_1d(0.0, 3.0, 0.5)).ln();
        assert_relative_eq!(m.log_density(&[0.0]).unwrap(), expected, max_relative = 1e-13);
    }

    #[test]
    fn direct_summation_oracle_2d() {
        let m = paper_target();
        let x = [3.0, 0.0];
        let direct: f64 = m
            .components()
            .iter()
            .zip(m.weights())
            .map(|(c, w)| {
                let var = c.variance();
                let sq: f64 = x.iter().zip(c.mean()).map(|(a, b)| (a - b).powi(2)).sum();
                w * (-sq / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var)
            })
            .sum();
        assert_relative_eq!(
            m.log_density(&x).unwrap(),
            direct.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn density_integrates_to_one_in_1d() {
        let m = GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-2.0], 0.3).unwrap(),
                IsotropicGaussian::new(vec![1.0], 1.2).unwrap(),
                IsotropicGaussian::new(vec![4.0], 0.7).unwrap(),
            ],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let (lo, hi, n) = (-15.0, 15.0, 30_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| lo + (i as f64 + 0.5) * h)
            .map(|x| m.log_density(&[x]).unwrap().exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let m = paper_target();
        assert!(matches!(
            m.log_density(&[1.0]),
            Err(FlowError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(m.responsibilities(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(IsotropicGaussian::new(vec![0.0], 0.0).is_err());
        assert!(IsotropicGaussian::new(vec![], 1.0).is_err());
        let g = IsotropicGaussian::standard(1).unwrap();
        assert!(GaussianMixture::new(vec![g.clone(), g.clone()], vec![0.5, 0.6]).is_err());
        assert!(GaussianMixture::new(vec![g.clone(), g.clone()], vec![1.5, -0.5]).is_err());
        assert!(GaussianMixture::new(vec![], vec![]).is_err());
        let g2 = IsotropicGaussian::standard(2).unwrap();
        assert!(GaussianMixture::new(vec![g, g2], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn responsibilities_on_bisector_are_half() {
        let m = paper_target();
        for y in [-3.0, 0.0, 0.7, 10.0] {
            let g = m.responsibilities(&[0.0, y]).unwrap();
            assert_eq!(g, vec![0.5, 0.5]);
        }
        let single = GaussianMixture::single(IsotropicGaussian::standard(2).unwrap());
        assert_eq!(single.responsibilities(&[4.0, -1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn responsibilities_saturate_at_a_mode() {
        // log-odds (36 - 0) / (2 * 0.25) = 72
        let g = paper_target().responsibilities(&[3.0, 0.0]).unwrap();
        assert!(g[1] >= 1.0 - 1e-15);
        assert_relative_eq!(g[0], (-72.0f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn responsibilities_survive_linear_underflow() {
        let m = GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-50.0, 0.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![50.0, 0.0], 0.5).unwrap(),
            ],
            vec![0.3, 0.7],
        )
        .unwrap();
        let x = [-1.0, 40.0];
        // both linear densities are exactly 0.0 here
        for c in m.components() {
            assert_eq!(c.log_density(&x).unwrap().exp(), 0.0);
        }
        let g = m.responsibilities(&x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g[0] > 0.99);
    }

    #[test]
    fn sample_mean_of_standard_normal() {
        let m = GaussianMixture::single(IsotropicGaussian::standard(2).unwrap());
        let s = m.sample(100_000, &mut stream(11, Stream::Particles)).unwrap();
        for j in 0..2 {
            let mean = s.column(j).mean().unwrap();
            assert!(mean.abs() < 0.02, "coordinate {j} mean {mean}");
        }
    }

    #[test]
    fn sample_component_split_matches_weights() {
        let m = paper_target();
        let n = 100_000;
        let s = m.sample(n, &mut stream(3, Stream::Particles)).unwrap();
        let right = s.column(0).iter().filter(|v| **v > 0.0).count() as f64 / n as f64;
        assert!((0.494..=0.506).contains(&right), "fraction {right}");

        let skewed = GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-10.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![0.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![10.0], 0.5).unwrap(),
            ],
            vec![0.1, 0.3, 0.6],
        )
        .unwrap();
        let s = skewed.sample(n, &mut stream(4, Stream::Particles)).unwrap();
        for (k, w) in skewed.weights().iter().enumerate() {
            let centre = skewed.components()[k].mean()[0];
            let frac =
                s.column(0).iter().filter(|v| (**v - centre).abs() < 5.0).count() as f64 / n as f64;
            let bound = 3.0 * (w * (1.0 - w) / n as f64).sqrt();
            assert!((frac - w).abs() <= bound, "component {k}: {frac} vs {w}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = paper_target();
        let a = m.sample(1, &mut stream(5, Stream::Particles)).unwrap();
        let b = m.sample(1, &mut stream(5, Stream::Particles)).unwrap();
        assert_eq!(a, b);
        assert!(m.sample(0, &mut stream(5, Stream::Particles)).is_err());
    }

    proptest! {
        #[test]
        fn responsibilities_form_a_distribution(
            x in -200.0f64..200.0,
            y in -200.0f64..200.0,
            w in 0.01f64..0.99,
        ) {
            let m = GaussianMixture::new(
                vec![
                    IsotropicGaussian::new(vec![-3.0, 1.0], 0.4).unwrap(),
                    IsotropicGaussian::new(vec![2.0, -1.0], 1.3).unwrap(),
                ],
                vec![w, 1.0 - w],
            ).unwrap();
            let g = m.responsibilities(&[x, y]).unwrap();
            prop_assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(m.log_density(&[x, y]).unwrap().is_finite());
        }
    }
}
