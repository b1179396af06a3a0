#![allow(dead_code)]

use flowlab::{GaussianMixture, IsotropicGaussian, Oracle};

/// Standard 2D prior, equal-weight modes at (3, 0) and (-3, 0) with spread 0.5.
pub fn bimodal() -> Oracle {
    Oracle::new(
        GaussianMixture::single(IsotropicGaussian::standard(2).unwrap()),
        GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![3.0, 0.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![-3.0, 0.0], 0.5).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap(),
    )
    .unwrap()
}

/// N(0, 1) to N(2, 0.25) on the line.
pub fn unimodal_1d() -> Oracle {
    Oracle::new(
        GaussianMixture::single(IsotropicGaussian::standard(1).unwrap()),
        GaussianMixture::single(IsotropicGaussian::new(vec![2.0], 0.5).unwrap()),
    )
    .unwrap()
}

pub fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
