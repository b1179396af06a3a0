mod common;

use rand::Rng;
use flowlab::montecarlo::{conditional_velocity_check, probes_around_modes};
use flowlab::oracle::conditional_sample;
use flowlab::rng::{stream, Stream};
use flowlab::{GaussianMixture, IsotropicGaussian, Oracle};
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn bimodal_field_matches_sampled_conditional_expectation() {
    let oracle = common::bimodal();
    for (i, t) in [0.3, 0.5, 0.7].into_iter().enumerate() {
        let probes = probes_around_modes(&oracle, t).unwrap();
        assert_eq!(probes.len(), 20);
        let res = conditional_velocity_check(&oracle, t, &probes, 0.05, 10_000_000, 100 + i as u64)
            .unwrap();
        for p in &res {
            assert!(p.hits >= 10_000, "t={t} probe {:?}: {} hits", p.point, p.hits);
            assert!(p.max_z() <= 3.0, "t={t}: {p:?}");
        }
    }
}

#[test]
fn mixture_prior_field_matches_sampled_conditional_expectation() {
    let oracle = Oracle::new(
        GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![0.0, 2.0], 0.7).unwrap(),
                IsotropicGaussian::new(vec![0.0, -2.0], 0.7).unwrap(),
            ],
            vec![0.4, 0.6],
        )
        .unwrap(),
        GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![3.0, 0.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![-3.0, 0.0], 0.5).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap(),
    )
    .unwrap();
    let t = 0.5;
    let probes = vec![
        vec![1.5, 1.0],
        vec![-1.5, -1.0],
        vec![1.5, 1.3],
        vec![-1.5, 0.8],
        vec![1.5, -1.0],
    ];
    let res = conditional_velocity_check(&oracle, t, &probes, 0.1, 4_000_000, 7).unwrap();
    for p in &res {
        assert!(p.hits >= 5_000, "{p:?}");
        assert!(p.max_z() <= 3.5, "{p:?}");
    }
}

#[test]
fn sampling_check_is_thread_count_independent() {
    let oracle = common::bimodal();
    let probes = probes_around_modes(&oracle, 0.5).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| conditional_velocity_check(&oracle, 0.5, &probes, 0.05, 300_000, 1).unwrap())
    };
    assert_eq!(run(1), run(4));
}

/// Histogram of coupled samples against the closed-form time-t density.
#[test]
fn marginal_density_matches_coupled_samples() {
    let prior = GaussianMixture::single(IsotropicGaussian::standard(1).unwrap());
    let target = GaussianMixture::new(
        vec![
            IsotropicGaussian::new(vec![3.0], 0.5).unwrap(),
            IsotropicGaussian::new(vec![-3.0], 0.5).unwrap(),
        ],
        vec![0.3, 0.7],
    )
    .unwrap();
    let oracle = Oracle::new(prior.clone(), target.clone()).unwrap();
    let n = 1_000_000;
    let mut rng = stream(11, Stream::MonteCarlo);
    for t in [0.2, 0.5, 0.8] {
        let marginal = oracle.marginal_at(t).unwrap();
        let (lo, hi, bins) = (-4.0, 4.0, 80);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        let (mut x0, mut x1) = ([0.0], [0.0]);
        for _ in 0..n {
            prior.sample_into(&mut rng, &mut x0);
            target.sample_into(&mut rng, &mut x1);
            let x = conditional_sample(t, &x0, &x1).unwrap()[0];
            if (lo..hi).contains(&x) {
                counts[((x - lo) / width) as usize] += 1;
            }
        }
        // exact bin probabilities from component CDFs, independent of log_density
        for (b, count) in counts.iter().enumerate() {
            let (a, z) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
            let p: f64 = marginal
                .components()
                .iter()
                .zip(marginal.weights())
                .map(|(c, w)| {
                    let g = Normal::new(c.mean()[0], c.sigma()).unwrap();
                    w * (g.cdf(z) - g.cdf(a))
                })
                .sum();
            // and the closed-form density integrated by Simpson's rule
            let dens = |x: f64| marginal.log_density(&[x]).unwrap().exp();
            let simpson = width / 6.0 * (dens(a) + 4.0 * dens(0.5 * (a + z)) + dens(z));
            assert!((simpson - p).abs() < 1e-5, "t={t} bin {b}: {simpson} vs {p}");
            let expected = n as f64 * p;
            let sd = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!(
                (*count as f64 - expected).abs() <= 4.0 * sd,
                "t={t} bin {b}: {count} vs {expected:.1}"
            );
        }
    }
}

/// The best achievable training loss, E||x1 - x0 - v*(t, x_t)||^2 with
/// t ~ U[0, 0.999], against a value computed independently (2e6 draws).
#[test]
fn regression_objective_floor() {
    const FROZEN: f64 = 4.590;
    let oracle = common::bimodal();
    let mut rng = stream(7, Stream::MonteCarlo);
    let n = 400_000;
    let (mut x0, mut x1) = (vec![0.0; 2], vec![0.0; 2]);
    let (mut floor, mut raw) = (0.0, 0.0);
    for _ in 0..n {
        let t = rng.random::<f64>() * 0.999;
        oracle.prior().sample_into(&mut rng, &mut x0);
        oracle.target().sample_into(&mut rng, &mut x1);
        let xt: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| t * b + (1.0 - t) * a).collect();
        let v = oracle.optimal_velocity(t, &xt).unwrap();
        for i in 0..2 {
            let u = x1[i] - x0[i];
            floor += (u - v[i]).powi(2);
            raw += u * u;
        }
    }
    let (floor, raw) = (floor / n as f64, raw / n as f64);
    assert!((floor - FROZEN).abs() < 0.04, "floor {floor}");
    assert!((raw - 11.5).abs() < 0.1, "raw {raw}");
}
