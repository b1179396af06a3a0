mod common;

use flowlab::analysis::{mode_metrics, MIDPOINT_RADIUS, MODE_RADIUS};
use flowlab::rng::{stream, Stream};
use flowlab::sim::{convergence_order, integrate, ConvergenceStudy, IntegrateOptions};
use flowlab::{Method, EPS_TIME};

#[test]
fn unimodal_endpoints_follow_the_target_law() {
    let oracle = common::unimodal_1d();
    let x0 = oracle.prior().sample(100_000, &mut stream(0, Stream::Particles)).unwrap();
    let out = integrate(&oracle, x0.view(), &IntegrateOptions::default()).unwrap();
    let (mean, std) = common::mean_std(out.endpoints.column(0).iter().copied());
    assert!((mean - 2.0).abs() <= 0.02, "{mean}");
    assert!((std - 0.5).abs() <= 0.01, "{std}");
}

#[test]
fn bimodal_endpoints_split_between_modes() {
    let oracle = common::bimodal();
    let x0 = oracle.prior().sample(10_000, &mut stream(0, Stream::Particles)).unwrap();
    let opts = IntegrateOptions {
        method: Method::Rk4,
        steps: 200,
        t_end: 1.0 - EPS_TIME,
        ..IntegrateOptions::default()
    };
    let out = integrate(&oracle, x0.view(), &opts).unwrap();
    let m = mode_metrics(out.endpoints.view(), oracle.target(), MODE_RADIUS, MIDPOINT_RADIUS).unwrap();
    for f in &m.per_mode {
        assert!((f - 0.5).abs() <= 0.03, "{m:?}");
    }
    assert!(m.midpoint_mass < 0.01, "{m:?}");
    // a radius-3-sigma disc in 2D holds 1 - exp(-4.5) of each mode
    let expected = 1.0 - (-4.5f64).exp();
    let se = (expected * (1.0 - expected) / 10_000.0).sqrt();
    assert!((m.covered - expected).abs() <= 3.0 * se, "{} vs {expected}", m.covered);

    // destination follows the starting side of the boundary
    let crossed = x0
        .rows()
        .into_iter()
        .zip(out.endpoints.rows())
        .filter(|(a, b)| (a[0] > 0.0) != (b[0] > 0.0))
        .count();
    assert!((crossed as f64) < 0.005 * 10_000.0, "{crossed}");
}

#[test]
fn recorded_trajectories_have_increasing_times() {
    let oracle = common::bimodal();
    let x0 = oracle.prior().sample(50, &mut stream(1, Stream::Particles)).unwrap();
    let opts = IntegrateOptions {
        steps: 200,
        record_every: 10,
        record_particles: Some(8),
        ..IntegrateOptions::default()
    };
    let out = integrate(&oracle, x0.view(), &opts).unwrap();
    assert_eq!(out.trajectories.len(), 8);
    for tr in &out.trajectories {
        assert_eq!(tr.points.len(), 21);
        assert_eq!(tr.points[0].t, 0.0);
        assert_eq!(tr.points.last().unwrap().t, opts.t_end);
        assert!(tr.points.windows(2).all(|w| w[1].t > w[0].t));
        let last = &tr.points.last().unwrap().position;
        assert_eq!(last.as_slice(), out.endpoints.row(tr.particle_id).as_slice().unwrap());
    }
}

#[test]
fn self_convergence_orders_on_the_smooth_field() {
    let oracle = common::unimodal_1d();
    let x0 = oracle.prior().sample(16, &mut stream(7, Stream::Particles)).unwrap();
    let rep = convergence_order(&oracle, x0.view(), 1.0 - EPS_TIME, &ConvergenceStudy::default()).unwrap();
    assert!((0.8..=1.2).contains(&rep.euler.order), "{:?}", rep.euler);
    assert!((3.5..=4.5).contains(&rep.rk4.order), "{:?}", rep.rk4);
    assert!(rep.euler.finest_error() < 1e-6, "{:?}", rep.euler);
    assert!(rep.rk4.finest_error() < 1e-6, "{:?}", rep.rk4);
}
