//! Fixed-step particle transport through a velocity field.

use ndarray::{Array2, ArrayView2};
use ndarray::parallel::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::net::VelocityNet;
use crate::oracle::{Oracle, EPS_TIME};

const ROW_CHUNK: usize = 256;

/// A time-dependent vector field `v(t, x)` on `t in [0, t_max]`.
///
/// Implementations must be safe for concurrent read-only evaluation.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn t_max(&self) -> f64 {
        1.0 - EPS_TIME
    }

    /// Row-wise velocities for an `n x d` batch at a common time.
    fn eval_batch(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| FlowError::InvalidParameter(e.to_string()))?;
        Ok(self.eval_batch(t, xs)?.row(0).to_vec())
    }
}

/// Applies a per-row evaluator over row chunks in parallel.
pub fn eval_rows<F>(xs: ArrayView2<f64>, dim: usize, f: F) -> Result<Array2<f64>>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()> + Sync,
{
    check_dim(dim, xs.ncols())?;
    let n = xs.nrows();
    let mut out = Array2::zeros((n, dim));
    out.axis_chunks_iter_mut(ndarray::Axis(0), ROW_CHUNK)
        .into_par_iter()
        .enumerate()
        .try_for_each(|(c, mut block)| {
            let mut x = vec![0.0; dim];
            for (r, mut row) in block.rows_mut().into_iter().enumerate() {
                for (dst, src) in x.iter_mut().zip(xs.row(c * ROW_CHUNK + r)) {
                    *dst = *src;
                }
                f(&x, row.as_slice_mut().expect("standard layout"))?;
            }
            Ok::<(), FlowError>(())
        })?;
    Ok(out)
}

impl VelocityField for Oracle {
    fn dim(&self) -> usize {
        Oracle::dim(self)
    }

    fn t_max(&self) -> f64 {
        Oracle::t_max(self)
    }

    fn eval_batch(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        eval_rows(xs, Oracle::dim(self), |x, out| self.velocity_into(t, x, out))
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        VelocityNet::dim(self)
    }

    fn eval_batch(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::Domain { t, domain: "[0, 1]" });
        }
        self.forward_batch_at(xs, t)
    }
}

/// The fields the experiment transports particles through.
#[derive(Clone, Debug)]
pub enum FieldHandle {
    /// Exact optimal velocity of the prior/target pair.
    Oracle(Oracle),
    /// Trained network.
    Network(VelocityNet),
    /// Mode-averaging reference field of a two-mode target.
    Averaged(Oracle),
}

impl FieldHandle {
    pub fn source(&self) -> &'static str {
        match self {
            FieldHandle::Oracle(_) => "oracle",
            FieldHandle::Network(_) => "network",
            FieldHandle::Averaged(_) => "averaged",
        }
    }
}

impl VelocityField for FieldHandle {
    fn dim(&self) -> usize {
        match self {
            FieldHandle::Oracle(o) | FieldHandle::Averaged(o) => o.dim(),
            FieldHandle::Network(n) => n.dim(),
        }
    }

    fn t_max(&self) -> f64 {
        match self {
            FieldHandle::Oracle(o) | FieldHandle::Averaged(o) => o.t_max(),
            FieldHandle::Network(_) => 1.0 - EPS_TIME,
        }
    }

    fn eval_batch(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            FieldHandle::Oracle(o) => o.eval_batch(t, xs),
            FieldHandle::Network(n) => n.eval_batch(t, xs),
            FieldHandle::Averaged(o) => eval_rows(xs, o.dim(), |x, out| {
                out.copy_from_slice(&o.averaged_velocity(t, x)?);
                Ok(())
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrateOptions {
    pub method: Method,
    pub steps: usize,
    pub t_end: f64,
    /// Record every this many steps (plus the final step); 0 records nothing.
    pub record_every: usize,
    /// Record only the first this many particles.
    pub record_particles: Option<usize>,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps: 200,
            t_end: 1.0 - EPS_TIME,
            record_every: 0,
            record_particles: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub t: f64,
    pub position: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub particle_id: usize,
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transport {
    pub endpoints: Array2<f64>,
    pub trajectories: Vec<Trajectory>,
}

fn axpy(base: &Array2<f64>, k: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut out = base.clone();
    out.scaled_add(h, k);
    out
}

/// Integrates `dx/dt = v(t, x)` from `t = 0` to `t_end` with a uniform step.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x0: ArrayView2<f64>,
    opts: &IntegrateOptions,
) -> Result<Transport> {
    if opts.steps == 0 {
        return Err(FlowError::InvalidParameter("steps must be >= 1".into()));
    }
    if !(opts.t_end > 0.0 && opts.t_end <= field.t_max()) {
        return Err(FlowError::InvalidParameter(format!(
            "t_end must lie in (0, {}], got {}",
            field.t_max(),
            opts.t_end
        )));
    }
    check_dim(field.dim(), x0.ncols())?;
    if let Some(p) = x0.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(FlowError::Integration { particle: p, step: 0 });
    }

    let n = x0.nrows();
    let recorded = if opts.record_every == 0 {
        0
    } else {
        opts.record_particles.unwrap_or(n).min(n)
    };
    let mut trajectories: Vec<Trajectory> = (0..recorded)
        .map(|i| Trajectory {
            particle_id: i,
            points: Vec::new(),
        })
        .collect();
    let record = |trajs: &mut Vec<Trajectory>, step: usize, t: f64, x: &Array2<f64>| {
        for (i, tr) in trajs.iter_mut().enumerate() {
            tr.points.push(TrajectoryPoint {
                step,
                t,
                position: x.row(i).to_vec(),
            });
        }
    };

    let time = |k: usize| {
        if k == opts.steps {
            opts.t_end
        } else {
            opts.t_end * k as f64 / opts.steps as f64
        }
    };
    let mut x = x0.to_owned();
    record(&mut trajectories, 0, 0.0, &x);
    for k in 0..opts.steps {
        let (t0, t1) = (time(k), time(k + 1));
        let h = t1 - t0;
        x = match opts.method {
            Method::Euler => {
                let v = field.eval_batch(t0, x.view())?;
                axpy(&x, &v, h)
            }
            Method::Rk4 => {
                let tm = 0.5 * (t0 + t1);
                let k1 = field.eval_batch(t0, x.view())?;
                let k2 = field.eval_batch(tm, axpy(&x, &k1, 0.5 * h).view())?;
                let k3 = field.eval_batch(tm, axpy(&x, &k2, 0.5 * h).view())?;
                let k4 = field.eval_batch(t1, axpy(&x, &k3, h).view())?;
                let mut next = x.clone();
                next.scaled_add(h / 6.0, &k1);
                next.scaled_add(h / 3.0, &k2);
                next.scaled_add(h / 3.0, &k3);
                next.scaled_add(h / 6.0, &k4);
                next
            }
        };
        if let Some(p) = x.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(FlowError::Integration {
                particle: p,
                step: k + 1,
            });
        }
        let step = k + 1;
        if recorded > 0 && (step % opts.record_every == 0 || step == opts.steps) {
            record(&mut trajectories, step, t1, &x);
        }
    }
    Ok(Transport {
        endpoints: x,
        trajectories,
    })
}

/// Step ladders for a self-convergence study.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceStudy {
    pub euler_steps: Vec<usize>,
    pub rk4_steps: Vec<usize>,
    /// The reference solution uses RK4 with this many times the finest RK4 step count.
    pub reference_factor: usize,
}

impl Default for ConvergenceStudy {
    fn default() -> Self {
        Self {
            euler_steps: vec![500_000, 1_000_000, 2_000_000, 4_000_000],
            rk4_steps: vec![25, 50, 100, 200],
            reference_factor: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConvergence {
    pub method: Method,
    /// `(h, max endpoint error)` per ladder rung.
    pub errors: Vec<(f64, f64)>,
    /// Least-squares slope of `log error` against `log h`.
    pub order: f64,
}

impl MethodConvergence {
    pub fn finest_error(&self) -> f64 {
        self.errors.last().map(|e| e.1).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub euler: MethodConvergence,
    pub rk4: MethodConvergence,
}

/// Observed order of accuracy of both integrators against a finer RK4
/// reference solution.
pub fn convergence_order<F: VelocityField + ?Sized>(
    field: &F,
    x0: ArrayView2<f64>,
    t_end: f64,
    study: &ConvergenceStudy,
) -> Result<ConvergenceReport> {
    if study.euler_steps.len() < 2 || study.rk4_steps.len() < 2 {
        return Err(FlowError::InvalidParameter(
            "each ladder needs at least two rungs".into(),
        ));
    }
    let endpoint = |method, steps| -> Result<Array2<f64>> {
        let opts = IntegrateOptions {
            method,
            steps,
            t_end,
            ..IntegrateOptions::default()
        };
        Ok(integrate(field, x0, &opts)?.endpoints)
    };
    let finest = study.rk4_steps.iter().copied().max().unwrap();
    let reference = endpoint(Method::Rk4, finest * study.reference_factor)?;
    let run = |method, ladder: &[usize]| -> Result<MethodConvergence> {
        let mut errors = Vec::new();
        for &steps in ladder {
            let e = endpoint(method, steps)?;
            let err = (&e - &reference)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            errors.push((t_end / steps as f64, err));
        }
        Ok(MethodConvergence {
            method,
            order: log_log_slope(&errors),
            errors,
        })
    };
    Ok(ConvergenceReport {
        euler: run(Method::Euler, &study.euler_steps)?,
        rk4: run(Method::Rk4, &study.rk4_steps)?,
    })
}

fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{GaussianMixture, IsotropicGaussian};
    use ndarray::array;

    struct Constant(Vec<f64>);

    impl VelocityField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn eval_batch(&self, _t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn((xs.nrows(), self.0.len()), |(_, j)| self.0[j]))
        }
    }

    /// Unit speed, except particles right of 0.5 get an infinite velocity from t = 0.2 on.
    struct Poison;

    impl VelocityField for Poison {
        fn dim(&self) -> usize {
            1
        }

        fn eval_batch(&self, t: f64, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
            Ok(xs.mapv(|x| if t >= 0.2 && x > 0.5 { f64::INFINITY } else { 1.0 }))
        }
    }

    #[test]
    fn zero_field_keeps_particles_still() {
        let x0 = array![[1.0, -2.0], [0.5, 0.25], [3.0, 0.0]];
        for method in [Method::Euler, Method::Rk4] {
            let opts = IntegrateOptions {
                method,
                steps: 17,
                ..IntegrateOptions::default()
            };
            let out = integrate(&Constant(vec![0.0, 0.0]), x0.view(), &opts).unwrap();
            assert_eq!(out.endpoints, x0);
        }
    }

    #[test]
    fn constant_field_translates_exactly() {
        let x0 = array![[0.0, 0.0], [1.0, 2.0]];
        for method in [Method::Euler, Method::Rk4] {
            let opts = IntegrateOptions {
                method,
                steps: 200,
                t_end: 0.999,
                ..IntegrateOptions::default()
            };
            let out = integrate(&Constant(vec![1.0, 0.0]), x0.view(), &opts).unwrap();
            for i in 0..2 {
                assert!((out.endpoints[[i, 0]] - x0[[i, 0]] - 0.999).abs() < 1e-12);
                assert_eq!(out.endpoints[[i, 1]], x0[[i, 1]]);
            }
        }
    }

    #[test]
    fn recording_schedule() {
        let x0 = array![[0.0], [1.0], [2.0]];
        let opts = IntegrateOptions {
            method: Method::Euler,
            steps: 10,
            t_end: 0.5,
            record_every: 1,
            record_particles: Some(1),
        };
        let out = integrate(&Constant(vec![1.0]), x0.view(), &opts).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        let pts = &out.trajectories[0].points;
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[0].t, 0.0);
        assert_eq!(pts[10].t, 0.5);
        assert!(pts.windows(2).all(|w| w[1].t > w[0].t));

        let opts = IntegrateOptions {
            record_every: 4,
            record_particles: None,
            ..opts
        };
        let out = integrate(&Constant(vec![1.0]), x0.view(), &opts).unwrap();
        assert_eq!(out.trajectories.len(), 3);
        let steps: Vec<usize> = out.trajectories[2].points.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);

        let opts = IntegrateOptions {
            record_every: 0,
            ..opts
        };
        assert!(integrate(&Constant(vec![1.0]), x0.view(), &opts)
            .unwrap()
            .trajectories
            .is_empty());
    }

    #[test]
    fn invalid_options_rejected() {
        let x0 = array![[0.0]];
        let field = Constant(vec![1.0]);
        let bad = [
            IntegrateOptions { steps: 0, ..IntegrateOptions::default() },
            IntegrateOptions { t_end: 0.9995, ..IntegrateOptions::default() },
            IntegrateOptions { t_end: 0.0, ..IntegrateOptions::default() },
        ];
        for opts in bad {
            assert!(integrate(&field, x0.view(), &opts).is_err(), "{opts:?}");
        }
        assert!(integrate(&Constant(vec![1.0, 0.0]), x0.view(), &IntegrateOptions::default()).is_err());
    }

    #[test]
    fn non_finite_state_names_particle_and_step() {
        let x0 = array![[-5.0], [1.0]];
        let opts = IntegrateOptions {
            method: Method::Euler,
            steps: 10,
            t_end: 0.5,
            ..IntegrateOptions::default()
        };
        // step k evaluates at t = 0.05 (k - 1); t = 0.2 is the fifth step
        let err = integrate(&Poison, x0.view(), &opts).unwrap_err();
        assert!(
            matches!(err, FlowError::Integration { particle: 1, step: 5 }),
            "{err}"
        );
    }

    #[test]
    fn oracle_field_handles_report_sources() {
        let prior = GaussianMixture::single(IsotropicGaussian::standard(1).unwrap());
        let target = GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-3.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![3.0], 0.5).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let o = Oracle::new(prior, target).unwrap();
        let f = FieldHandle::Oracle(o.clone());
        let a = FieldHandle::Averaged(o.clone());
        assert_eq!((f.source(), a.source()), ("oracle", "averaged"));
        let x = [0.4];
        assert_eq!(f.eval(0.5, &x).unwrap(), o.optimal_velocity(0.5, &x).unwrap());
        assert_eq!(a.eval(0.5, &x).unwrap(), o.averaged_velocity(0.5, &x).unwrap());
        assert!(f.eval(0.9999, &x).is_err());
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = [0.1, 0.05, 0.025].iter().map(|h| (*h, 3.0 * h * h)).collect();
        assert!((log_log_slope(&pts) - 2.0).abs() < 1e-12);
    }
}
