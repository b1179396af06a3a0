//! Monte-Carlo estimate of `E[x1 - x0 | x_t in ball(probe, r)]` from joint
//! draws of the coupling, independent of the closed-form posterior.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::oracle::Oracle;
use crate::rng::{substream, Stream};

const DRAWS_PER_CHUNK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McProbe {
    pub point: Vec<f64>,
    pub hits: usize,
    /// Mean of `x1 - x0` over the draws whose `x_t` landed in the ball.
    pub sample_mean: Vec<f64>,
    /// Mean of the closed-form velocity at the same `x_t` values.
    pub closed_form_mean: Vec<f64>,
    /// Standard error of the difference of the two means, per coordinate.
    pub std_error: Vec<f64>,
    /// Closed-form velocity at the probe centre.
    pub at_point: Vec<f64>,
}

impl McProbe {
    /// Largest per-coordinate `|sample - closed form| / std_error`.
    pub fn max_z(&self) -> f64 {
        self.sample_mean
            .iter()
            .zip(&self.closed_form_mean)
            .zip(&self.std_error)
            .map(|((a, b), se)| (a - b).abs() / se)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone)]
struct Acc {
    hits: usize,
    target: Vec<f64>,
    closed: Vec<f64>,
    resid_sq: Vec<f64>,
}

impl Acc {
    fn new(d: usize) -> Self {
        Self {
            hits: 0,
            target: vec![0.0; d],
            closed: vec![0.0; d],
            resid_sq: vec![0.0; d],
        }
    }

    fn merge(&mut self, other: &Acc) {
        self.hits += other.hits;
        for i in 0..self.target.len() {
            self.target[i] += other.target[i];
            self.closed[i] += other.closed[i];
            self.resid_sq[i] += other.resid_sq[i];
        }
    }
}

/// Draws `draws` coupled pairs `(x0, x1)` from prior x target, forms `x_t`,
/// and for every probe averages the regression target `x1 - x0` over the
/// draws landing within `radius`. Deterministic for a given seed regardless
/// of thread count.
///
/// Conditioning on the same hits, the closed-form field is averaged too, so
/// the comparison carries no smoothing bias from the ball's width.
pub fn conditional_velocity_check(
    oracle: &Oracle,
    t: f64,
    probes: &[Vec<f64>],
    radius: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<McProbe>> {
    let d = oracle.dim();
    for p in probes {
        check_dim(d, p.len())?;
    }
    if !(radius > 0.0) || draws == 0 {
        return Err(FlowError::InvalidParameter(
            "need a positive radius and at least one draw".into(),
        ));
    }
    oracle.optimal_velocity(t, &vec![0.0; d])?;
    let r2 = radius * radius;
    let chunks = draws.div_ceil(DRAWS_PER_CHUNK);

    let partials = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Vec<Acc>> {
            let mut rng = substream(seed, Stream::MonteCarlo, c as u64);
            let n = DRAWS_PER_CHUNK.min(draws - c * DRAWS_PER_CHUNK);
            let mut accs = vec![Acc::new(d); probes.len()];
            let (mut x0, mut x1, mut xt, mut v) =
                (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            for _ in 0..n {
                oracle.prior().sample_into(&mut rng, &mut x0);
                oracle.target().sample_into(&mut rng, &mut x1);
                for i in 0..d {
                    xt[i] = t * x1[i] + (1.0 - t) * x0[i];
                }
                let mut evaluated = false;
                for (acc, p) in accs.iter_mut().zip(probes) {
                    let dist2: f64 = xt.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist2 > r2 {
                        continue;
                    }
                    if !evaluated {
                        oracle.velocity_into(t, &xt, &mut v)?;
                        evaluated = true;
                    }
                    acc.hits += 1;
                    for i in 0..d {
                        let target = x1[i] - x0[i];
                        acc.target[i] += target;
                        acc.closed[i] += v[i];
                        acc.resid_sq[i] += (target - v[i]) * (target - v[i]);
                    }
                }
            }
            Ok(accs)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut totals = vec![Acc::new(d); probes.len()];
    for part in &partials {
        for (tot, acc) in totals.iter_mut().zip(part) {
            tot.merge(acc);
        }
    }

    probes
        .iter()
        .zip(totals)
        .map(|(p, acc)| {
            let n = acc.hits as f64;
            let sample_mean: Vec<f64> = acc.target.iter().map(|s| s / n).collect();
            let closed_form_mean: Vec<f64> = acc.closed.iter().map(|s| s / n).collect();
            let std_error = (0..d)
                .map(|i| {
                    let mean = sample_mean[i] - closed_form_mean[i];
                    let var = (acc.resid_sq[i] / n - mean * mean) * n / (n - 1.0);
                    (var / n).sqrt()
                })
                .collect();
            Ok(McProbe {
                point: p.clone(),
                hits: acc.hits,
                sample_mean,
                closed_form_mean,
                std_error,
                at_point: oracle.optimal_velocity(t, p)?,
            })
        })
        .collect()
}

/// Ten probes around each target mode's time-t centre: the centre, four at
/// a quarter of the marginal spread and five at 0.45 of it.
pub fn probes_around_modes(oracle: &Oracle, t: f64) -> Result<Vec<Vec<f64>>> {
    let d = oracle.dim();
    if d != 2 {
        return Err(FlowError::Unsupported(format!(
            "probe layout is defined for 2 dimensions, got {d}"
        )));
    }
    let marginal = oracle.marginal_at(t)?;
    let mut probes = Vec::new();
    let centres: Vec<(Vec<f64>, f64)> = oracle
        .target()
        .components()
        .iter()
        .map(|k| {
            // largest-weight marginal component heading to this mode
            let c: Vec<f64> = k.mean().iter().map(|m| t * m).collect();
            let s = marginal
                .components()
                .iter()
                .min_by(|a, b| {
                    let da: f64 = a.mean().iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.mean().iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .map(|g| g.sigma())
                .unwrap_or(1.0);
            (c, s)
        })
        .collect();
    for (c, s) in centres {
        probes.push(c.clone());
        for (count, frac, phase) in [(4, 0.25, 0.0), (5, 0.45, 0.5)] {
            for j in 0..count {
                let angle = std::f64::consts::TAU * (j as f64 + phase) / count as f64;
                probes.push(vec![
                    c[0] + frac * s * angle.cos(),
                    c[1] + frac * s * angle.sin(),
                ]);
            }
        }
    }
    Ok(probes)
}
