use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, FlowBatch, VelocityNet};
use crate::error::{check_dim, FlowError, Result};
use crate::mixture::GaussianMixture;
use crate::oracle::EPS_TIME;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Times are drawn from `U[0, 1 - eps_time]`.
    pub eps_time: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            steps_per_epoch: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eps_time: EPS_TIME,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlowError::InvalidParameter(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.eps_time > 0.0 && self.eps_time < 1.0) {
            return bad(format!("eps_time must lie in (0, 1), got {}", self.eps_time));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean pre-update minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub checksum: String,
    /// Excluded from any persisted output; it is the one nondeterministic field.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Adaptive-moment gradient descent without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, net: &mut VelocityNet, grads: &[f64]) -> Result<()> {
        check_dim(self.m.len(), grads.len())?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        }
        let (m, v, lr, eps) = (&self.m, &self.v, self.lr, self.eps);
        net.update_params(|i, p| {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
        Ok(())
    }
}

fn draw_batch<R: Rng + ?Sized>(
    prior: &GaussianMixture,
    target: &GaussianMixture,
    n: usize,
    t_max: f64,
    rng: &mut R,
) -> FlowBatch {
    let d = prior.dim();
    let mut x0 = Array2::zeros((n, d));
    let mut x1 = Array2::zeros((n, d));
    let mut t = Array1::zeros(n);
    for i in 0..n {
        // U[0, t_max]; the closed upper end has measure zero
        t[i] = rng.random::<f64>() * t_max;
        prior.sample_into(rng, x0.row_mut(i).as_slice_mut().unwrap());
        target.sample_into(rng, x1.row_mut(i).as_slice_mut().unwrap());
    }
    FlowBatch { x0, x1, t }
}

/// Minibatch flow-matching training with fresh samples every step.
pub fn train<R: Rng + ?Sized>(
    net: &mut VelocityNet,
    prior: &GaussianMixture,
    target: &GaussianMixture,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dim(net.dim(), prior.dim())?;
    check_dim(net.dim(), target.dim())?;
    let start = Instant::now();
    let mut adam = Adam::new(net.num_params(), cfg);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let t_max = 1.0 - cfg.eps_time;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = draw_batch(prior, target, cfg.batch_size, t_max, rng);
            let (loss, grads) = loss_and_grad(net, &batch)?;
            if !loss.is_finite() {
                return Err(FlowError::Training { epoch, loss });
            }
            total += loss;
            adam.step(net, &grads.flatten())?;
        }
        let mean = total / cfg.steps_per_epoch as f64;
        if !mean.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(FlowError::Training { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: cfg.epochs * cfg.steps_per_epoch,
        checksum: net.checksum(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::IsotropicGaussian;
    use crate::net::Activation;
    use crate::rng::{stream, Stream};

    fn setup() -> (GaussianMixture, GaussianMixture) {
        let prior = GaussianMixture::single(IsotropicGaussian::standard(2).unwrap());
        let target = GaussianMixture::new(
            vec![
                IsotropicGaussian::new(vec![-3.0, 0.0], 0.5).unwrap(),
                IsotropicGaussian::new(vec![3.0, 0.0], 0.5).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        (prior, target)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            steps_per_epoch: 20,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (prior, target) = setup();
        let mut net =
            VelocityNet::new(2, &[16, 16], Activation::Silu, &mut stream(0, Stream::Init)).unwrap();
        let before = net.params();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg()
        };
        let report = train(&mut net, &prior, &target, &cfg, &mut stream(0, Stream::Train)).unwrap();
        assert_eq!(net.params(), before);
        assert_eq!(report.epoch_losses.len(), 3);
        // flat up to minibatch noise: same parameters, fresh samples
        let (lo, hi) = report
            .epoch_losses
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), l| (a.min(*l), b.max(*l)));
        assert!(hi / lo < 1.3, "{:?}", report.epoch_losses);
    }

    #[test]
    fn training_is_reproducible() {
        let (prior, target) = setup();
        let run = || {
            let mut net = VelocityNet::new(2, &[16, 16], Activation::Silu, &mut stream(3, Stream::Init))
                .unwrap();
            let r = train(&mut net, &prior, &target, &quick_cfg(), &mut stream(3, Stream::Train)).unwrap();
            (net.params(), r.epoch_losses, r.checksum)
        };
        let (p1, l1, c1) = run();
        let (p2, l2, c2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (prior, target) = setup();
        let mut net =
            VelocityNet::new(2, &[8], Activation::Relu, &mut stream(1, Stream::Init)).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg()
        };
        let r = train(&mut net, &prior, &target, &cfg, &mut stream(1, Stream::Train)).unwrap();
        assert!(r.epoch_losses.is_empty());
        assert_eq!(net, before);
        assert_eq!(r.checksum, before.checksum());
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let (prior, target) = setup();
        let mut net =
            VelocityNet::new(2, &[16, 16], Activation::Relu, &mut stream(2, Stream::Init)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            beta1: 0.0,
            beta2: 0.0,
            adam_eps: 1e-300,
            ..quick_cfg()
        };
        let err = train(&mut net, &prior, &target, &cfg, &mut stream(2, Stream::Train)).unwrap_err();
        assert!(matches!(err, FlowError::Training { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { steps_per_epoch: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { beta2: 1.0, ..TrainConfig::default() },
            TrainConfig { eps_time: 0.0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
