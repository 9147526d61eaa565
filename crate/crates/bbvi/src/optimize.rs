//! Step-size schedules and the stochastic-ascent driver: draw a sample
//! batch, form a noisy ELBO gradient, step lambda, stop when the change of
//! lambda drops below the threshold (max-norm over the unconstrained
//! coordinates) or the iteration/time budget runs out.

use std::time::Instant;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::estimators::{
    estimate_gradient, CvMode, EstimatorKind, SampleBatch,
};
use crate::families::MeanFieldFamily;
use crate::model::ModelSpec;
use crate::{Error, Result};

/// rho_t = eta (tau + t)^(-kappa); kappa in (0.5, 1] satisfies the
/// Robbins-Monro conditions sum rho = inf, sum rho^2 < inf.
#[derive(Clone, Copy, Debug)]
pub struct RobbinsMonroSchedule {
    pub eta: f64,
    pub tau: f64,
    pub kappa: f64,
}

impl Default for RobbinsMonroSchedule {
    fn default() -> Self {
        RobbinsMonroSchedule {
            eta: 1.0,
            tau: 1.0,
            kappa: 0.9,
        }
    }
}

impl RobbinsMonroSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.tau >= 0.0) {
            return Err(Error::Config("Robbins-Monro needs eta > 0, tau >= 0".into()));
        }
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return Err(Error::Config(format!(
                "Robbins-Monro decay exponent {} outside (0.5, 1]",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Step size at iteration t >= 1.
pub fn rm_step(schedule: &RobbinsMonroSchedule, t: usize) -> f64 {
    schedule.eta * (schedule.tau + t as f64).powf(-schedule.kappa)
}

/// Diagonal AdaGrad accumulator: rho_t = eta / sqrt(G_t + eps) per
/// coordinate, with G_t the running sum of squared gradients.
#[derive(Clone, Debug)]
pub struct AdaGradState {
    pub eta: f64,
    pub epsilon: f64,
    g2sum: Vec<f64>,
}

impl AdaGradState {
    pub fn new(eta: f64, n_params: usize, epsilon: f64) -> Self {
        AdaGradState {
            eta,
            epsilon,
            g2sum: vec![0.0; n_params],
        }
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.g2sum
    }
}

/// Accumulate g and return the per-coordinate learning rates.
pub fn adagrad_step(state: &mut AdaGradState, g: &[f64]) -> Vec<f64> {
    assert_eq!(g.len(), state.g2sum.len());
    let mut rho = Vec::with_capacity(g.len());
    for (acc, &gc) in state.g2sum.iter_mut().zip(g) {
        *acc += gc * gc;
        rho.push(state.eta / (*acc + state.epsilon).sqrt());
    }
    rho
}

#[derive(Clone, Copy, Debug)]
pub enum Schedule {
    RobbinsMonro(RobbinsMonroSchedule),
    AdaGrad { eta: f64, epsilon: f64 },
}

impl Schedule {
    pub fn adagrad(eta: f64) -> Self {
        Schedule::AdaGrad { eta, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub estimator: EstimatorKind,
    pub cv_mode: CvMode,
    /// Samples per iteration.
    pub s: usize,
    pub max_iterations: usize,
    /// Stop when max |delta lambda| drops below this.
    pub convergence_threshold: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Observation minibatch size for the subsampled estimator.
    pub subsample_batch: usize,
    /// Keep a full lambda snapshot every k iterations (plus first and last).
    pub snapshot_every: usize,
    /// Coordinates excluded from updates (fitted-global / local-only runs).
    pub frozen: Option<Vec<bool>>,
    /// Optional wall-clock budget in seconds.
    pub max_seconds: Option<f64>,
}

impl RunConfig {
    pub fn new(estimator: EstimatorKind, seed: u64) -> Self {
        RunConfig {
            estimator,
            cv_mode: match estimator {
                EstimatorKind::Naive | EstimatorKind::RaoBlackwell => CvMode::Disabled,
                _ => CvMode::SameSamples,
            },
            s: 1000,
            max_iterations: 2000,
            convergence_threshold: 0.01,
            schedule: Schedule::adagrad(1.0),
            seed,
            subsample_batch: 25,
            snapshot_every: 10,
            frozen: None,
            max_seconds: None,
        }
    }

    pub fn validate(&self, family: &MeanFieldFamily) -> Result<()> {
        if self.s == 0 {
            return Err(Error::Config("need at least 1 sample per iteration".into()));
        }
        if self.cv_mode != CvMode::Disabled && self.s < 2 {
            return Err(Error::Config("control variates need S >= 2".into()));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::Config("convergence threshold must be positive".into()));
        }
        if let Schedule::RobbinsMonro(rm) = self.schedule {
            rm.validate()?;
        }
        if let Some(frozen) = &self.frozen {
            if frozen.len() != family.n_params() {
                return Err(Error::Config("frozen mask length mismatch".into()));
            }
        }
        Ok(())
    }
}

/// One trace row per iteration.
#[derive(Clone, Debug)]
pub struct IterRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub grad_norm: f64,
    pub rho_mean: f64,
    pub max_change: f64,
    /// Mean per-sample term variance per variational factor.
    pub factor_variance: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    pub records: Vec<IterRecord>,
    pub converged: bool,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }
}

/// Random initialization of the unconstrained parameters: i.i.d.
/// N(0, 0.1^2), small enough to avoid early support blowups in gamma
/// factors.
pub fn init_lambda<R: Rng + ?Sized>(family: &MeanFieldFamily, rng: &mut R) -> Vec<f64> {
    (0..family.n_params())
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            0.1 * e
        })
        .collect()
}

/// Monte Carlo ELBO estimate: (1/S) sum_s [log p(x, z_s) - log q(z_s)].
pub fn elbo_estimate<R: Rng + ?Sized>(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    lambda: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<f64> {
    if s == 0 {
        return Err(Error::Config("ELBO estimate needs S >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..s {
        let z = family.sample(lambda, rng)?;
        let lj = model.log_joint(&z)?;
        let lq = family.log_pdf(lambda, &z)?;
        if !lj.is_finite() {
            return Err(Error::Mismatch(
                "log joint not finite at a variational draw".into(),
            ));
        }
        total += lj - lq;
    }
    Ok(total / s as f64)
}

enum StepState {
    RobbinsMonro(RobbinsMonroSchedule),
    AdaGrad(AdaGradState),
}

/// Stochastic ascent on the ELBO with the configured estimator and
/// schedule. Returns the fitted lambda and the full per-iteration trace;
/// a non-finite lambda after an update aborts with a diverged-run error
/// carrying the trace so far.
pub fn run_bbvi(
    model: &ModelSpec,
    family: &MeanFieldFamily,
    lambda0: &[f64],
    config: &RunConfig,
) -> Result<(Vec<f64>, RunTrace)> {
    config.validate(family)?;
    crate::estimators::check_compatibility(model, family)?;
    if lambda0.len() != family.n_params() {
        return Err(Error::Config("initial lambda length mismatch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lambda = lambda0.to_vec();
    let mut trace = RunTrace::default();
    let mut step = match config.schedule {
        Schedule::RobbinsMonro(rm) => StepState::RobbinsMonro(rm),
        Schedule::AdaGrad { eta, epsilon } => {
            StepState::AdaGrad(AdaGradState::new(eta, family.n_params(), epsilon))
        }
    };
    let n = model.n_observations();
    if config.estimator == EstimatorKind::Subsampled && n == 0 {
        return Err(Error::Config(
            "subsampled estimator needs a hierarchical model".into(),
        ));
    }
    let started = Instant::now();
    for t in 1..=config.max_iterations {
        // A numeric failure after at least one successful update means the
        // iterates blew up, not that the problem was ill-posed.
        let diverged = |trace: RunTrace, reason: String| Error::Diverged {
            iteration: t,
            reason,
            trace: Box::new(trace),
        };
        let drawn: Result<(SampleBatch, Option<Vec<usize>>)> =
            if config.estimator == EstimatorKind::Subsampled {
                let b = config.subsample_batch.clamp(1, n);
                let obs: Vec<usize> = index_sample(&mut rng, n, b).into_iter().collect();
                SampleBatch::draw_for_blocks(model, family, &lambda, config.s, &mut rng, &obs)
                    .map(|batch| (batch, Some(obs)))
            } else {
                SampleBatch::draw(family, &lambda, config.s, &mut rng).map(|batch| (batch, None))
            };
        let (batch, obs) = match drawn {
            Ok(v) => v,
            Err(e) if t > 1 => return Err(diverged(trace, e.to_string())),
            Err(e) => return Err(e),
        };
        let est = match estimate_gradient(
            model,
            family,
            &batch,
            config.estimator,
            config.cv_mode,
            obs.as_deref(),
        ) {
            Ok(est) => est,
            Err(e) if t > 1 => return Err(diverged(trace, e.to_string())),
            Err(e) => return Err(e),
        };
        let mut g = est.gradient;
        if let Some(frozen) = &config.frozen {
            for (gc, &f) in g.iter_mut().zip(frozen) {
                if f {
                    *gc = 0.0;
                }
            }
        }
        let rho: Vec<f64> = match &mut step {
            StepState::RobbinsMonro(rm) => vec![rm_step(rm, t); g.len()],
            StepState::AdaGrad(state) => adagrad_step(state, &g),
        };
        let mut max_change: f64 = 0.0;
        for c in 0..lambda.len() {
            let delta = rho[c] * g[c];
            lambda[c] += delta;
            max_change = max_change.max(delta.abs());
        }
        let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let factor_variance: Vec<f64> = (0..family.n_factors())
            .map(|i| {
                let r = family.param_range(i);
                let len = r.len().max(1) as f64;
                est.term_variance[r].iter().sum::<f64>() / len
            })
            .collect();
        let snapshot = t == 1
            || t == config.max_iterations
            || (config.snapshot_every > 0 && t % config.snapshot_every == 0);
        trace.records.push(IterRecord {
            iteration: t,
            elbo: est.elbo,
            grad_norm,
            rho_mean: rho.iter().sum::<f64>() / rho.len() as f64,
            max_change,
            factor_variance,
            lambda: snapshot.then(|| lambda.clone()),
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: t,
                reason: "non-finite lambda after update".into(),
                trace: Box::new(trace),
            });
        }
        if max_change < config.convergence_threshold {
            trace.converged = true;
            break;
        }
        if let Some(budget) = config.max_seconds {
            if started.elapsed().as_secs_f64() >= budget {
                break;
            }
        }
    }
    if let Some(last) = trace.records.last_mut() {
        if last.lambda.is_none() {
            last.lambda = Some(lambda.clone());
        }
    }
    Ok((lambda, trace))
}
