//! The regularized likelihood objective, its reverse-mode gradient through
//! the discretized RK4 solve, and the training loop.
//!
//! For samples `x_i` of the sampled density and a scored log-density `log ρ`,
//! the per-sample functional is
//!
//! ```text
//! J(x) = −log ρ(X(x, 1)) − l(x, 1) + λ r(x, 1)
//! ```
//!
//! with `l = log det ∇_x X` and `r` the integrated squared acceleration.
//! Minimizing its mean over samples of `π` minimizes `KL(X(·,1)♯π ‖ ρ)` up to
//! the constant `E_π[log π]`, plus `λ` times the straight-line penalty.

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::GridDensity;
use crate::error::{FlowError, Result};
use crate::flow::{integrate_augmented, kinetic_action, trajectory, IntegratorConfig};
use crate::tape::{Tape, Var};
use crate::velocity::{Architecture, ResNetField, VelocityField};

/// Value and gradient of a log-density at a point that may lie outside the
/// support.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityValue {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Whether the point lay outside the cube and was extended.
    pub outside: bool,
}

/// A differentiable log-density on `R^d`.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> LogDensityValue;
}

/// `log ρ` of a tabulated density, extended outside the cube through the
/// nearest point of the cube.
///
/// With a `boundary_scale` τ the extension also subtracts `dist²/(2τ²)`.
/// Without it, a flat density makes the objective unbounded below: expanding
/// the flow out of the cube raises `l` at no cost in `log ρ`.
#[derive(Debug, Clone)]
pub struct GridLogDensity {
    density: GridDensity,
    offset: f64,
    boundary_scale: Option<f64>,
}

impl GridLogDensity {
    pub fn new(density: GridDensity) -> Self {
        Self {
            density,
            offset: 0.0,
            boundary_scale: None,
        }
    }

    /// Unnormalized form `log π̃ = log π + log C`, with `C` the integral of
    /// the raw tabulated values.
    pub fn unnormalized(density: GridDensity) -> Self {
        let offset = density.normalizer().ln();
        Self {
            density,
            offset,
            boundary_scale: None,
        }
    }

    pub fn with_boundary_scale(mut self, scale: Option<f64>) -> Self {
        self.boundary_scale = scale;
        self
    }

    pub fn density(&self) -> &GridDensity {
        &self.density
    }
}

impl LogDensity for GridLogDensity {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn log_density(&self, x: &[f64]) -> LogDensityValue {
        let (value, outside) = self.density.eval_clamped(x);
        let mut grad: Vec<f64> = self
            .density
            .grad_clamped(x)
            .into_iter()
            .map(|g| g / value)
            .collect();
        let mut log = value.ln() + self.offset;
        if let (true, Some(tau)) = (outside, self.boundary_scale) {
            for (g, xi) in grad.iter_mut().zip(x) {
                let excess = xi - xi.clamp(0.0, 1.0);
                log -= excess * excess / (2.0 * tau * tau);
                *g -= excess / (tau * tau);
            }
        }
        LogDensityValue {
            value: log,
            grad,
            outside,
        }
    }
}

/// Batch means of the terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `mean(−log ρ(X) − l + λ r)`.
    pub loss: f64,
    pub neg_log_density: f64,
    pub log_det: f64,
    pub regularizer: f64,
    /// Number of endpoints that left the cube.
    pub outside: usize,
}

fn check_batch(field_dim: usize, batch: &[Vec<f64>], log_density: &dyn LogDensity) -> Result<()> {
    if batch.is_empty() {
        return Err(FlowError::argument("batch is empty"));
    }
    if log_density.dim() != field_dim {
        return Err(FlowError::argument(format!(
            "log-density is {}-d but the field is {field_dim}-d",
            log_density.dim()
        )));
    }
    Ok(())
}

fn summarize(terms: &[(f64, f64, f64, bool)], lambda: f64) -> Result<LossBreakdown> {
    let n = terms.len() as f64;
    let nll = terms.iter().map(|t| t.0).sum::<f64>() / n;
    let log_det = terms.iter().map(|t| t.1).sum::<f64>() / n;
    let reg = terms.iter().map(|t| t.2).sum::<f64>() / n;
    let out = LossBreakdown {
        loss: nll - log_det + lambda * reg,
        neg_log_density: nll,
        log_det,
        regularizer: reg,
        outside: terms.iter().filter(|t| t.3).count(),
    };
    if !out.loss.is_finite() {
        return Err(FlowError::numeric("loss is not finite"));
    }
    Ok(out)
}

/// Empirical objective of any velocity field over a batch.
pub fn erm_loss(
    field: &dyn VelocityField,
    batch: &[Vec<f64>],
    log_density: &dyn LogDensity,
    lambda: f64,
    cfg: &IntegratorConfig,
) -> Result<LossBreakdown> {
    check_batch(field.dim(), batch, log_density)?;
    let terms: Vec<(f64, f64, f64, bool)> = batch
        .par_iter()
        .map(|x| {
            let s = integrate_augmented(field, x, cfg)?;
            let ld = log_density.log_density(&s.x);
            Ok((-ld.value, s.l, s.r, ld.outside))
        })
        .collect::<Result<_>>()?;
    summarize(&terms, lambda)
}

/// Network parameters recorded as tape leaves.
struct NetVars {
    arch: Architecture,
    blocks: Vec<Var>,
}

impl NetVars {
    fn record(tape: &mut Tape, net: &ResNetField) -> Self {
        let blocks = net.blocks().into_iter().map(|b| tape.leaf(b)).collect();
        Self {
            arch: net.architecture(),
            blocks,
        }
    }

    /// Records `(f, tr ∇_x f, |∇_x f·f + ∂_t f|²)` at `(x, t)`.
    fn stage(&self, tape: &mut Tape, x: Var, t: f64) -> (Var, Var, Var) {
        let Architecture {
            dim,
            layers,
            step,
            activation: act,
            boundary_mask: mask,
            ..
        } = self.arch;
        let b = &self.blocks;
        let tv = tape.constant(t);
        let s = tape.vstack(x, tv);
        let ks = tape.matmul(b[0], s);
        let z = tape.add(ks, b[1]);
        let mut u = tape.act(z, act);
        let dz = tape.act_prime(z, act);
        let mut jac = tape.row_scale(dz, b[0]);
        for i in 1..=layers {
            let (k, bias) = (b[2 * i], b[2 * i + 1]);
            let ku = tape.matmul(k, u);
            let z = tape.add(ku, bias);
            let dz = tape.act_prime(z, act);
            let kj = tape.matmul(k, jac);
            let inc = tape.row_scale(dz, kj);
            jac = tape.add_scaled(jac, inc, step);
            let a = tape.act(z, act);
            u = tape.add_scaled(u, a, step);
        }
        let (head, head_bias) = (b[2 * layers + 2], b[2 * layers + 3]);
        let hu = tape.matmul(head, u);
        let f = tape.add(hu, head_bias);
        let mut full = tape.matmul(head, jac);
        let mut f = f;
        let mut jx_extra = None;
        if mask {
            // f_k = m(x_k) N_k with m(y) = 4y − 4y².
            let m = tape.quadratic(x, [0.0, 4.0, -4.0]);
            let dm = tape.quadratic(x, [4.0, -8.0, 0.0]);
            let dm_f = tape.row_scale(dm, f);
            jx_extra = Some(tape.diag(dm_f));
            full = tape.row_scale(m, full);
            f = tape.row_scale(m, f);
        }
        let mut jx = tape.columns(full, 0, dim);
        if let Some(extra) = jx_extra {
            jx = tape.add(jx, extra);
        }
        let jt = tape.columns(full, dim, 1);
        let div = tape.trace(jx);
        let jf = tape.matmul(jx, f);
        let acc = tape.add(jf, jt);
        let acc_sq = tape.sum_sq(acc);
        (f, div, acc_sq)
    }
}

/// Records the augmented RK4 solve from `x0` and returns `(X(1), l(1), r(1))`.
fn record_trajectory(tape: &mut Tape, net: &NetVars, x0: &[f64], cfg: &IntegratorConfig) -> (Var, Var, Var) {
    let dt = 1.0 / cfg.steps as f64;
    let mut x = tape.column(x0);
    let mut l = tape.constant(0.0);
    let mut r = tape.constant(0.0);
    for n in 0..cfg.steps {
        let t = n as f64 * dt;
        let (k1, l1, r1) = net.stage(tape, x, t);
        let x2 = tape.add_scaled(x, k1, 0.5 * dt);
        let (k2, l2, r2) = net.stage(tape, x2, t + 0.5 * dt);
        let x3 = tape.add_scaled(x, k2, 0.5 * dt);
        let (k3, l3, r3) = net.stage(tape, x3, t + 0.5 * dt);
        let x4 = tape.add_scaled(x, k3, dt);
        let (k4, l4, r4) = net.stage(tape, x4, t + dt);
        let w = dt / 6.0;
        for (k, l_s, r_s, c) in [(k1, l1, r1, w), (k2, l2, r2, 2.0 * w), (k3, l3, r3, 2.0 * w), (k4, l4, r4, w)] {
            x = tape.add_scaled(x, k, c);
            l = tape.add_scaled(l, l_s, c);
            r = tape.add_scaled(r, r_s, c);
        }
    }
    (x, l, r)
}

/// Loss and its reverse-mode gradient for one sample, flattened in
/// [`ResNetField::to_flat`] order.
fn sample_gradient(
    net: &ResNetField,
    x0: &[f64],
    log_density: &dyn LogDensity,
    lambda: f64,
    cfg: &IntegratorConfig,
) -> Result<((f64, f64, f64, bool), Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = NetVars::record(&mut tape, net);
    let (x, l, r) = record_trajectory(&mut tape, &vars, x0, cfg);
    let end: Vec<f64> = tape.value(x).iter().copied().collect();
    if end.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::numeric(format!("trajectory from {x0:?} became non-finite")));
    }
    let ld = log_density.log_density(&end);
    let grad = DMatrix::from_column_slice(end.len(), 1, &ld.grad);
    let log_rho = tape.external(x, ld.value, grad);
    // loss = −log ρ − l + λ r
    let zero = tape.constant(0.0);
    let a = tape.add_scaled(zero, log_rho, -1.0);
    let b = tape.add_scaled(a, l, -1.0);
    let loss = tape.add_scaled(b, r, lambda);
    let terms = (-ld.value, tape.scalar(l), tape.scalar(r), ld.outside);
    let mut grads = tape.backward(loss);
    let mut flat = Vec::with_capacity(net.architecture().param_count());
    for (v, shape) in vars.blocks.iter().zip(net.architecture().block_shapes()) {
        match grads.take(*v) {
            Some(g) => flat.extend_from_slice(g.as_slice()),
            None => flat.extend(std::iter::repeat(0.0).take(shape.0 * shape.1)),
        }
    }
    Ok((terms, flat))
}

/// Batch objective and its gradient with respect to all network weights,
/// back-propagated through the discretized RK4 computation.
pub fn loss_gradient(
    net: &ResNetField,
    batch: &[Vec<f64>],
    log_density: &dyn LogDensity,
    lambda: f64,
    cfg: &IntegratorConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    check_batch(net.dim(), batch, log_density)?;
    let per_sample: Vec<_> = batch
        .par_iter()
        .map(|x| sample_gradient(net, x, log_density, lambda, cfg))
        .collect::<Result<_>>()?;
    // Reduce in batch order so results do not depend on thread scheduling.
    let mut grad = vec![0.0; net.architecture().param_count()];
    for (_, g) in &per_sample {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    let terms: Vec<_> = per_sample.iter().map(|(t, _)| *t).collect();
    Ok((summarize(&terms, lambda)?, grad))
}

/// Which of the two training problems is being solved. Both push samples of
/// the `source` density through the flow and score the endpoints under the
/// `target` log-density; they differ in how the two are accessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// The source is known only through a fixed finite sample (density
    /// estimation); the target is a normalized reference density.
    #[default]
    SamplesToSource,
    /// The source can be sampled freely; the target is known up to its
    /// normalizing constant.
    SourceToTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

fn default_dataset_size() -> usize {
    4096
}

fn default_kl_samples() -> usize {
    4096
}

fn default_report_every() -> usize {
    100
}

fn default_boundary_scale() -> Option<f64> {
    Some(0.02)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Size of the fixed training sample when the source is known through
    /// samples.
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    /// Held-out samples used for the KL and regularizer estimates.
    #[serde(default = "default_kl_samples")]
    pub kl_samples: usize,
    /// A report row is recorded every this many iterations and at the end.
    #[serde(default = "default_report_every")]
    pub report_every: usize,
    /// Width τ of the quadratic penalty on endpoints outside the cube; see
    /// [`GridLogDensity`].
    #[serde(default = "default_boundary_scale")]
    pub boundary_scale: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlowError::argument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.report_every == 0 {
            return bad("batch_size, max_iters and report_every must be positive".into());
        }
        if self.kl_samples == 0 {
            return bad("kl_samples must be positive".into());
        }
        if self.direction == Direction::SamplesToSource && self.dataset_size == 0 {
            return bad("dataset_size must be positive".into());
        }
        if let Some(tau) = self.boundary_scale {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("boundary_scale must be positive, got {tau}"));
            }
        }
        self.integrator.validate()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    /// Mean objective over the current minibatch.
    pub erm_loss: f64,
    /// Held-out estimate of `KL(X(·,1)♯π ‖ ρ)`.
    pub kl_est: f64,
    /// Held-out mean of `r(1)`.
    pub reg_est: f64,
    /// Fraction of held-out endpoints outside the cube.
    pub outside_fraction: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<TrainRecord>,
    /// Final weights (the last finite ones if training diverged).
    pub field: ResNetField,
    /// Set when training stopped early because the loss became non-finite.
    pub aborted: Option<String>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.history.last()
    }
}

/// Held-out estimates for a trained field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutEstimate {
    pub kl: f64,
    pub regularizer: f64,
    pub outside_fraction: f64,
}

/// Monte Carlo estimate of `KL(X(·,1)♯π ‖ ρ) = E_π[log π(x) − l(x) − log ρ(X(x,1))]`
/// over the given samples of `π`. Endpoints outside the cube are scored with
/// the nearest-point extension and counted.
pub fn held_out_estimate(
    field: &dyn VelocityField,
    source: &GridDensity,
    target: &GridDensity,
    samples: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<HeldOutEstimate> {
    if samples.is_empty() {
        return Err(FlowError::argument("no held-out samples"));
    }
    let target = GridLogDensity::new(target.clone());
    let terms: Vec<(f64, f64, bool)> = samples
        .par_iter()
        .map(|x| {
            let s = integrate_augmented(field, x, cfg)?;
            let ld = target.log_density(&s.x);
            let log_source = source.eval(x)?.ln();
            Ok((log_source - s.l - ld.value, s.r, ld.outside))
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    Ok(HeldOutEstimate {
        kl: terms.iter().map(|t| t.0).sum::<f64>() / n,
        regularizer: terms.iter().map(|t| t.1).sum::<f64>() / n,
        outside_fraction: terms.iter().filter(|t| t.2).count() as f64 / n,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains `init` by minibatch gradient descent on the regularized objective.
/// Runs are deterministic for a fixed `cfg.seed`.
pub fn train(
    source: &GridDensity,
    target: &GridDensity,
    init: ResNetField,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if source.dim() != target.dim() || source.dim() != init.dim() {
        return Err(FlowError::argument(format!(
            "dimension mismatch: source {}-d, target {}-d, field {}-d",
            source.dim(),
            target.dim(),
            init.dim()
        )));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let held_out = source.sample(&mut rng, cfg.kl_samples);
    let dataset = match cfg.direction {
        Direction::SamplesToSource => source.sample(&mut rng, cfg.dataset_size),
        Direction::SourceToTarget => Vec::new(),
    };
    let scored = match cfg.direction {
        Direction::SamplesToSource => GridLogDensity::new(target.clone()),
        Direction::SourceToTarget => GridLogDensity::unnormalized(target.clone()),
    }
    .with_boundary_scale(cfg.boundary_scale);

    let arch = init.architecture();
    let mut params = init.to_flat();
    let mut field = init;
    let mut adam = Adam::new(params.len());
    let mut history = Vec::new();
    let mut aborted = None;
    let mut leaked = 0usize;

    for iter in 0..cfg.max_iters {
        let batch: Vec<Vec<f64>> = match cfg.direction {
            Direction::SamplesToSource => (0..cfg.batch_size)
                .map(|_| dataset[rng.gen_range(0..dataset.len())].clone())
                .collect(),
            Direction::SourceToTarget => source.sample(&mut rng, cfg.batch_size),
        };
        let (loss, grad) = match loss_gradient(&field, &batch, &scored, cfg.lambda, &cfg.integrator) {
            Ok(v) if grad_is_finite(&v.1) => v,
            Ok(_) | Err(FlowError::Numeric(_)) => {
                let msg = format!("objective diverged at iteration {iter}");
                warn!("{msg}; keeping the last finite weights");
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e.context(format!("iteration {iter}"))),
        };
        leaked += loss.outside;

        let last = iter + 1 == cfg.max_iters;
        if iter % cfg.report_every == 0 || last {
            let est = held_out_estimate(&field, source, target, &held_out, &cfg.integrator)
                .map_err(|e| e.context(format!("iteration {iter}")))?;
            if leaked > 0 {
                warn!("{leaked} training endpoints left the cube since the last report");
                leaked = 0;
            }
            info!(
                "iter {iter}: loss {:.5} kl {:.5} reg {:.3e}",
                loss.loss, est.kl, est.regularizer
            );
            history.push(TrainRecord {
                iter,
                erm_loss: loss.loss,
                kl_est: est.kl,
                reg_est: est.regularizer,
                outside_fraction: est.outside_fraction,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
        } else {
            debug!("iter {iter}: loss {:.5}", loss.loss);
        }

        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= cfg.learning_rate * g;
                }
            }
            OptimizerKind::Adam => adam.step(&mut params, &grad, cfg.learning_rate),
        }
        match ResNetField::from_flat(arch, &params) {
            Ok(next) => field = next,
            Err(_) => {
                let msg = format!("weights became non-finite at iteration {iter}");
                warn!("{msg}; keeping the last finite weights");
                aborted = Some(msg);
                break;
            }
        }
        // The report row for the final iteration describes the weights
        // before the last update; refresh it with the returned weights.
        if last {
            let est = held_out_estimate(&field, source, target, &held_out, &cfg.integrator)?;
            let row = history.last_mut().expect("final row recorded");
            row.kl_est = est.kl;
            row.reg_est = est.regularizer;
            row.outside_fraction = est.outside_fraction;
            row.wallclock_ms = started.elapsed().as_millis() as u64;
        }
    }
    Ok(TrainReport {
        history,
        field,
        aborted,
    })
}

fn grad_is_finite(g: &[f64]) -> bool {
    g.iter().all(|v| v.is_finite())
}

/// Average kinetic energy `E_π[∫_0^1 |∂_t X(x, t)|² dt]`, with the
/// expectation taken by the tensor trapezoid rule on the source grid.
pub fn kinetic_energy(
    field: &dyn VelocityField,
    source: &GridDensity,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    if field.dim() != source.dim() {
        return Err(FlowError::argument("field and source dimensions differ"));
    }
    let nodes = source.quadrature();
    let terms: Vec<f64> = nodes
        .par_iter()
        .map(|(x, w)| {
            let weight = w * source.eval(x)?;
            Ok(weight * kinetic_action(field, x, cfg)?)
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// Variance over the RK4 knots of the velocity seen along the trajectory
/// from `x0` (summed over coordinates). Zero for constant-speed straight
/// lines.
pub fn velocity_variance(field: &dyn VelocityField, x0: &[f64], cfg: &IntegratorConfig) -> Result<f64> {
    let knots = trajectory(field, x0, cfg)?;
    let vels: Vec<Vec<f64>> = knots
        .iter()
        .map(|(t, s)| field.velocity(&s.x, *t))
        .collect::<Result<_>>()?;
    let n = vels.len() as f64;
    let d = field.dim();
    let mut total = 0.0;
    for i in 0..d {
        let mean = vels.iter().map(|v| v[i]).sum::<f64>() / n;
        total += vels.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total)
}
