//! Fixed-step RK4 integration of `dX/dt = f(X, t)` together with the
//! log-determinant and acceleration-regularizer accumulators.
//!
//! The augmented system is
//!
//! ```text
//! dX/dt = f(X, t)
//! dl/dt = tr ∇_X f(X, t)
//! dr/dt = |∇_X f(X, t) f(X, t) + ∂_t f(X, t)|²
//! ```
//!
//! so that `exp(l(1)) = det ∇_x X(x, 1)` and `r(1)` is the integrated squared
//! Lagrangian acceleration. `l` and `r` do not feed back into `X`; they are
//! advanced with the same RK4 weights from the stage values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::velocity::{acceleration_from, divergence_from, VelocityField};

/// Fixed-step fourth-order Runge–Kutta settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Number of RK4 steps over `[0, 1]`.
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { steps: 40 }
    }
}

impl IntegratorConfig {
    pub const MIN_STEPS: usize = 4;

    pub fn new(steps: usize) -> Result<Self> {
        let cfg = Self { steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < Self::MIN_STEPS {
            return Err(FlowError::argument(format!(
                "integrator needs at least {} steps, got {}",
                Self::MIN_STEPS,
                self.steps
            )));
        }
        Ok(())
    }
}

/// Position, log-determinant and regularizer carried along one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    /// `log det ∇_x X(x, t)`.
    pub l: f64,
    /// `∫_0^t |∇_X f·f + ∂_t f|² ds`.
    pub r: f64,
}

impl AugmentedState {
    pub fn start(x0: &[f64]) -> Self {
        Self {
            x: x0.to_vec(),
            l: 0.0,
            r: 0.0,
        }
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::numeric(format!("trajectory became non-finite at t = {t}")))
    }
}

fn check_inputs(field: &dyn VelocityField, x0: &[f64], cfg: &IntegratorConfig) -> Result<()> {
    cfg.validate()?;
    if x0.len() != field.dim() {
        return Err(FlowError::argument(format!(
            "initial point has {} coordinates, field is {}-d",
            x0.len(),
            field.dim()
        )));
    }
    Ok(())
}

/// One classical RK4 step of the plain flow.
fn rk4_step(field: &dyn VelocityField, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    let k1 = field.velocity(x, t)?;
    let k2 = field.velocity(&axpy(x, 0.5 * dt, &k1), t + 0.5 * dt)?;
    let k3 = field.velocity(&axpy(x, 0.5 * dt, &k2), t + 0.5 * dt)?;
    let k4 = field.velocity(&axpy(x, dt, &k3), t + dt)?;
    Ok((0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Stage derivative of the augmented system: `(f, tr ∇f, |a|²)`.
fn augmented_rhs(field: &dyn VelocityField, x: &[f64], t: f64) -> Result<(Vec<f64>, f64, f64)> {
    let f = field.velocity(x, t)?;
    let jac = field.jacobian(x, t)?;
    let acc = acceleration_from(&f, &jac);
    let div = divergence_from(&jac);
    Ok((f, div, acc.iter().map(|a| a * a).sum()))
}

fn augmented_step(
    field: &dyn VelocityField,
    s: &AugmentedState,
    t: f64,
    dt: f64,
) -> Result<AugmentedState> {
    let (k1, l1, r1) = augmented_rhs(field, &s.x, t)?;
    let (k2, l2, r2) = augmented_rhs(field, &axpy(&s.x, 0.5 * dt, &k1), t + 0.5 * dt)?;
    let (k3, l3, r3) = augmented_rhs(field, &axpy(&s.x, 0.5 * dt, &k2), t + 0.5 * dt)?;
    let (k4, l4, r4) = augmented_rhs(field, &axpy(&s.x, dt, &k3), t + dt)?;
    let x = (0..s.x.len())
        .map(|i| s.x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    Ok(AugmentedState {
        x,
        l: s.l + dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4),
        r: s.r + dt.abs() / 6.0 * (r1 + 2.0 * r2 + 2.0 * r3 + r4),
    })
}

fn with_context<T>(res: Result<T>, x0: &[f64], t: f64) -> Result<T> {
    res.map_err(|e| e.context(format!("trajectory from {x0:?} at t = {t:.6}")))
}

/// `X(x0, t_end)`, using `cfg.steps` equal steps over `[0, t_end]`.
pub fn integrate_flow(
    field: &dyn VelocityField,
    x0: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    check_inputs(field, x0, cfg)?;
    if !(0.0..=1.0).contains(&t_end) {
        return Err(FlowError::domain(format!("end time {t_end} outside [0, 1]")));
    }
    let dt = t_end / cfg.steps as f64;
    let mut x = x0.to_vec();
    for n in 0..cfg.steps {
        let t = n as f64 * dt;
        x = with_context(rk4_step(field, &x, t, dt), x0, t)?;
        check_finite(&x, t + dt).map_err(|e| e.context(format!("trajectory from {x0:?}")))?;
    }
    Ok(x)
}

/// Solves the flow backward from `y` at `t = 1` to `t = 0`: the preimage of
/// `y` under the time-one map.
pub fn integrate_backward(
    field: &dyn VelocityField,
    y: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    check_inputs(field, y, cfg)?;
    let dt = -1.0 / cfg.steps as f64;
    let mut x = y.to_vec();
    for n in 0..cfg.steps {
        let t = 1.0 + n as f64 * dt;
        x = with_context(rk4_step(field, &x, t, dt), y, t)?;
        check_finite(&x, t + dt).map_err(|e| e.context(format!("backward trajectory from {y:?}")))?;
    }
    Ok(x)
}

/// Augmented state at `t = 1`.
pub fn integrate_augmented(
    field: &dyn VelocityField,
    x0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<AugmentedState> {
    Ok(trajectory(field, x0, cfg)?.pop().expect("at least one knot").1)
}

/// Augmented states at every RK4 knot `t_n = n/N`, including `t = 0`.
pub fn trajectory(
    field: &dyn VelocityField,
    x0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<(f64, AugmentedState)>> {
    check_inputs(field, x0, cfg)?;
    let dt = 1.0 / cfg.steps as f64;
    let mut out = Vec::with_capacity(cfg.steps + 1);
    let mut state = AugmentedState::start(x0);
    out.push((0.0, state.clone()));
    for n in 0..cfg.steps {
        let t = n as f64 * dt;
        state = with_context(augmented_step(field, &state, t, dt), x0, t)?;
        check_finite(&state.x, t + dt)?;
        if !(state.l.is_finite() && state.r.is_finite()) {
            return Err(FlowError::numeric(format!(
                "log-determinant or regularizer diverged on trajectory from {x0:?}"
            )));
        }
        out.push(((n + 1) as f64 * dt, state.clone()));
    }
    Ok(out)
}

/// Integrates backward from `y` at `t = 1` and returns the starting point
/// `x0` together with `∫_0^1 tr ∇f(X(x0, t), t) dt` along its trajectory, so
/// that the pushforward density is `η(y) = π(x0)·exp(−∫ tr ∇f)`.
pub fn integrate_backward_with_divergence(
    field: &dyn VelocityField,
    y: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, f64)> {
    check_inputs(field, y, cfg)?;
    let dt = -1.0 / cfg.steps as f64;
    let mut state = AugmentedState::start(y);
    for n in 0..cfg.steps {
        let t = 1.0 + n as f64 * dt;
        state = with_context(augmented_step(field, &state, t, dt), y, t)?;
        check_finite(&state.x, t + dt)?;
    }
    // Backward steps accumulate ∫_1^0, i.e. minus the forward integral.
    Ok((state.x, -state.l))
}

/// `∫_0^1 |f(X(x0, t), t)|² dt` along the RK4 trajectory, accumulated from
/// the stage velocities with the RK4 weights.
pub fn kinetic_action(field: &dyn VelocityField, x0: &[f64], cfg: &IntegratorConfig) -> Result<f64> {
    check_inputs(field, x0, cfg)?;
    let dt = 1.0 / cfg.steps as f64;
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let mut x = x0.to_vec();
    let mut action = 0.0;
    for n in 0..cfg.steps {
        let t = n as f64 * dt;
        let stage = |x: &[f64], t: f64| with_context(field.velocity(x, t), x0, t);
        let k1 = stage(&x, t)?;
        let k2 = stage(&axpy(&x, 0.5 * dt, &k1), t + 0.5 * dt)?;
        let k3 = stage(&axpy(&x, 0.5 * dt, &k2), t + 0.5 * dt)?;
        let k4 = stage(&axpy(&x, dt, &k3), t + dt)?;
        action += dt / 6.0 * (sq(&k1) + 2.0 * sq(&k2) + 2.0 * sq(&k3) + sq(&k4));
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&x, t + dt)?;
    }
    Ok(action)
}

/// Runs `integrate_flow` to `t = 1` for every point, in parallel.
pub fn push_forward(
    field: &dyn VelocityField,
    points: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>> {
    points
        .par_iter()
        .map(|x| integrate_flow(field, x, 1.0, cfg))
        .collect()
}

/// Runs `integrate_augmented` for every point, in parallel.
pub fn push_forward_augmented(
    field: &dyn VelocityField,
    points: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<Vec<AugmentedState>> {
    points
        .par_iter()
        .map(|x| integrate_augmented(field, x, cfg))
        .collect()
}
