use nalgebra::DMatrix;

use super::VelocityField;
use crate::density::DOMAIN_SLACK;
use crate::error::{FlowError, Result};
use crate::transport::{check_interior, TriangularMap, FD_STEP};

/// Velocity field whose flow is the displacement interpolation of a map:
/// `f(T_t(x), t) = T(x) − x`.
///
/// Evaluation inverts `x ↦ T_t(x)` one coordinate at a time. Each component
/// `x_k ↦ (1 − t)x_k + t T_k(x_{[k]})` is increasing with fixed endpoints 0
/// and 1, so a bisection bracket always contains the root; Newton steps are
/// taken inside it when they stay in the bracket.
#[derive(Debug, Clone)]
pub struct StraightLineField {
    map: TriangularMap,
    tolerance: f64,
}

impl StraightLineField {
    pub const DEFAULT_TOLERANCE: f64 = 1e-10;

    pub fn new(map: TriangularMap) -> Self {
        Self {
            map,
            tolerance: Self::DEFAULT_TOLERANCE,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn map(&self) -> &TriangularMap {
        &self.map
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Solves `T_t(x) = y` and returns `(x, T(x))`.
    pub fn preimage(&self, y: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.map.dim();
        if y.len() != d {
            return Err(FlowError::argument(format!(
                "point has {} coordinates, field is {d}-d",
                y.len()
            )));
        }
        if !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&t) {
            return Err(FlowError::domain(format!("time {t} outside [0, 1]")));
        }
        let t = t.clamp(0.0, 1.0);
        let mut x = Vec::with_capacity(d);
        let mut image = Vec::with_capacity(d);
        for (k, &yk) in y.iter().enumerate() {
            if !yk.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&yk) {
                return Err(FlowError::domain(format!(
                    "coordinate {k} = {yk} lies outside the unit cube"
                )));
            }
            let yk = yk.clamp(0.0, 1.0);
            let slices = self.map.component_slices(k, &x, &image)?;
            let g = |xk: f64| (1.0 - t) * xk + t * slices.eval(xk);
            let slope = |xk: f64| (1.0 - t) + t * slices.slope(xk);
            // Newton steps safeguarded by a shrinking bisection bracket.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let mut xk = yk;
            let mut converged = false;
            for _ in 0..200 {
                let r = g(xk) - yk;
                if r < 0.0 {
                    lo = xk;
                } else {
                    hi = xk;
                }
                let mut next = xk - r / slope(xk);
                if !(next > lo && next < hi) {
                    next = 0.5 * (lo + hi);
                }
                let step = (next - xk).abs();
                xk = next;
                if step <= 0.1 * self.tolerance || hi - lo <= self.tolerance {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(FlowError::numeric(format!(
                    "straight-line inversion did not converge at coordinate {k}"
                )));
            }
            image.push(slices.eval(xk));
            x.push(xk);
        }
        Ok((x, image))
    }

    /// Central-difference `∇_y f(y, t)`; errors within `2h` of the boundary.
    pub fn space_jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = self.map.dim();
        check_interior(y, 2.0 * FD_STEP)?;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let (mut yp, mut ym) = (y.to_vec(), y.to_vec());
            yp[j] += FD_STEP;
            ym[j] -= FD_STEP;
            let fp = self.velocity(&yp, t)?;
            let fm = self.velocity(&ym, t)?;
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
            }
        }
        Ok(jac)
    }

    /// `∂_t f(y, t)`, one-sided (second order) at the ends of `[0, 1]`.
    pub fn time_derivative(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        let h = FD_STEP;
        let combine = |terms: &[(f64, f64)]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; y.len()];
            for &(w, s) in terms {
                for (o, v) in out.iter_mut().zip(self.velocity(y, s)?) {
                    *o += w * v;
                }
            }
            Ok(out.into_iter().map(|v| v / (2.0 * h)).collect())
        };
        if t < h {
            combine(&[(-3.0, t), (4.0, t + h), (-1.0, t + 2.0 * h)])
        } else if t > 1.0 - h {
            combine(&[(3.0, t), (-4.0, t - h), (1.0, t - 2.0 * h)])
        } else {
            combine(&[(1.0, t + h), (-1.0, t - h)])
        }
    }
}

impl VelocityField for StraightLineField {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        let (x, image) = self.preimage(y, t)?;
        Ok(image.iter().zip(&x).map(|(ti, xi)| ti - xi).collect())
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = self.map.dim();
        let space = self.space_jacobian(y, t)?;
        let dt = self.time_derivative(y, t)?;
        let mut jac = DMatrix::zeros(d, d + 1);
        jac.columns_mut(0, d).copy_from(&space);
        for i in 0..d {
            jac[(i, d)] = dt[i];
        }
        Ok(jac)
    }
}

/// Time reparametrization `s(t)` of a straight-line flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Linear,
    Square,
    Cube,
    /// `sin(πt/2)`
    QuarterSine,
}

impl Schedule {
    pub fn value(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Square => t * t,
            Schedule::Cube => t * t * t,
            Schedule::QuarterSine => (0.5 * std::f64::consts::PI * t).sin(),
        }
    }

    pub fn rate(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Square => 2.0 * t,
            Schedule::Cube => 3.0 * t * t,
            Schedule::QuarterSine => {
                0.5 * std::f64::consts::PI * (0.5 * std::f64::consts::PI * t).cos()
            }
        }
    }

    pub fn curvature(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 0.0,
            Schedule::Square => 2.0,
            Schedule::Cube => 6.0 * t,
            Schedule::QuarterSine => {
                let w = 0.5 * std::f64::consts::PI;
                -w * w * (w * t).sin()
            }
        }
    }
}

/// `f̃(y, t) = s'(t) f(y, s(t))`: realizes the same map as the straight-line
/// field, along the same lines, at a non-constant speed.
#[derive(Debug, Clone)]
pub struct TimeReparamField {
    base: StraightLineField,
    schedule: Schedule,
}

impl TimeReparamField {
    pub fn new(base: StraightLineField, schedule: Schedule) -> Self {
        Self { base, schedule }
    }
}

impl VelocityField for TimeReparamField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        let rate = self.schedule.rate(t);
        let s = self.schedule.value(t.clamp(0.0, 1.0));
        Ok(self.base.velocity(y, s)?.into_iter().map(|v| rate * v).collect())
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let s = self.schedule.value(t.clamp(0.0, 1.0));
        let rate = self.schedule.rate(t);
        let curv = self.schedule.curvature(t);
        let base_jac = self.base.jacobian(y, s)?;
        let f = self.base.velocity(y, s)?;
        let mut jac = base_jac.clone() * rate;
        for i in 0..d {
            jac[(i, d)] = curv * f[i] + rate * rate * base_jac[(i, d)];
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{AnalyticDensity, GridDensity};
    use crate::transport::kr_construct;
    use crate::velocity::acceleration;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn sine_field() -> StraightLineField {
        StraightLineField::new(
            kr_construct(
                GridDensity::from_analytic(&AnalyticDensity::sine(0.5), 256).unwrap(),
                GridDensity::uniform(1, 256).unwrap(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn identity_map_has_zero_velocity() {
        let f = StraightLineField::new(
            kr_construct(
                GridDensity::uniform(2, 16).unwrap(),
                GridDensity::uniform(2, 16).unwrap(),
            )
            .unwrap(),
        );
        for (y, t) in [([0.3, 0.6], 0.0), ([0.9, 0.1], 0.7)] {
            for v in f.velocity(&y, t).unwrap() {
                assert!(v.abs() < 1e-9);
            }
        }
        let j = f.space_jacobian(&[0.4, 0.5], 0.3).unwrap();
        assert!(j.abs().max() < 1e-4);
    }

    #[test]
    fn velocity_is_constant_along_lines() {
        let f = sine_field();
        let expected = 1.0 / (2.0 * PI);
        assert_abs_diff_eq!(f.velocity(&[0.5], 0.0).unwrap()[0], expected, epsilon = 1e-4);
        let map = f.map();
        let v0 = f.velocity(&[0.5], 0.0).unwrap()[0];
        for t in [0.25, 0.5, 0.9, 1.0] {
            let y = map.displacement_interpolation(&[0.5], t).unwrap();
            assert_abs_diff_eq!(f.velocity(&y, t).unwrap()[0], v0, epsilon = 1e-6);
        }
    }

    #[test]
    fn straight_lines_have_zero_acceleration() {
        let f = sine_field();
        let a = acceleration(&f, &[0.5], 0.3).unwrap();
        assert!(a[0].abs() < 1e-4, "{a:?}");
        let reparam = TimeReparamField::new(f.clone(), Schedule::Square);
        let y = f.map().displacement_interpolation(&[0.5], 0.25).unwrap();
        let a = acceleration(&reparam, &y, 0.5).unwrap();
        // s'' = 2, so the acceleration is 2 (T(x) - x).
        assert_abs_diff_eq!(a[0], 2.0 / (2.0 * PI), epsilon = 1e-3);
    }

    #[test]
    fn rejects_points_outside_the_cube() {
        let f = sine_field();
        assert!(matches!(f.velocity(&[1.5], 0.5), Err(FlowError::Domain(_))));
        assert!(matches!(f.velocity(&[0.5], 1.5), Err(FlowError::Domain(_))));
        assert!(matches!(f.space_jacobian(&[1e-7], 0.5), Err(FlowError::Domain(_))));
    }

    #[test]
    fn schedules_are_consistent() {
        for s in [Schedule::Linear, Schedule::Square, Schedule::Cube, Schedule::QuarterSine] {
            assert_abs_diff_eq!(s.value(0.0), 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(s.value(1.0), 1.0, epsilon = 1e-15);
            let h = 1e-6;
            let t = 0.37;
            assert_abs_diff_eq!(s.rate(t), (s.value(t + h) - s.value(t - h)) / (2.0 * h), epsilon = 1e-7);
            assert_abs_diff_eq!(s.curvature(t), (s.rate(t + h) - s.rate(t - h)) / (2.0 * h), epsilon = 1e-6);
        }
    }
}
