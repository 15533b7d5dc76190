//! Velocity fields `f(y, t)` on space-time: the analytic straight-line field
//! induced by a transport map and a trainable residual network.

mod fields;
mod resnet;
mod straight;

pub use fields::{Bump, ConstantField, PerturbedField, ZeroField};
pub use resnet::{Activation, Architecture, ResNetField, ResNetFile};
pub use straight::{Schedule, StraightLineField, TimeReparamField};

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

/// A velocity field on `R^d × [0, 1]`.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>>;

    /// The `d × (d+1)` Jacobian `[∇_y f | ∂_t f]`.
    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).velocity(y, t)
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        (**self).jacobian(y, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).velocity(y, t)
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        (**self).jacobian(y, t)
    }
}

/// Lagrangian acceleration `∇_y f · f + ∂_t f` from a velocity and its
/// space-time Jacobian.
pub fn acceleration_from(f: &[f64], jac: &DMatrix<f64>) -> Vec<f64> {
    let d = f.len();
    (0..d)
        .map(|i| (0..d).map(|j| jac[(i, j)] * f[j]).sum::<f64>() + jac[(i, d)])
        .collect()
}

pub fn acceleration(field: &dyn VelocityField, y: &[f64], t: f64) -> Result<Vec<f64>> {
    let f = field.velocity(y, t)?;
    let jac = field.jacobian(y, t)?;
    Ok(acceleration_from(&f, &jac))
}

/// `tr ∇_y f`.
pub fn divergence_from(jac: &DMatrix<f64>) -> f64 {
    (0..jac.nrows()).map(|i| jac[(i, i)]).sum()
}

/// Spatial block `∇_y f` of a space-time Jacobian.
pub fn spatial_block(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let d = jac.nrows();
    jac.columns(0, d).into_owned()
}

/// Largest singular value of `∇_y f(y, t)`.
pub fn spatial_lipschitz_at(field: &dyn VelocityField, y: &[f64], t: f64) -> Result<f64> {
    let block = spatial_block(&field.jacobian(y, t)?);
    Ok(block.singular_values().max())
}

/// Central finite-difference space-time Jacobian of any field, used as an
/// independent check on analytic Jacobians.
pub fn fd_jacobian(field: &dyn VelocityField, y: &[f64], t: f64, h: f64) -> Result<DMatrix<f64>> {
    let d = field.dim();
    let mut jac = DMatrix::zeros(d, d + 1);
    for j in 0..=d {
        let (mut yp, mut ym) = (y.to_vec(), y.to_vec());
        let (mut tp, mut tm) = (t, t);
        if j < d {
            yp[j] += h;
            ym[j] -= h;
        } else {
            tp += h;
            tm -= h;
        }
        let fp = DVector::from_vec(field.velocity(&yp, tp)?);
        let fm = DVector::from_vec(field.velocity(&ym, tm)?);
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}
