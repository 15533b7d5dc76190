use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;

use super::VelocityField;
use crate::error::{FlowError, Result};

fn check_len(y: &[f64], dim: usize) -> Result<()> {
    if y.len() != dim {
        return Err(FlowError::argument(format!(
            "point has {} coordinates, field is {dim}-d",
            y.len()
        )));
    }
    Ok(())
}

/// `f ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, y: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_len(y, self.dim)?;
        Ok(vec![0.0; self.dim])
    }

    fn jacobian(&self, y: &[f64], _t: f64) -> Result<DMatrix<f64>> {
        check_len(y, self.dim)?;
        Ok(DMatrix::zeros(self.dim, self.dim + 1))
    }
}

/// `f ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn velocity(&self, y: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_len(y, self.value.len())?;
        Ok(self.value.clone())
    }

    fn jacobian(&self, y: &[f64], _t: f64) -> Result<DMatrix<f64>> {
        let d = self.value.len();
        check_len(y, d)?;
        Ok(DMatrix::zeros(d, d + 1))
    }
}

/// Smooth perturbation vanishing on the boundary of the cube:
///
/// `b(y, t) = Π_k sin(π y_k) · cos(ω t + φ) · u`
///
/// with `u` a unit vector, so `|b| ≤ 1` everywhere.
#[derive(Debug, Clone)]
pub struct Bump {
    direction: Vec<f64>,
    frequency: f64,
    phase: f64,
}

impl Bump {
    pub fn new(direction: Vec<f64>, frequency: f64, phase: f64) -> Result<Self> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if direction.is_empty() || !(norm > 0.0 && norm.is_finite()) {
            return Err(FlowError::argument("bump direction must be a nonzero vector"));
        }
        Ok(Self {
            direction: direction.iter().map(|v| v / norm).collect(),
            frequency,
            phase,
        })
    }

    /// Random direction, frequency in `[0, 2π]` and phase in `[0, 2π)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let direction = loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-4 {
                break v;
            }
        };
        Self::new(direction, rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI))
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    fn profile(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let s: Vec<f64> = y.iter().map(|v| (PI * v).sin()).collect();
        let value = s.iter().product();
        let grad = (0..y.len())
            .map(|j| {
                PI * (PI * y[j]).cos()
                    * s.iter()
                        .enumerate()
                        .filter(|(k, _)| *k != j)
                        .map(|(_, v)| v)
                        .product::<f64>()
            })
            .collect();
        (value, grad)
    }
}

impl VelocityField for Bump {
    fn dim(&self) -> usize {
        self.direction.len()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len(y, self.dim())?;
        let (p, _) = self.profile(y);
        let c = (self.frequency * t + self.phase).cos();
        Ok(self.direction.iter().map(|u| p * c * u).collect())
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let d = self.dim();
        check_len(y, d)?;
        let (p, grad) = self.profile(y);
        let arg = self.frequency * t + self.phase;
        let (c, dc) = (arg.cos(), -self.frequency * arg.sin());
        Ok(DMatrix::from_fn(d, d + 1, |i, j| {
            if j < d {
                self.direction[i] * grad[j] * c
            } else {
                self.direction[i] * p * dc
            }
        }))
    }
}

/// `g = f + ε·b`.
#[derive(Debug, Clone)]
pub struct PerturbedField<F, B> {
    pub base: F,
    pub perturbation: B,
    pub epsilon: f64,
}

impl<F: VelocityField, B: VelocityField> PerturbedField<F, B> {
    pub fn new(base: F, perturbation: B, epsilon: f64) -> Result<Self> {
        if base.dim() != perturbation.dim() {
            return Err(FlowError::argument(format!(
                "cannot perturb a {}-d field by a {}-d field",
                base.dim(),
                perturbation.dim()
            )));
        }
        Ok(Self {
            base,
            perturbation,
            epsilon,
        })
    }
}

impl<F: VelocityField, B: VelocityField> VelocityField for PerturbedField<F, B> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut v = self.base.velocity(y, t)?;
        for (vi, bi) in v.iter_mut().zip(self.perturbation.velocity(y, t)?) {
            *vi += self.epsilon * bi;
        }
        Ok(v)
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        Ok(self.base.jacobian(y, t)? + self.perturbation.jacobian(y, t)? * self.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::fd_jacobian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bump_vanishes_on_boundary_and_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Bump::random(2, &mut rng).unwrap();
        for y in [[0.0, 0.4], [0.7, 1.0]] {
            assert!(b.velocity(&y, 0.3).unwrap().iter().all(|v| v.abs() < 1e-15));
        }
        for _ in 0..200 {
            let y = [rng.gen::<f64>(), rng.gen::<f64>()];
            let v = b.velocity(&y, rng.gen()).unwrap();
            assert!(v.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn bump_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Bump::random(3, &mut rng).unwrap();
        let y = [0.2, 0.55, 0.8];
        let diff = b.jacobian(&y, 0.4).unwrap() - fd_jacobian(&b, &y, 0.4, 1e-6).unwrap();
        assert!(diff.abs().max() < 1e-8);
    }

    #[test]
    fn perturbation_is_linear_in_epsilon() {
        let b = Bump::new(vec![1.0], 0.0, 0.0).unwrap();
        let g = PerturbedField::new(ConstantField { value: vec![0.2] }, b, 1e-2).unwrap();
        let v = g.velocity(&[0.5], 0.0).unwrap()[0];
        assert!((v - 0.21).abs() < 1e-15);
        assert!(PerturbedField::new(ZeroField { dim: 2 }, Bump::new(vec![1.0], 0.0, 0.0).unwrap(), 1.0).is_err());
    }
}
