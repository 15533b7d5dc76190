use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::density::SCHEMA_VERSION;
use crate::error::{FlowError, Result};

/// Half-width of the uniform distribution used by [`ResNetField::init`].
pub const INIT_SCALE: f64 = 0.5;

/// Scalar nonlinearity applied elementwise inside the residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// `max(0, x)` with the convention `σ'(0) = 0`.
    Relu,
    Identity,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn prime(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn second(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu | Activation::Identity => 0.0,
        }
    }
}

/// Residual network velocity field on space-time inputs `s = (y, t)`:
///
/// ```text
/// u_0 = σ(K_0 s + b_0)
/// u_i = u_{i-1} + h σ(K_i u_{i-1} + b_i),   i = 1..M
/// f   = A u_M + c
/// ```
///
/// optionally followed by the boundary mask `f_k ← 4 y_k (1 − y_k) f_k`.
///
/// The linear head `(A, c)` maps the width-`W` state back to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNetField {
    dim: usize,
    width: usize,
    step: f64,
    activation: Activation,
    boundary_mask: bool,
    /// `K_0` is `W × (d+1)`, the rest `W × W`.
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    head_weight: DMatrix<f64>,
    head_bias: DVector<f64>,
}

/// Shape of a residual network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: usize,
    pub width: usize,
    /// Number of residual blocks `M` after the opening layer.
    pub layers: usize,
    pub step: f64,
    #[serde(default)]
    pub activation: Activation,
    /// Multiply component `k` of the output by `4 y_k (1 − y_k)`, so the
    /// field is tangent to the faces of the cube and flows never leave it.
    #[serde(default)]
    pub boundary_mask: bool,
}

/// `4 y (1 − y)` and its derivative.
pub fn mask(y: f64) -> (f64, f64) {
    (4.0 * y * (1.0 - y), 4.0 - 8.0 * y)
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 {
            return Err(FlowError::argument("network needs dim >= 1 and width >= 1"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(FlowError::argument(format!(
                "residual step must be positive, got {}",
                self.step
            )));
        }
        Ok(())
    }

    /// Shapes of the parameter blocks in flattening order
    /// `K_0, b_0, .., K_M, b_M, A, c`.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.width, self.dim + 1), (self.width, 1)];
        for _ in 0..self.layers {
            shapes.push((self.width, self.width));
            shapes.push((self.width, 1));
        }
        shapes.push((self.dim, self.width));
        shapes.push((self.dim, 1));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

impl ResNetField {
    /// Network whose parameters are all zero (so `f ≡ 0`).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let blocks = arch
            .block_shapes()
            .into_iter()
            .map(|(r, c)| DMatrix::zeros(r, c))
            .collect();
        Self::from_blocks(arch, blocks)
    }

    /// Training initialization: every parameter uniform in `[−0.5, 0.5]`.
    /// Much smaller weights leave the hidden units in their linear regime,
    /// where a masked field cannot bend enough to fit non-affine maps.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        Self::random(arch, INIT_SCALE, rng)
    }

    /// Parameters uniform in `[−scale, scale]`.
    pub fn random<R: Rng + ?Sized>(arch: Architecture, scale: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let blocks = arch
            .block_shapes()
            .into_iter()
            .map(|(r, c)| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..=scale)))
            .collect();
        Self::from_blocks(arch, blocks)
    }

    /// Builds a network from parameter blocks in flattening order.
    pub fn from_blocks(arch: Architecture, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.block_shapes();
        if blocks.len() != shapes.len() {
            return Err(FlowError::argument(format!(
                "expected {} parameter blocks, got {}",
                shapes.len(),
                blocks.len()
            )));
        }
        for (i, (b, &(r, c))) in blocks.iter().zip(&shapes).enumerate() {
            if b.shape() != (r, c) {
                return Err(FlowError::argument(format!(
                    "parameter block {i} has shape {:?}, expected {:?}",
                    b.shape(),
                    (r, c)
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::numeric(format!("parameter block {i} is not finite")));
            }
        }
        let mut it = blocks.into_iter();
        let mut weights = Vec::with_capacity(arch.layers + 1);
        let mut biases = Vec::with_capacity(arch.layers + 1);
        for _ in 0..=arch.layers {
            weights.push(it.next().unwrap());
            biases.push(DVector::from_column_slice(it.next().unwrap().as_slice()));
        }
        let head_weight = it.next().unwrap();
        let head_bias = DVector::from_column_slice(it.next().unwrap().as_slice());
        Ok(Self {
            dim: arch.dim,
            width: arch.width,
            step: arch.step,
            activation: arch.activation,
            boundary_mask: arch.boundary_mask,
            weights,
            biases,
            head_weight,
            head_bias,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dim: self.dim,
            width: self.width,
            layers: self.weights.len() - 1,
            step: self.step,
            activation: self.activation,
            boundary_mask: self.boundary_mask,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Parameter blocks in flattening order `K_0, b_0, .., K_M, b_M, A, c`.
    pub fn blocks(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(2 * self.weights.len() + 2);
        for (k, b) in self.weights.iter().zip(&self.biases) {
            out.push(k.clone());
            out.push(DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
        }
        out.push(self.head_weight.clone());
        out.push(DMatrix::from_column_slice(self.dim, 1, self.head_bias.as_slice()));
        out
    }

    /// All parameters as one vector (blocks concatenated, column-major within
    /// each block).
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.as_slice().to_vec())
            .collect()
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(FlowError::argument(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let blocks = arch
            .block_shapes()
            .into_iter()
            .map(|(r, c)| {
                let b = DMatrix::from_column_slice(r, c, &flat[offset..offset + r * c]);
                offset += r * c;
                b
            })
            .collect();
        Self::from_blocks(arch, blocks)
    }

    fn input(&self, y: &[f64], t: f64) -> Result<DVector<f64>> {
        if y.len() != self.dim {
            return Err(FlowError::argument(format!(
                "point has {} coordinates, field is {}-d",
                y.len(),
                self.dim
            )));
        }
        let mut s = DVector::zeros(self.dim + 1);
        s.rows_mut(0, self.dim).copy_from_slice(y);
        s[self.dim] = t;
        Ok(s)
    }

    /// Forward pass returning the final hidden state together with its
    /// Jacobian with respect to `s = (y, t)` when requested.
    fn forward(&self, s: &DVector<f64>, with_jacobian: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let act = self.activation;
        let z = &self.weights[0] * s + &self.biases[0];
        let mut u = z.map(|v| act.eval(v));
        let mut jac = with_jacobian.then(|| {
            let mut j = self.weights[0].clone();
            for (mut row, zi) in j.row_iter_mut().zip(z.iter()) {
                row *= act.prime(*zi);
            }
            j
        });
        for (k, b) in self.weights.iter().zip(&self.biases).skip(1) {
            let z = k * &u + b;
            if let Some(j) = jac.as_mut() {
                let mut kj = k * &*j;
                for (mut row, zi) in kj.row_iter_mut().zip(z.iter()) {
                    row *= self.step * act.prime(*zi);
                }
                *j += kj;
            }
            u += z.map(|v| self.step * act.eval(v));
        }
        (u, jac)
    }

    pub fn to_file(&self) -> ResNetFile {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        ResNetFile {
            schema: SCHEMA_VERSION,
            dim: self.dim,
            width: self.width,
            layers: self.weights.len() - 1,
            step: self.step,
            activation: self.activation,
            boundary_mask: self.boundary_mask,
            k: self.weights.iter().map(rows).collect(),
            b: self.biases.iter().map(|b| b.as_slice().to_vec()).collect(),
            head_k: rows(&self.head_weight),
            head_b: self.head_bias.as_slice().to_vec(),
        }
    }
}

impl VelocityField for ResNetField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        let s = self.input(y, t)?;
        let (u, _) = self.forward(&s, false);
        let mut f = &self.head_weight * u + &self.head_bias;
        if self.boundary_mask {
            for (fk, yk) in f.iter_mut().zip(y) {
                *fk *= mask(*yk).0;
            }
        }
        Ok(f.as_slice().to_vec())
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let s = self.input(y, t)?;
        let (u, jac) = self.forward(&s, true);
        let mut jac = &self.head_weight * jac.expect("requested");
        if self.boundary_mask {
            // ∂(m_k N_k)/∂y_j = m_k ∂N_k/∂y_j + δ_kj m_k' N_k
            let f = &self.head_weight * u + &self.head_bias;
            for k in 0..self.dim {
                let (m, dm) = mask(y[k]);
                jac.row_mut(k).scale_mut(m);
                jac[(k, k)] += dm * f[k];
            }
        }
        Ok(jac)
    }
}

/// On-disk network weights; matrices are stored as lists of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResNetFile {
    #[serde(default = "schema_version")]
    pub schema: u32,
    pub dim: usize,
    pub width: usize,
    pub layers: usize,
    pub step: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub boundary_mask: bool,
    #[serde(rename = "K")]
    pub k: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "head_K")]
    pub head_k: Vec<Vec<f64>>,
    pub head_b: Vec<f64>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl ResNetFile {
    pub fn build(&self) -> Result<ResNetField> {
        if self.schema != SCHEMA_VERSION {
            return Err(FlowError::argument(format!(
                "unsupported weights schema {}",
                self.schema
            )));
        }
        let arch = Architecture {
            dim: self.dim,
            width: self.width,
            layers: self.layers,
            step: self.step,
            activation: self.activation,
            boundary_mask: self.boundary_mask,
        };
        if self.k.len() != self.layers + 1 || self.b.len() != self.layers + 1 {
            return Err(FlowError::argument(format!(
                "expected {} weight matrices and biases, got {} and {}",
                self.layers + 1,
                self.k.len(),
                self.b.len()
            )));
        }
        let matrix = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>> {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(FlowError::argument("ragged weight matrix"));
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        };
        let column = |v: &[f64]| DMatrix::from_column_slice(v.len(), 1, v);
        let mut blocks = Vec::new();
        for (k, b) in self.k.iter().zip(&self.b) {
            blocks.push(matrix(k)?);
            blocks.push(column(b));
        }
        blocks.push(matrix(&self.head_k)?);
        blocks.push(column(&self.head_b));
        ResNetField::from_blocks(arch, blocks)
    }
}
