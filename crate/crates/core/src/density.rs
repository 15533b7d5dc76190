//! Tabulated densities on the unit hypercube.
//!
//! A [`GridDensity`] stores strictly positive values on the tensor grid
//! `{0, h, 2h, .., 1}^d` with `h = 1/(m-1)` and is evaluated by multilinear
//! interpolation. All marginals, conditional CDFs and their inverses are exact
//! for that interpolant: integrating a multilinear function over trailing axes
//! is the trapezoid rule on its nodes, and the conditional CDF of a piecewise
//! linear slice is piecewise quadratic.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FlowError, Result};

/// Slack accepted on `[0, 1]` coordinates before raising a domain error.
pub const DOMAIN_SLACK: f64 = 1e-12;

/// Smallest admissible points-per-axis.
pub const MIN_RESOLUTION: usize = 8;

/// Checks that every coordinate lies in `[0, 1]` (up to [`DOMAIN_SLACK`]) and
/// returns the clamped copy.
pub fn check_unit_point(x: &[f64]) -> Result<Vec<f64>> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() || v < -DOMAIN_SLACK || v > 1.0 + DOMAIN_SLACK {
                Err(FlowError::domain(format!(
                    "coordinate {i} = {v} lies outside [0, 1]"
                )))
            } else {
                Ok(v.clamp(0.0, 1.0))
            }
        })
        .collect()
}

/// Strictly positive, normalized density tabulated on a uniform tensor grid.
#[derive(Debug, Clone)]
pub struct GridDensity {
    dim: usize,
    resolution: usize,
    values: Vec<f64>,
    normalizer: f64,
    lower_bound: f64,
    upper_bound: f64,
    /// `tables[k]` holds the marginal over the first `k + 1` axes.
    tables: Vec<MarginalTable>,
}

/// Marginal `f̂_k` on the `m^k` grid plus its cumulative integral along axis `k`.
#[derive(Debug, Clone)]
struct MarginalTable {
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl GridDensity {
    /// Builds a density from raw row-major values (last axis fastest). The
    /// values are rescaled so that the trapezoid integral is exactly one.
    pub fn new(dim: usize, resolution: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(FlowError::argument("density dimension must be at least 1"));
        }
        if resolution < MIN_RESOLUTION {
            return Err(FlowError::argument(format!(
                "resolution {resolution} below minimum {MIN_RESOLUTION}"
            )));
        }
        let expected = resolution
            .checked_pow(dim as u32)
            .ok_or_else(|| FlowError::argument("grid size overflows"))?;
        if values.len() != expected {
            return Err(FlowError::argument(format!(
                "expected {expected} values for a {dim}-d grid of resolution {resolution}, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v <= 0.0)
        {
            return Err(FlowError::argument(format!(
                "density value #{i} = {v} is not strictly positive"
            )));
        }

        let mut tables = Vec::with_capacity(dim);
        let mut current = values;
        let h = 1.0 / (resolution - 1) as f64;
        // Marginalize trailing axes one at a time: f̂_{k} from f̂_{k+1}.
        let mut raw_marginals = vec![current.clone()];
        for _ in 1..dim {
            let reduced: Vec<f64> = current
                .chunks_exact(resolution)
                .map(|row| trapezoid(row, h))
                .collect();
            raw_marginals.push(reduced.clone());
            current = reduced;
        }
        raw_marginals.reverse();
        let normalizer = trapezoid(&raw_marginals[0], h);
        if !(normalizer.is_finite() && normalizer > 0.0) {
            return Err(FlowError::numeric("density integral is not positive"));
        }
        for raw in raw_marginals {
            let values: Vec<f64> = raw.iter().map(|v| v / normalizer).collect();
            let cumulative = cumulative_trapezoid(&values, resolution, h);
            tables.push(MarginalTable { values, cumulative });
        }

        let full = &tables[dim - 1].values;
        let lower_bound = full.iter().copied().fold(f64::INFINITY, f64::min);
        let upper_bound = full.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            dim,
            resolution,
            values: full.clone(),
            normalizer,
            lower_bound,
            upper_bound,
            tables,
        })
    }

    /// Tabulates `f` at the grid nodes.
    pub fn from_fn(dim: usize, resolution: usize, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = resolution
            .checked_pow(dim as u32)
            .ok_or_else(|| FlowError::argument("grid size overflows"))?;
        let mut point = vec![0.0; dim];
        let values = (0..n)
            .map(|flat| {
                node_point(flat, dim, resolution, &mut point);
                f(&point)
            })
            .collect();
        Self::new(dim, resolution, values)
    }

    pub fn uniform(dim: usize, resolution: usize) -> Result<Self> {
        Self::from_fn(dim, resolution, |_| 1.0)
    }

    pub fn from_analytic(spec: &AnalyticDensity, resolution: usize) -> Result<Self> {
        spec.validate()?;
        Self::from_fn(spec.dim(), resolution, |x| spec.eval(x))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Normalized node values, row-major with the last axis fastest.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Smallest stored value (`L2`).
    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    /// Largest stored value (`L1`).
    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    /// Trapezoid integral of the raw input values that was divided out.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.resolution - 1) as f64
    }

    /// Cumulative integral along axis `axis` of the marginal over axes `0..=axis`,
    /// tabulated on the `m^(axis+1)` grid.
    pub fn cumulative_table(&self, axis: usize) -> Option<&[f64]> {
        self.tables.get(axis).map(|t| t.cumulative.as_slice())
    }

    pub fn same_grid(&self, other: &GridDensity) -> bool {
        self.dim == other.dim && self.resolution == other.resolution
    }

    /// Evaluates the multilinear interpolant at `x ∈ [0,1]^d`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let x = check_unit_point(x)?;
        Ok(interpolate(&self.values, self.resolution, &x))
    }

    /// Evaluates at the nearest point of the cube; the flag reports whether
    /// `x` had to be projected.
    pub fn eval_clamped(&self, x: &[f64]) -> (f64, bool) {
        let (p, outside) = project_to_cube(x);
        (interpolate(&self.values, self.resolution, &p), outside)
    }

    /// Gradient of the interpolant at the projection of `x`. Components along
    /// which `x` was projected are zero.
    pub fn grad_clamped(&self, x: &[f64]) -> Vec<f64> {
        let (p, _) = project_to_cube(x);
        let mut g = interpolate_grad(&self.values, self.resolution, &p);
        for (gi, xi) in g.iter_mut().zip(x) {
            if *xi < 0.0 || *xi > 1.0 {
                *gi = 0.0;
            }
        }
        g
    }

    /// Conditional marginal of axis `axis` (0-based) given the preceding axes.
    pub fn marginal(&self, axis: usize) -> Result<Marginal<'_>> {
        if axis >= self.dim {
            return Err(FlowError::argument(format!(
                "axis {axis} out of range for a {}-d density",
                self.dim
            )));
        }
        Ok(Marginal {
            density: self,
            axis,
        })
    }

    /// `F_k(prefix, x_k)`: the CDF of axis `axis` conditioned on `prefix`.
    pub fn conditional_cdf(&self, axis: usize, prefix: &[f64], x_k: f64) -> Result<f64> {
        let slice = self.marginal(axis)?.slice(prefix)?;
        let x_k = check_unit_point(&[x_k])?[0];
        Ok(slice.cdf(x_k))
    }

    /// Inverse of [`GridDensity::conditional_cdf`] in its last argument.
    pub fn inverse_conditional_cdf(&self, axis: usize, prefix: &[f64], u: f64) -> Result<f64> {
        let slice = self.marginal(axis)?.slice(prefix)?;
        if !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(&u) {
            return Err(FlowError::domain(format!("probability {u} outside [0, 1]")));
        }
        Ok(slice.inverse_cdf(u.clamp(0.0, 1.0)))
    }

    /// Maps a point of the unit cube to a sample of this density by sequential
    /// conditional inversion (the triangular map pushing the uniform here).
    pub fn from_uniform(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        let u = check_unit_point(u)?;
        let mut x = Vec::with_capacity(self.dim);
        for (axis, &uk) in u.iter().enumerate() {
            let slice = self.marginal(axis)?.slice(&x)?;
            x.push(slice.inverse_cdf(uk));
        }
        Ok(x)
    }

    /// Draws `n` independent samples.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let u: Vec<f64> = (0..self.dim).map(|_| rng.gen::<f64>()).collect();
                self.from_uniform(&u).expect("uniform draws lie in the cube")
            })
            .collect()
    }

    /// Grid nodes with their tensor trapezoid weights (weights sum to one).
    pub fn quadrature(&self) -> Vec<(Vec<f64>, f64)> {
        let m = self.resolution;
        let h = self.spacing();
        let w1 = |i: usize| if i == 0 || i == m - 1 { 0.5 * h } else { h };
        (0..self.values.len())
            .map(|flat| {
                let mut p = vec![0.0; self.dim];
                node_point(flat, self.dim, m, &mut p);
                let mut w = 1.0;
                let mut rest = flat;
                for _ in 0..self.dim {
                    w *= w1(rest % m);
                    rest /= m;
                }
                (p, w)
            })
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(FlowError::argument(format!(
                "point has {} coordinates, density is {}-d",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Serializable form carrying the normalized values.
    pub fn to_file(&self) -> DensityFile {
        DensityFile {
            schema: SCHEMA_VERSION,
            dim: Some(self.dim),
            resolution: self.resolution,
            values: Some(self.values.clone()),
            kind: None,
            params: None,
        }
    }
}

/// Conditional marginal density `f_k(x_{[k-1]}, ·) = f̂_k / f̂_{k-1}`.
#[derive(Debug, Clone, Copy)]
pub struct Marginal<'a> {
    density: &'a GridDensity,
    axis: usize,
}

impl Marginal<'_> {
    pub fn axis(&self) -> usize {
        self.axis
    }

    /// Evaluates `f_k` at `x = (prefix, x_k)` with `x.len() == axis + 1`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.axis + 1 {
            return Err(FlowError::argument(format!(
                "marginal of axis {} takes {} coordinates",
                self.axis,
                self.axis + 1
            )));
        }
        let x = check_unit_point(x)?;
        let m = self.density.resolution;
        let joint = interpolate(&self.density.tables[self.axis].values, m, &x);
        let prefix_mass = if self.axis == 0 {
            1.0
        } else {
            interpolate(&self.density.tables[self.axis - 1].values, m, &x[..self.axis])
        };
        Ok(joint / prefix_mass)
    }

    /// Extracts the normalized one-dimensional slice at a fixed prefix.
    pub fn slice(&self, prefix: &[f64]) -> Result<ConditionalSlice> {
        if prefix.len() != self.axis {
            return Err(FlowError::argument(format!(
                "axis {} needs a prefix of length {}, got {}",
                self.axis,
                self.axis,
                prefix.len()
            )));
        }
        let prefix = check_unit_point(prefix)?;
        let m = self.density.resolution;
        let table = &self.density.tables[self.axis];
        let mut pdf = vec![0.0; m];
        let mut cdf = vec![0.0; m];
        for (base, w) in corner_weights(m, &prefix) {
            let off = base * m;
            for j in 0..m {
                pdf[j] += w * table.values[off + j];
                cdf[j] += w * table.cumulative[off + j];
            }
        }
        let total = cdf[m - 1];
        for v in pdf.iter_mut().chain(cdf.iter_mut()) {
            *v /= total;
        }
        cdf[m - 1] = 1.0;
        Ok(ConditionalSlice {
            pdf,
            cdf,
            spacing: 1.0 / (m - 1) as f64,
        })
    }
}

/// One-dimensional piecewise linear density on `[0, 1]` with its exact
/// piecewise quadratic CDF.
#[derive(Debug, Clone)]
pub struct ConditionalSlice {
    pdf: Vec<f64>,
    cdf: Vec<f64>,
    spacing: f64,
}

impl ConditionalSlice {
    fn cell(&self, x: f64) -> (usize, f64) {
        let m = self.pdf.len();
        let pos = x / self.spacing;
        let i = (pos.floor() as usize).min(m - 2);
        (i, x - i as f64 * self.spacing)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (i, s) = self.cell(x.clamp(0.0, 1.0));
        let t = s / self.spacing;
        self.pdf[i] * (1.0 - t) + self.pdf[i + 1] * t
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let (i, s) = self.cell(x);
        let slope = (self.pdf[i + 1] - self.pdf[i]) / self.spacing;
        (self.cdf[i] + s * self.pdf[i] + 0.5 * slope * s * s).clamp(0.0, 1.0)
    }

    /// Inverse of [`ConditionalSlice::cdf`]. The cell is located by binary
    /// search on the node CDF values and the quadratic inside it is solved in
    /// closed form (cancellation-free root), so the result is exact up to
    /// rounding.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let m = self.cdf.len();
        // First node whose cumulative mass reaches u; the root lies in the cell before it.
        let j = self.cdf.partition_point(|&c| c < u).clamp(1, m - 1);
        let i = j - 1;
        let rest = (u - self.cdf[i]).max(0.0);
        let p = self.pdf[i];
        let slope = (self.pdf[i + 1] - p) / self.spacing;
        // 0.5 slope s² + p s = rest  ⇒  s = 2 rest / (p + √(p² + 2 slope rest))
        let disc = (p * p + 2.0 * slope * rest).max(0.0);
        let s = (2.0 * rest / (p + disc.sqrt())).clamp(0.0, self.spacing);
        (i as f64 * self.spacing + s).min(1.0)
    }
}

/// Closed-form density families used to generate grids in tests and examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum AnalyticDensity {
    /// Constant density on `[0,1]^dim`.
    Uniform { dim: usize },
    /// `1 + amplitude·sin(2π·frequency·x)` on `[0, 1]`.
    Sine1d {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: u32,
    },
    /// Tensor product of the factors, in order.
    Product { factors: Vec<AnalyticDensity> },
}

fn one() -> u32 {
    1
}

impl AnalyticDensity {
    pub fn sine(amplitude: f64) -> Self {
        AnalyticDensity::Sine1d {
            amplitude,
            frequency: 1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticDensity::Uniform { dim } => *dim,
            AnalyticDensity::Sine1d { .. } => 1,
            AnalyticDensity::Product { factors } => factors.iter().map(|f| f.dim()).sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticDensity::Uniform { dim } if *dim == 0 => {
                Err(FlowError::argument("uniform density needs dim >= 1"))
            }
            AnalyticDensity::Sine1d {
                amplitude,
                frequency,
            } if !(amplitude.abs() < 1.0) || *frequency == 0 => Err(FlowError::argument(
                "sine density needs |amplitude| < 1 and frequency >= 1",
            )),
            AnalyticDensity::Product { factors } if factors.is_empty() => {
                Err(FlowError::argument("product density needs at least one factor"))
            }
            AnalyticDensity::Product { factors } => factors.iter().try_for_each(|f| f.validate()),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            AnalyticDensity::Uniform { .. } => 1.0,
            AnalyticDensity::Sine1d {
                amplitude,
                frequency,
            } => 1.0 + amplitude * (2.0 * PI * f64::from(*frequency) * x[0]).sin(),
            AnalyticDensity::Product { factors } => {
                let mut offset = 0;
                factors
                    .iter()
                    .map(|f| {
                        let d = f.dim();
                        let v = f.eval(&x[offset..offset + d]);
                        offset += d;
                        v
                    })
                    .product()
            }
        }
    }
}

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

/// On-disk density: either explicit `values` or a closed-form `kind`/`params`
/// specifier tabulated at `resolution`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityFile {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    pub resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Value>,
}

impl DensityFile {
    pub fn analytic(spec: &AnalyticDensity, resolution: usize) -> Result<Self> {
        let tagged = serde_json::to_value(spec)?;
        Ok(DensityFile {
            schema: SCHEMA_VERSION,
            dim: Some(spec.dim()),
            resolution,
            values: None,
            kind: tagged.get("kind").and_then(Value::as_str).map(str::to_owned),
            params: tagged.get("params").cloned(),
        })
    }

    pub fn build(&self) -> Result<GridDensity> {
        if self.schema != SCHEMA_VERSION {
            return Err(FlowError::argument(format!(
                "unsupported density schema {}",
                self.schema
            )));
        }
        match (&self.values, &self.kind) {
            (Some(values), None) => {
                let dim = self
                    .dim
                    .ok_or_else(|| FlowError::argument("density file lacks \"dim\""))?;
                GridDensity::new(dim, self.resolution, values.clone())
            }
            (None, Some(kind)) => {
                let mut obj = serde_json::Map::new();
                obj.insert("kind".into(), Value::String(kind.clone()));
                obj.insert(
                    "params".into(),
                    self.params.clone().unwrap_or(Value::Object(Default::default())),
                );
                let spec: AnalyticDensity = serde_json::from_value(Value::Object(obj))
                    .map_err(|e| FlowError::argument(format!("bad analytic density: {e}")))?;
                if let Some(dim) = self.dim {
                    if dim != spec.dim() {
                        return Err(FlowError::argument(format!(
                            "declared dim {dim} does not match {kind} density of dim {}",
                            spec.dim()
                        )));
                    }
                }
                GridDensity::from_analytic(&spec, self.resolution)
            }
            (Some(_), Some(_)) => Err(FlowError::argument(
                "density file has both \"values\" and \"kind\"",
            )),
            (None, None) => Err(FlowError::argument(
                "density file needs \"values\" or \"kind\"",
            )),
        }
    }
}

/// Composite trapezoid rule on equally spaced samples.
fn trapezoid(row: &[f64], h: f64) -> f64 {
    let n = row.len();
    let inner: f64 = row[1..n - 1].iter().sum();
    h * (inner + 0.5 * (row[0] + row[n - 1]))
}

fn cumulative_trapezoid(values: &[f64], m: usize, h: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, acc) in values.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        for j in 1..m {
            acc[j] = acc[j - 1] + 0.5 * h * (row[j - 1] + row[j]);
        }
    }
    out
}

/// Coordinates of grid node `flat` (row-major, last axis fastest).
pub(crate) fn node_point(flat: usize, dim: usize, m: usize, out: &mut [f64]) {
    let h = 1.0 / (m - 1) as f64;
    let mut rest = flat;
    for a in (0..dim).rev() {
        out[a] = (rest % m) as f64 * h;
        rest /= m;
    }
}

fn project_to_cube(x: &[f64]) -> (Vec<f64>, bool) {
    let mut outside = false;
    let p = x
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                outside = true;
            }
            if v.is_nan() {
                0.5
            } else {
                v.clamp(0.0, 1.0)
            }
        })
        .collect();
    (p, outside)
}

/// Flat corner indices and multilinear weights for a point on an `m^k` grid.
fn corner_weights(m: usize, x: &[f64]) -> Vec<(usize, f64)> {
    let h = 1.0 / (m - 1) as f64;
    let mut corners = vec![(0usize, 1.0f64)];
    for &xa in x {
        let pos = xa / h;
        let i = (pos.floor() as usize).min(m - 2);
        let t = pos - i as f64;
        corners = corners
            .into_iter()
            .flat_map(|(base, w)| {
                [
                    (base * m + i, w * (1.0 - t)),
                    (base * m + i + 1, w * t),
                ]
            })
            .collect();
    }
    corners
}

fn interpolate(values: &[f64], m: usize, x: &[f64]) -> f64 {
    corner_weights(m, x)
        .into_iter()
        .map(|(idx, w)| w * values[idx])
        .sum()
}

fn interpolate_grad(values: &[f64], m: usize, x: &[f64]) -> Vec<f64> {
    let h = 1.0 / (m - 1) as f64;
    let cells: Vec<(usize, f64)> = x
        .iter()
        .map(|&xa| {
            let pos = xa / h;
            let i = (pos.floor() as usize).min(m - 2);
            (i, pos - i as f64)
        })
        .collect();
    let d = x.len();
    let mut grad = vec![0.0; d];
    for corner in 0..(1usize << d) {
        let mut flat = 0;
        for (a, &(i, _)) in cells.iter().enumerate() {
            let bit = (corner >> (d - 1 - a)) & 1;
            flat = flat * m + i + bit;
        }
        let v = values[flat];
        for (g_a, a) in grad.iter_mut().zip(0..d) {
            let mut w = 1.0;
            for (b, &(_, t)) in cells.iter().enumerate() {
                let bit = (corner >> (d - 1 - b)) & 1;
                if b == a {
                    w *= if bit == 1 { 1.0 / h } else { -1.0 / h };
                } else {
                    w *= if bit == 1 { t } else { 1.0 - t };
                }
            }
            *g_a += w * v;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sine(m: usize) -> GridDensity {
        GridDensity::from_analytic(&AnalyticDensity::sine(0.5), m).unwrap()
    }

    fn sine_cdf(x: f64) -> f64 {
        x + (1.0 - (2.0 * PI * x).cos()) / (4.0 * PI)
    }

    #[test]
    fn uniform_eval_is_one() {
        let u = GridDensity::uniform(2, 16).unwrap();
        assert_abs_diff_eq!(u.eval(&[0.3, 0.7]).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(u.lower_bound(), 1.0);
        assert_eq!(u.upper_bound(), 1.0);
    }

    #[test]
    fn sine_eval_at_nodes_and_between() {
        // 0.25 and 0.75 are nodes of the 257-point grid.
        let d = sine(257);
        assert_abs_diff_eq!(d.eval(&[0.25]).unwrap(), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d.eval(&[0.75]).unwrap(), 0.5, epsilon = 1e-12);
        let d = sine(256);
        assert_abs_diff_eq!(d.eval(&[0.25]).unwrap(), 1.5, epsilon = 1e-4);
        assert!(d.eval(&[0.75]).unwrap() >= d.lower_bound() * (1.0 - 1e-9));
    }

    #[test]
    fn eval_rejects_points_outside_cube() {
        let d = sine(64);
        assert!(matches!(d.eval(&[1.2]), Err(FlowError::Domain(_))));
        assert!(matches!(d.eval(&[-0.01]), Err(FlowError::Domain(_))));
        assert!(matches!(d.eval(&[0.5, 0.5]), Err(FlowError::Argument(_))));
    }

    #[test]
    fn constructor_validates_and_normalizes() {
        assert!(GridDensity::new(1, 4, vec![1.0; 4]).is_err());
        assert!(GridDensity::new(0, 8, vec![]).is_err());
        assert!(GridDensity::new(1, 8, vec![1.0; 7]).is_err());
        let mut vals = vec![2.0; 8];
        vals[3] = 0.0;
        assert!(GridDensity::new(1, 8, vals).is_err());

        let d = GridDensity::new(2, 9, vec![3.0; 81]).unwrap();
        assert_abs_diff_eq!(d.normalizer(), 3.0, epsilon = 1e-12);
        let total: f64 = d.quadrature().iter().map(|(p, w)| w * d.eval(p).unwrap()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn marginal_of_uniform_is_constant() {
        let u = GridDensity::uniform(2, 16).unwrap();
        let m = u.marginal(1).unwrap();
        for x2 in [0.0, 0.3, 0.77, 1.0] {
            assert_abs_diff_eq!(m.eval(&[0.4, x2]).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn marginal_of_product_factorizes() {
        let spec = AnalyticDensity::Product {
            factors: vec![AnalyticDensity::sine(0.5), AnalyticDensity::sine(0.5)],
        };
        let d = GridDensity::from_analytic(&spec, 129).unwrap();
        let m = d.marginal(1).unwrap();
        for x2 in [0.1, 0.25, 0.5, 0.9] {
            let expected = 1.0 + 0.5 * (2.0 * PI * x2).sin();
            assert_abs_diff_eq!(m.eval(&[0.25, x2]).unwrap(), expected, epsilon = 2e-4);
        }
        let first = d.marginal(0).unwrap();
        assert_abs_diff_eq!(first.eval(&[0.25]).unwrap(), 1.5, epsilon = 1e-9);
    }

    #[test]
    fn marginal_in_one_dimension_is_the_density() {
        let d = sine(64);
        let m = d.marginal(0).unwrap();
        for x in [0.0, 0.13, 0.5, 0.99] {
            assert_abs_diff_eq!(m.eval(&[x]).unwrap(), d.eval(&[x]).unwrap(), epsilon = 1e-14);
        }
        assert!(matches!(d.marginal(1), Err(FlowError::Argument(_))));
    }

    #[test]
    fn conditional_slices_integrate_to_one() {
        let spec = AnalyticDensity::Product {
            factors: vec![AnalyticDensity::sine(0.4), AnalyticDensity::sine(-0.3)],
        };
        let d = GridDensity::from_analytic(&spec, 33).unwrap();
        let m = d.marginal(1).unwrap();
        for p in [0.0, 0.21, 0.5, 1.0] {
            let s = m.slice(&[p]).unwrap();
            // Simpson on the piecewise linear slice, refined well below the grid.
            let n = 3200;
            let h = 1.0 / n as f64;
            let integral: f64 = (0..=n)
                .map(|i| {
                    let w = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    w * s.pdf(i as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0;
            assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn conditional_cdf_examples() {
        let u = GridDensity::uniform(2, 16).unwrap();
        assert_abs_diff_eq!(u.conditional_cdf(1, &[0.8], 0.37).unwrap(), 0.37, epsilon = 1e-12);
        let d = sine(257);
        assert_abs_diff_eq!(
            d.conditional_cdf(0, &[], 0.5).unwrap(),
            0.5 + 1.0 / (2.0 * PI),
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(d.conditional_cdf(0, &[], 1.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.conditional_cdf(0, &[], 0.0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn inverse_cdf_examples() {
        let u = GridDensity::uniform(1, 16).unwrap();
        assert_abs_diff_eq!(u.inverse_conditional_cdf(0, &[], 0.42).unwrap(), 0.42, epsilon = 1e-11);
        assert_eq!(u.inverse_conditional_cdf(0, &[], 0.0).unwrap(), 0.0);
        let d = sine(257);
        let target = sine_cdf(0.5);
        assert_abs_diff_eq!(d.inverse_conditional_cdf(0, &[], target).unwrap(), 0.5, epsilon = 1e-5);
        let x = d.inverse_conditional_cdf(0, &[], 0.3).unwrap();
        assert_abs_diff_eq!(d.conditional_cdf(0, &[], x).unwrap(), 0.3, epsilon = 1e-10);
    }

    #[test]
    fn cdf_slopes_are_bounded_by_density_ratio() {
        let d = sine(64);
        let s = d.marginal(0).unwrap().slice(&[]).unwrap();
        let lo = d.lower_bound() / d.upper_bound();
        let hi = d.upper_bound() / d.lower_bound();
        let h = 1e-4;
        for i in 1..63 {
            let x = i as f64 / 63.0;
            let slope = (s.cdf(x + h) - s.cdf(x)) / h;
            assert!(slope >= lo - 1e-6 && slope <= hi + 1e-6, "slope {slope} at {x}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = AnalyticDensity::Product {
            factors: vec![AnalyticDensity::sine(0.5), AnalyticDensity::sine(0.3)],
        };
        let d = GridDensity::from_analytic(&spec, 17).unwrap();
        let x = [0.33, 0.61];
        let g = d.grad_clamped(&x);
        let h = 1e-7;
        for a in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += h;
            xm[a] -= h;
            let fd = (d.eval(&xp).unwrap() - d.eval(&xm).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(g[a], fd, epsilon = 1e-6);
        }
        assert_eq!(d.grad_clamped(&[1.3, 0.5])[0], 0.0);
    }

    #[test]
    fn density_file_round_trip() {
        let spec = AnalyticDensity::Product {
            factors: vec![AnalyticDensity::sine(0.5), AnalyticDensity::Uniform { dim: 1 }],
        };
        let file = DensityFile::analytic(&spec, 16).unwrap();
        let text = serde_json::to_string(&file).unwrap();
        assert!(text.contains("\"kind\":\"product\""));
        let built: DensityFile = serde_json::from_str(&text).unwrap();
        let d = built.build().unwrap();
        assert_eq!(d.dim(), 2);
        let again: DensityFile =
            serde_json::from_str(&serde_json::to_string(&d.to_file()).unwrap()).unwrap();
        assert_eq!(again.build().unwrap().values(), d.values());
        let bad = r#"{"resolution": 16}"#;
        assert!(serde_json::from_str::<DensityFile>(bad).unwrap().build().is_err());
    }
}
