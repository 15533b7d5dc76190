//! Knothe–Rosenblatt triangular transport between grid densities, its
//! displacement interpolation, Jacobians and the spectrum condition that keeps
//! interpolation lines from crossing.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::density::{check_unit_point, ConditionalSlice, DensityFile, GridDensity, SCHEMA_VERSION};
use crate::error::{FlowError, Result};

/// Central finite-difference step for map Jacobians.
pub const FD_STEP: f64 = 1e-5;

/// Tolerance on real and imaginary parts when classifying eigenvalues.
pub const EIGEN_TOL: f64 = 1e-9;

/// Monotone triangular map `T` with `T♯π = ρ`.
///
/// Component `k` is `G_{ρ,k}(T_1, .., T_{k-1}, F_{π,k}(x_1, .., x_k))`; the
/// conditional CDF tables live in the two densities, and the prefix
/// `T_1..T_{k-1}` is recomputed on demand.
#[derive(Debug, Clone)]
pub struct TriangularMap {
    source: GridDensity,
    target: GridDensity,
}

/// Source and target conditional slices feeding one map component.
#[derive(Debug, Clone)]
pub struct ComponentSlices {
    pub source: ConditionalSlice,
    pub target: ConditionalSlice,
}

impl ComponentSlices {
    /// `T_k` as a function of `x_k` with the prefix frozen.
    pub fn eval(&self, x_k: f64) -> f64 {
        self.target.inverse_cdf(self.source.cdf(x_k))
    }

    /// Density-ratio form of `∂T_k/∂x_k`.
    pub fn slope(&self, x_k: f64) -> f64 {
        self.source.pdf(x_k) / self.target.pdf(self.eval(x_k))
    }
}

/// Builds the Knothe–Rosenblatt map pushing `source` onto `target`.
pub fn kr_construct(source: GridDensity, target: GridDensity) -> Result<TriangularMap> {
    if source.dim() != target.dim() {
        return Err(FlowError::argument(format!(
            "source is {}-d but target is {}-d",
            source.dim(),
            target.dim()
        )));
    }
    Ok(TriangularMap { source, target })
}

impl TriangularMap {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn source(&self) -> &GridDensity {
        &self.source
    }

    pub fn target(&self) -> &GridDensity {
        &self.target
    }

    /// Slices for component `axis` at source prefix `x_prefix` and image
    /// prefix `t_prefix = T_{[axis]}(x)`.
    pub fn component_slices(
        &self,
        axis: usize,
        x_prefix: &[f64],
        t_prefix: &[f64],
    ) -> Result<ComponentSlices> {
        Ok(ComponentSlices {
            source: self.source.marginal(axis)?.slice(x_prefix)?,
            target: self.target.marginal(axis)?.slice(t_prefix)?,
        })
    }

    /// `T(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let x = check_unit_point(x)?;
        let mut out = Vec::with_capacity(x.len());
        for k in 0..x.len() {
            let slices = self.component_slices(k, &x[..k], &out)?;
            out.push(slices.eval(x[k]));
        }
        Ok(out)
    }

    /// `T_t(x) = (1 - t)x + tT(x)`.
    pub fn displacement_interpolation(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::domain(format!("time {t} outside [0, 1]")));
        }
        let tx = self.eval(x)?;
        Ok(x.iter()
            .zip(&tx)
            .map(|(xi, ti)| (1.0 - t) * xi + t * ti)
            .collect())
    }

    /// Lower-triangular `∇T(x)` by central differences with step [`FD_STEP`].
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(x)?;
        check_interior(x, 2.0 * FD_STEP)?;
        let d = x.len();
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += FD_STEP;
            xm[j] -= FD_STEP;
            let tp = self.eval(&xp)?;
            let tm = self.eval(&xm)?;
            for i in j..d {
                jac[(i, j)] = (tp[i] - tm[i]) / (2.0 * FD_STEP);
            }
        }
        Ok(jac)
    }

    /// Diagonal of `∇T(x)` from `π_k(x) / ρ_k(T_{[k-1]}(x), T_k(x))`.
    pub fn diagonal_ratio(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let x = check_unit_point(x)?;
        let mut image = Vec::with_capacity(x.len());
        let mut diag = Vec::with_capacity(x.len());
        for k in 0..x.len() {
            let slices = self.component_slices(k, &x[..k], &image)?;
            diag.push(slices.slope(x[k]));
            image.push(slices.eval(x[k]));
        }
        Ok(diag)
    }

    /// `max |det ∇T(x) ρ(T(x)) − π(x)|` over the test points.
    pub fn pushforward_residual(&self, points: &[Vec<f64>]) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for x in points {
            let det = self.jacobian(x)?.determinant();
            let image = self.eval(x)?;
            let lhs = det * self.target.eval(&image)?;
            let rhs = self.source.eval(x)?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok(worst)
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(FlowError::argument(format!(
                "point has {} coordinates, map is {}-d",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn to_file(&self) -> MapFile {
        let tables = (0..self.dim())
            .map(|axis| AxisTables {
                axis,
                source_cdf: self.source.cumulative_table(axis).unwrap_or_default().to_vec(),
                target_cdf: self.target.cumulative_table(axis).unwrap_or_default().to_vec(),
            })
            .collect();
        MapFile {
            schema: SCHEMA_VERSION,
            dim: self.dim(),
            resolution: self.source.resolution(),
            source: self.source.to_file(),
            target: self.target.to_file(),
            tables,
        }
    }
}

/// Errors unless every coordinate is at least `margin` inside the open cube.
pub fn check_interior(x: &[f64], margin: f64) -> Result<()> {
    match x.iter().position(|&v| !(v >= margin && v <= 1.0 - margin)) {
        Some(i) => Err(FlowError::domain(format!(
            "coordinate {i} = {} is within {margin} of the boundary",
            x[i]
        ))),
        None => Ok(()),
    }
}

/// Serialized triangular map: both densities plus the per-axis cumulative
/// tables, which are checked against the densities on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFile {
    pub schema: u32,
    pub dim: usize,
    pub resolution: usize,
    pub source: DensityFile,
    pub target: DensityFile,
    pub tables: Vec<AxisTables>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisTables {
    pub axis: usize,
    pub source_cdf: Vec<f64>,
    pub target_cdf: Vec<f64>,
}

impl MapFile {
    pub fn build(&self) -> Result<TriangularMap> {
        if self.schema != SCHEMA_VERSION {
            return Err(FlowError::argument(format!("unsupported map schema {}", self.schema)));
        }
        let map = kr_construct(self.source.build()?, self.target.build()?)?;
        if map.dim() != self.dim || self.tables.len() != self.dim {
            return Err(FlowError::argument("map file dimension is inconsistent"));
        }
        for t in &self.tables {
            let ok = |stored: &[f64], fresh: Option<&[f64]>| {
                fresh.is_some_and(|f| {
                    f.len() == stored.len()
                        && f.iter().zip(stored).all(|(a, b)| (a - b).abs() <= 1e-12)
                })
            };
            if !ok(&t.source_cdf, map.source.cumulative_table(t.axis))
                || !ok(&t.target_cdf, map.target.cumulative_table(t.axis))
            {
                return Err(FlowError::argument(format!(
                    "stored CDF table for axis {} does not match its density",
                    t.axis
                )));
            }
        }
        Ok(map)
    }
}

/// Anything that can report a `d × d` Jacobian at a point.
pub trait JacobianProvider {
    fn dim(&self) -> usize;
    fn jacobian_at(&self, x: &[f64]) -> Result<DMatrix<f64>>;
}

impl JacobianProvider for TriangularMap {
    fn dim(&self) -> usize {
        TriangularMap::dim(self)
    }

    fn jacobian_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.jacobian(x)
    }
}

/// A raw matrix field `x ↦ A(x)`.
pub struct MatrixField<F> {
    dim: usize,
    field: F,
}

impl<F: Fn(&[f64]) -> DMatrix<f64>> MatrixField<F> {
    pub fn new(dim: usize, field: F) -> Self {
        Self { dim, field }
    }
}

impl<F: Fn(&[f64]) -> DMatrix<f64>> JacobianProvider for MatrixField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jacobian_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok((self.field)(x))
    }
}

/// Planar rotation by `angle`, the Jacobian of the linear map `x ↦ R x`.
pub fn rotation(angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Result of checking `σ(∇T(x)) ∩ (−∞, 0] = ∅` at sample points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub sample_points: Vec<Vec<f64>>,
    /// Smallest real eigenvalue minus [`EIGEN_TOL`] over all points; `+∞` when
    /// no sampled Jacobian has a real eigenvalue.
    pub min_real_eigenvalue_margin: f64,
    pub violating_points: Vec<Vec<f64>>,
}

impl SpectrumReport {
    pub fn passed(&self) -> bool {
        self.violating_points.is_empty()
    }
}

pub fn spectrum_check(
    provider: &dyn JacobianProvider,
    sample_points: &[Vec<f64>],
) -> Result<SpectrumReport> {
    let mut margin = f64::INFINITY;
    let mut violating = Vec::new();
    for x in sample_points {
        let jac = provider.jacobian_at(x)?;
        let eigs = eigenvalues(&jac).map_err(|e| e.context(format!("at point {x:?}")))?;
        let mut flagged = false;
        for z in eigs.iter().filter(|z| z.im.abs() <= EIGEN_TOL) {
            margin = margin.min(z.re - EIGEN_TOL);
            flagged |= z.re <= EIGEN_TOL;
        }
        if flagged {
            violating.push(x.clone());
        }
    }
    Ok(SpectrumReport {
        sample_points: sample_points.to_vec(),
        min_real_eigenvalue_margin: margin,
        violating_points: violating,
    })
}

/// Eigenvalues from the characteristic polynomial for `d ≤ 3`, from a real
/// Schur decomposition otherwise.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if !a.is_square() {
        return Err(FlowError::argument("eigenvalues need a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::numeric("matrix has non-finite entries"));
    }
    match a.nrows() {
        0 => Ok(Vec::new()),
        1 => Ok(vec![Complex::new(a[(0, 0)], 0.0)]),
        2 => {
            let tr = a[(0, 0)] + a[(1, 1)];
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            Ok(quadratic_roots(-tr, det).to_vec())
        }
        3 => {
            let tr = a.trace();
            let minors = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)]
                + a[(0, 0)] * a[(2, 2)]
                - a[(0, 2)] * a[(2, 0)]
                + a[(1, 1)] * a[(2, 2)]
                - a[(1, 2)] * a[(2, 1)];
            let det = a.determinant();
            Ok(cubic_roots(-tr, minors, -det).to_vec())
        }
        _ => {
            let schur = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, 10_000)
                .ok_or_else(|| FlowError::numeric("Schur iteration did not converge"))?;
            Ok(schur.complex_eigenvalues().iter().copied().collect())
        }
    }
}

/// Roots of `λ² + bλ + c`.
fn quadratic_roots(b: f64, c: f64) -> [Complex<f64>; 2] {
    let mut disc = b * b - 4.0 * c;
    // Cancellation noise around a double root.
    if disc.abs() <= 64.0 * f64::EPSILON * (b * b + 4.0 * c.abs()) {
        disc = 0.0;
    }
    if disc >= 0.0 {
        let s = disc.sqrt();
        // Stable form avoiding cancellation in the smaller root.
        let q = -0.5 * (b + b.signum() * s);
        let r2 = if q != 0.0 { c / q } else { 0.0 };
        [Complex::new(q, 0.0), Complex::new(r2, 0.0)]
    } else {
        let re = -0.5 * b;
        let im = 0.5 * (-disc).sqrt();
        [Complex::new(re, im), Complex::new(re, -im)]
    }
}

/// Roots of `λ³ + aλ² + bλ + c` via the depressed cubic.
fn cubic_roots(a: f64, b: f64, c: f64) -> [Complex<f64>; 3] {
    let shift = -a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let scale = (q * q / 4.0).abs() + (p / 3.0).powi(3).abs();
    let mut disc = q * q / 4.0 + (p / 3.0).powi(3);
    if disc.abs() <= 64.0 * f64::EPSILON * scale {
        disc = 0.0;
    }
    let real = |y: f64| Complex::new(y + shift, 0.0);
    if disc > 0.0 {
        let s = disc.sqrt();
        let u = (-q / 2.0 + s).cbrt();
        let v = (-q / 2.0 - s).cbrt();
        let y1 = u + v;
        let re = -0.5 * y1 + shift;
        let im = 0.5 * 3f64.sqrt() * (u - v);
        [real(y1), Complex::new(re, im), Complex::new(re, -im)]
    } else if p.abs() <= f64::EPSILON * (1.0 + a * a) {
        let y = (-q).cbrt();
        [real(y), real(y), real(y)]
    } else {
        // Three real roots (trigonometric form); p < 0 here.
        let r = 2.0 * (-p / 3.0).sqrt();
        let arg = ((3.0 * q) / (p * r)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        let two_pi_3 = 2.0 * std::f64::consts::PI / 3.0;
        [
            real(r * phi.cos()),
            real(r * (phi - two_pi_3).cos()),
            real(r * (phi - 2.0 * two_pi_3).cos()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::AnalyticDensity;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn sine_to_uniform(m: usize) -> TriangularMap {
        kr_construct(
            GridDensity::from_analytic(&AnalyticDensity::sine(0.5), m).unwrap(),
            GridDensity::uniform(1, m).unwrap(),
        )
        .unwrap()
    }

    fn sine_cdf(x: f64) -> f64 {
        x + (1.0 - (2.0 * PI * x).cos()) / (4.0 * PI)
    }

    #[test]
    fn identity_between_uniforms() {
        let map = kr_construct(
            GridDensity::uniform(2, 16).unwrap(),
            GridDensity::uniform(2, 16).unwrap(),
        )
        .unwrap();
        for x in [[0.2, 0.9], [0.5, 0.5], [0.01, 0.77]] {
            let t = map.eval(&x).unwrap();
            assert_abs_diff_eq!(t[0], x[0], epsilon = 1e-8);
            assert_abs_diff_eq!(t[1], x[1], epsilon = 1e-8);
        }
        let j = map.jacobian(&[0.3, 0.6]).unwrap();
        assert!((j - DMatrix::identity(2, 2)).abs().max() < 1e-6);
        let pts = vec![vec![0.3, 0.3], vec![0.7, 0.2]];
        assert!(map.pushforward_residual(&pts).unwrap() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = kr_construct(
            GridDensity::uniform(1, 16).unwrap(),
            GridDensity::uniform(2, 16).unwrap(),
        );
        assert!(matches!(err, Err(FlowError::Argument(_))));
    }

    #[test]
    fn sine_to_uniform_is_the_cdf() {
        let map = sine_to_uniform(256);
        assert_abs_diff_eq!(map.eval(&[0.5]).unwrap()[0], sine_cdf(0.5), epsilon = 1e-4);
        assert_abs_diff_eq!(map.eval(&[0.25]).unwrap()[0], 0.25 + 1.0 / (4.0 * PI), epsilon = 1e-4);
        assert_eq!(map.eval(&[0.0]).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(map.eval(&[1.0]).unwrap()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_to_sine_is_the_inverse_cdf() {
        let map = kr_construct(
            GridDensity::uniform(1, 256).unwrap(),
            GridDensity::from_analytic(&AnalyticDensity::sine(0.5), 256).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(map.eval(&[sine_cdf(0.5)]).unwrap()[0], 0.5, epsilon = 1e-4);
    }

    #[test]
    fn displacement_interpolation_is_affine_in_time() {
        let map = sine_to_uniform(256);
        assert_eq!(map.displacement_interpolation(&[0.5], 0.0).unwrap(), vec![0.5]);
        let t1 = map.displacement_interpolation(&[0.5], 1.0).unwrap()[0];
        assert_abs_diff_eq!(t1, sine_cdf(0.5), epsilon = 1e-4);
        let mid = map.displacement_interpolation(&[0.5], 0.5).unwrap()[0];
        assert_abs_diff_eq!(mid, 0.5 * (0.5 + sine_cdf(0.5)), epsilon = 1e-4);
        assert!(map.displacement_interpolation(&[0.5], 1.5).is_err());
    }

    #[test]
    fn jacobian_matches_density_ratio() {
        let map = sine_to_uniform(256);
        let j = map.jacobian(&[0.25]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 1.5, epsilon = 1e-3);
        let ratio = map.diagonal_ratio(&[0.25]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], ratio[0], epsilon = 1e-3);
        assert!(matches!(map.jacobian(&[1e-6]), Err(FlowError::Domain(_))));
    }

    #[test]
    fn product_map_has_diagonal_jacobian() {
        let spec = AnalyticDensity::Product {
            factors: vec![AnalyticDensity::sine(0.5), AnalyticDensity::sine(0.5)],
        };
        let map = kr_construct(
            GridDensity::from_analytic(&spec, 64).unwrap(),
            GridDensity::uniform(2, 64).unwrap(),
        )
        .unwrap();
        let x = [0.3, 0.65];
        let j = map.jacobian(&x).unwrap();
        assert_eq!(j[(0, 1)], 0.0);
        assert!(j[(1, 0)].abs() < 1e-3);
        let pi = |v: f64| 1.0 + 0.5 * (2.0 * PI * v).sin();
        assert_abs_diff_eq!(j[(0, 0)], pi(x[0]), epsilon = 2e-3);
        assert_abs_diff_eq!(j[(1, 1)], pi(x[1]), epsilon = 2e-3);
    }

    #[test]
    fn triangular_components_ignore_later_coordinates() {
        let source = GridDensity::from_fn(3, 12, |x| 1.0 + 0.3 * x[0] * x[1] + 0.2 * x[2]).unwrap();
        let target = GridDensity::from_fn(3, 12, |x| 2.0 + (x[0] - x[2]).powi(2)).unwrap();
        let map = kr_construct(source, target).unwrap();
        let a = map.eval(&[0.3, 0.4, 0.5]).unwrap();
        let b = map.eval(&[0.3, 0.4, 0.9]).unwrap();
        let c = map.eval(&[0.3, 0.8, 0.9]).unwrap();
        assert_eq!(a[..2], b[..2]);
        assert_eq!(a[0], c[0]);
    }

    #[test]
    fn rotation_spectrum() {
        let pts = vec![vec![0.3, 0.4], vec![0.8, 0.1]];
        for (angle, ok) in [(0.0, true), (PI / 2.0, true), (3.0 * PI / 4.0, true), (PI, false)] {
            let field = MatrixField::new(2, move |_| rotation(angle));
            let report = spectrum_check(&field, &pts).unwrap();
            assert_eq!(report.passed(), ok, "angle {angle}");
            assert_eq!(report.min_real_eigenvalue_margin > 0.0, ok);
        }
        let field = MatrixField::new(2, |_| rotation(PI));
        assert_eq!(spectrum_check(&field, &pts).unwrap().violating_points.len(), 2);
    }

    #[test]
    fn characteristic_roots_match_schur() {
        let cases = [
            DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, -1.0, 2.0, 0.5, 0.3, 0.0, -0.7]),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0]),
            DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 2.0, 1.0, 3.0, 0.0, 2.0, 0.0, 5.0]),
        ];
        for a in cases {
            let mut ours: Vec<_> = eigenvalues(&a).unwrap();
            let mut reference: Vec<_> = a.complex_eigenvalues().iter().copied().collect();
            let key = |z: &Complex<f64>| (z.re * 1e6).round() as i64 * 1_000_000 + (z.im * 1e6).round() as i64;
            ours.sort_by_key(key);
            reference.sort_by_key(key);
            for (x, y) in ours.iter().zip(&reference) {
                assert!((x - y).norm() < 1e-6, "{x} vs {y} for {a}");
            }
        }
        let neg = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0]);
        let field = MatrixField::new(3, move |_| neg.clone());
        assert!(!spectrum_check(&field, &[vec![0.5; 3]]).unwrap().passed());
    }

    #[test]
    fn general_eigensolver_above_three_dimensions() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, -0.5, 3.0]));
        let eigs = eigenvalues(&a).unwrap();
        assert!(eigs.iter().any(|z| (z.re + 0.5).abs() < 1e-12));
    }

    #[test]
    fn map_file_round_trip_and_integrity() {
        let map = sine_to_uniform(32);
        let file = map.to_file();
        let text = serde_json::to_string(&file).unwrap();
        let loaded: MapFile = serde_json::from_str(&text).unwrap();
        let rebuilt = loaded.build().unwrap();
        assert_abs_diff_eq!(rebuilt.eval(&[0.3]).unwrap()[0], map.eval(&[0.3]).unwrap()[0], epsilon = 1e-12);
        let mut tampered = file;
        tampered.tables[0].source_cdf[5] += 1e-3;
        assert!(tampered.build().is_err());
    }
}
