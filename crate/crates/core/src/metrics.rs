//! Divergences between tabulated densities, sample Wasserstein distances and
//! numerical checks of the flow-stability bounds.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::GridDensity;
use crate::error::{FlowError, Result};
use crate::flow::{integrate_backward_with_divergence, integrate_flow, IntegratorConfig};
use crate::velocity::{divergence_from, spatial_block, StraightLineField, VelocityField};

fn check_same_grid(p: &GridDensity, q: &GridDensity) -> Result<()> {
    if !p.same_grid(q) {
        return Err(FlowError::argument(format!(
            "densities live on different grids ({}-d at {} vs {}-d at {})",
            p.dim(),
            p.resolution(),
            q.dim(),
            q.resolution()
        )));
    }
    Ok(())
}

/// `Σ_nodes w · φ(p, q)` with the tensor trapezoid weights of the grid.
fn quadrature(p: &GridDensity, q: &GridDensity, phi: impl Fn(f64, f64) -> f64) -> f64 {
    p.quadrature()
        .iter()
        .zip(p.values().iter().zip(q.values()))
        .map(|((_, w), (&a, &b))| w * phi(a, b))
        .sum()
}

/// `(∫ (p − q)²)^{1/2}`.
pub fn l2_distance(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_same_grid(p, q)?;
    Ok(quadrature(p, q, |a, b| (a - b) * (a - b)).sqrt())
}

/// `∫ (p/q − 1)² q`.
pub fn chi2_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_same_grid(p, q)?;
    Ok(quadrature(p, q, |a, b| (a - b) * (a - b) / b))
}

/// `∫ p log(p/q)`.
pub fn kl_divergence(p: &GridDensity, q: &GridDensity) -> Result<f64> {
    check_same_grid(p, q)?;
    Ok(quadrature(p, q, |a, b| a * (a / b).ln()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WassersteinOrder {
    One,
    Two,
    Infinity,
}

impl std::str::FromStr for WassersteinOrder {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "inf" | "infinity" => Ok(Self::Infinity),
            _ => Err(FlowError::argument(format!("unknown Wasserstein order {s:?}"))),
        }
    }
}

/// Largest sample count accepted by [`wasserstein`].
pub const MAX_SAMPLES: usize = 4096;
/// Largest sample count for the exact assignment in two or more dimensions.
pub const MAX_ASSIGNMENT_SAMPLES: usize = 256;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Wasserstein distance between two equally weighted sample sets of the
/// same size: exact sorted coupling in one dimension, exact assignment
/// (bottleneck matching for order ∞) otherwise.
pub fn wasserstein(p: &[Vec<f64>], q: &[Vec<f64>], order: WassersteinOrder) -> Result<f64> {
    let n = p.len();
    if n == 0 || n != q.len() {
        return Err(FlowError::argument(format!(
            "sample sets must be nonempty and equally sized, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    let d = p[0].len();
    if d == 0 || p.iter().chain(q).any(|x| x.len() != d) {
        return Err(FlowError::argument("samples have inconsistent dimensions"));
    }
    if p.iter().chain(q).flatten().any(|v| !v.is_finite()) {
        return Err(FlowError::argument("samples must be finite"));
    }
    if n > MAX_SAMPLES {
        return Err(FlowError::Capability(format!(
            "at most {MAX_SAMPLES} samples are supported, got {n}"
        )));
    }
    let pairs: Vec<f64> = if d == 1 {
        let mut a: Vec<f64> = p.iter().map(|x| x[0]).collect();
        let mut b: Vec<f64> = q.iter().map(|x| x[0]).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect()
    } else {
        if n > MAX_ASSIGNMENT_SAMPLES {
            return Err(FlowError::Capability(format!(
                "exact assignment in {d} dimensions supports at most {MAX_ASSIGNMENT_SAMPLES} samples, got {n}"
            )));
        }
        let dist = DMatrix::from_fn(n, n, |i, j| euclidean(&p[i], &q[j]));
        return Ok(match order {
            WassersteinOrder::One => assignment_cost(&dist) / n as f64,
            WassersteinOrder::Two => (assignment_cost(&dist.map(|v| v * v)) / n as f64).sqrt(),
            WassersteinOrder::Infinity => bottleneck(&dist),
        });
    };
    Ok(match order {
        WassersteinOrder::One => pairs.iter().sum::<f64>() / n as f64,
        WassersteinOrder::Two => (pairs.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt(),
        WassersteinOrder::Infinity => pairs.iter().cloned().fold(0.0, f64::max),
    })
}

/// Minimum-cost perfect matching of a square cost matrix (Hungarian method
/// with potentials, `O(n³)`). Returns the total cost.
pub fn assignment_cost(cost: &DMatrix<f64>) -> f64 {
    let n = cost.nrows();
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched[0] = row;
        let mut col0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = matched[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = col0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            col0 = col1;
            if matched[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched[col0] = matched[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[(matched[j] - 1, j - 1)]).sum()
}

/// Whether a perfect matching exists using only edges with `dist ≤ limit`
/// (augmenting paths).
fn has_perfect_matching(dist: &DMatrix<f64>, limit: f64) -> bool {
    let n = dist.nrows();
    let mut match_col: Vec<Option<usize>> = vec![None; n];
    fn augment(
        row: usize,
        dist: &DMatrix<f64>,
        limit: f64,
        seen: &mut [bool],
        match_col: &mut [Option<usize>],
    ) -> bool {
        for col in 0..dist.ncols() {
            if dist[(row, col)] <= limit && !seen[col] {
                seen[col] = true;
                if match_col[col].map_or(true, |r| augment(r, dist, limit, seen, match_col)) {
                    match_col[col] = Some(row);
                    return true;
                }
            }
        }
        false
    }
    (0..n).all(|row| {
        let mut seen = vec![false; n];
        augment(row, dist, limit, &mut seen, &mut match_col)
    })
}

/// Smallest `c` such that a perfect matching uses only pairs at distance
/// `≤ c`: binary search over the sorted pairwise distances.
fn bottleneck(dist: &DMatrix<f64>) -> f64 {
    let mut values: Vec<f64> = dist.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let (mut lo, mut hi) = (0, values.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if has_perfect_matching(dist, values[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    values[lo]
}

/// Outcome of comparing a measured quantity with a theoretical bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckResult {
    pub measured: f64,
    pub bound: f64,
    pub satisfied: bool,
    /// `bound − measured`.
    pub slack: f64,
}

impl BoundCheckResult {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(measured: f64, bound: f64) -> Self {
        Self {
            measured,
            bound,
            satisfied: measured <= bound + Self::TOLERANCE,
            slack: bound - measured,
        }
    }
}

/// `k`-th point of the Halton sequence in `dim` dimensions (`k ≥ 1`).
pub fn halton(k: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    assert!(dim <= PRIMES.len(), "Halton sequence supports up to 12 dimensions");
    PRIMES[..dim]
        .iter()
        .map(|&base| {
            let (mut f, mut r, mut i) = (1.0, 0.0, k);
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

/// Sampling sizes for the stability checks; sampled suprema are inflated by
/// `inflation` to absorb the gaps between samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub integrator: IntegratorConfig,
    /// Space-time points for sup-norm estimates of `f − g`.
    pub sup_samples: usize,
    /// Space-time points for the spatial Lipschitz estimate.
    pub lipschitz_samples: usize,
    /// Source samples whose flows are compared.
    pub flow_samples: usize,
    /// Midpoints per axis of the grid on which pushforward densities are compared.
    pub density_grid: usize,
    /// Time levels for the `∫_0^1 (...)² ds` term of the L² bound.
    pub time_levels: usize,
    pub inflation: f64,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig { steps: 40 },
            sup_samples: 10_000,
            lipschitz_samples: 1000,
            flow_samples: 256,
            density_grid: 64,
            time_levels: 11,
            inflation: 1.1,
            seed: 0,
        }
    }
}

/// Space-time Halton points `(y, t)` in the cube, pulled `margin` away from
/// its faces.
fn space_time_points(dim: usize, n: usize, margin: f64) -> Vec<(Vec<f64>, f64)> {
    (1..=n)
        .map(|k| {
            let mut p = halton(k, dim + 1);
            let t = p.pop().expect("dim + 1 coordinates");
            let y = p.into_iter().map(|v| margin + (1.0 - 2.0 * margin) * v).collect();
            (y, t)
        })
        .collect()
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

/// Grönwall check of the flow-map bound `sup_x |X_f(x,1) − X_g(x,1)| ≤ ε e^L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    #[serde(flatten)]
    pub check: BoundCheckResult,
    /// Inflated sampled `sup |f − g|`.
    pub epsilon: f64,
    /// Inflated sampled spatial Lipschitz constant of `f`.
    pub lipschitz: f64,
}

pub fn verify_gronwall(
    f: &dyn VelocityField,
    g: &dyn VelocityField,
    source: &GridDensity,
    cfg: &StabilityConfig,
) -> Result<GronwallReport> {
    let d = f.dim();
    if g.dim() != d || source.dim() != d {
        return Err(FlowError::argument("fields and source must share a dimension"));
    }
    // Keep Jacobian probes clear of the boundary so finite-difference fields work.
    let margin = 1e-4;
    let eps_terms: Vec<f64> = space_time_points(d, cfg.sup_samples, margin)
        .par_iter()
        .map(|(y, t)| {
            let (a, b) = (f.velocity(y, *t)?, g.velocity(y, *t)?);
            Ok(euclidean(&a, &b))
        })
        .collect::<Result<_>>()?;
    let lip_terms: Vec<f64> = space_time_points(d, cfg.lipschitz_samples, margin)
        .par_iter()
        .map(|(y, t)| Ok(spatial_block(&f.jacobian(y, *t)?).singular_values().max()))
        .collect::<Result<_>>()?;
    let epsilon = cfg.inflation * max_of(eps_terms);
    let lipschitz = cfg.inflation * max_of(lip_terms);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = source.sample(&mut rng, cfg.flow_samples);
    let deviations: Vec<f64> = starts
        .par_iter()
        .map(|x| {
            let a = integrate_flow(f, x, 1.0, &cfg.integrator)?;
            let b = integrate_flow(g, x, 1.0, &cfg.integrator)?;
            Ok(euclidean(&a, &b))
        })
        .collect::<Result<_>>()?;
    Ok(GronwallReport {
        check: BoundCheckResult::new(max_of(deviations), epsilon * lipschitz.exp()),
        epsilon,
        lipschitz,
    })
}

/// Pushforward density `η(y, 1)` of `π` under the time-one flow of `field`
/// at the midpoints of an `n^d` grid, by backward characteristics.
pub fn pushforward_on_midpoints(
    field: &dyn VelocityField,
    source: &GridDensity,
    n: usize,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let d = field.dim();
    let total = n.pow(d as u32);
    (0..total)
        .into_par_iter()
        .map(|flat| {
            let y = midpoint(flat, d, n);
            let (x0, div) = integrate_backward_with_divergence(field, &y, cfg)?;
            let (density, _) = source.eval_clamped(&x0);
            Ok(density * (-div).exp())
        })
        .collect()
}

fn midpoint(flat: usize, d: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; d];
    let mut rest = flat;
    for k in (0..d).rev() {
        y[k] = ((rest % n) as f64 + 0.5) / n as f64;
        rest /= n;
    }
    y
}

/// Density of the displacement interpolation `T_s♯π` at `y`:
/// `π(x) / det((1 − s) I + s ∇T(x))` with `T_s(x) = y`.
pub fn interpolated_density(field: &StraightLineField, y: &[f64], s: f64) -> Result<f64> {
    let (x, _) = field.preimage(y, s)?;
    let map = field.map();
    let jac = map.jacobian(&x)?;
    let d = x.len();
    let m = DMatrix::identity(d, d) * (1.0 - s) + jac * s;
    Ok(map.source().eval(&x)? / m.determinant())
}

/// L² stability check of the pushforward under a perturbed field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2StabilityReport {
    #[serde(flatten)]
    pub check: BoundCheckResult,
    /// Inflated sampled `max(sup |f − g|, sup |∇(f − g)|)` (entrywise).
    pub delta: f64,
    /// Inflated sampled `sup |∇·g|`.
    pub divergence: f64,
    /// `∫_0^1 (sup |∇η_f(·,s)| + sup η_f(·,s))² ds`.
    pub density_term: f64,
}

/// Checks `d²_{L²}(η_g(·,1), η_f(·,1)) ≤ d² δ² ∫_0^1 (‖∇η_f‖∞ + ‖η_f‖∞)² ds · e^{1 + ‖∇·g‖∞}`.
///
/// `η_g` and `η_f` are both computed by backward characteristics on the same
/// midpoint grid, so the measured side vanishes exactly when `g = f`.
pub fn verify_l2_stability(
    f: &StraightLineField,
    g: &dyn VelocityField,
    cfg: &StabilityConfig,
) -> Result<L2StabilityReport> {
    let d = f.dim();
    if g.dim() != d {
        return Err(FlowError::argument("fields must share a dimension"));
    }
    let source = f.map().source();
    let margin = 1e-3;

    let diffs: Vec<(f64, f64)> = space_time_points(d, cfg.sup_samples, margin)
        .par_iter()
        .map(|(y, t)| {
            let (fv, gv) = (f.velocity(y, *t)?, g.velocity(y, *t)?);
            let (fj, gj) = (f.jacobian(y, *t)?, g.jacobian(y, *t)?);
            let value = fv.iter().zip(&gv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let grad = spatial_block(&(fj - &gj)).abs().max();
            Ok((value.max(grad), divergence_from(&gj).abs()))
        })
        .collect::<Result<_>>()?;
    let delta = cfg.inflation * max_of(diffs.iter().map(|p| p.0));
    let divergence = cfg.inflation * max_of(diffs.iter().map(|p| p.1));

    // sup_y |∇η_f(y, s)| and sup_y η_f(y, s) on a Halton sample per time level.
    let levels = cfg.time_levels.max(2);
    let probes: Vec<Vec<f64>> = (1..=cfg.lipschitz_samples.max(1))
        .map(|k| halton(k, d).into_iter().map(|v| 0.01 + 0.98 * v).collect())
        .collect();
    let h = 1e-4;
    let per_level: Vec<f64> = (0..levels)
        .into_par_iter()
        .map(|i| {
            let s = i as f64 / (levels - 1) as f64;
            let mut sup_eta: f64 = 0.0;
            let mut sup_grad: f64 = 0.0;
            for y in &probes {
                sup_eta = sup_eta.max(interpolated_density(f, y, s)?);
                let mut g2 = 0.0;
                for k in 0..d {
                    let (mut yp, mut ym) = (y.clone(), y.clone());
                    yp[k] += h;
                    ym[k] -= h;
                    let dk = (interpolated_density(f, &yp, s)? - interpolated_density(f, &ym, s)?)
                        / (2.0 * h);
                    g2 += dk * dk;
                }
                sup_grad = sup_grad.max(g2.sqrt());
            }
            let term = cfg.inflation * (sup_grad + sup_eta);
            Ok(term * term)
        })
        .collect::<Result<_>>()?;
    let ds = 1.0 / (levels - 1) as f64;
    let density_term = ds
        * (per_level.iter().sum::<f64>() - 0.5 * (per_level[0] + per_level[levels - 1]));

    let n = cfg.density_grid;
    let eta_f = pushforward_on_midpoints(f, source, n, &cfg.integrator)?;
    let eta_g = pushforward_on_midpoints(g, source, n, &cfg.integrator)?;
    let cell = (n as f64).powi(-(d as i32));
    let measured = cell * eta_f.iter().zip(&eta_g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();

    let dd = d as f64;
    let bound = dd * dd * delta * delta * density_term * (1.0 + divergence).exp();
    Ok(L2StabilityReport {
        check: BoundCheckResult::new(measured, bound),
        delta,
        divergence,
        density_term,
    })
}
