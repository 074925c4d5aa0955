//! Stacked estimating equations and sandwich covariance.
//!
//! A [`StackedSystem`] is a per-observation vector function `Q(row; θ, α)`
//! whose sample mean is zero at the estimate. The bread matrix is the
//! negative mean Jacobian (central differences), the meat the mean outer
//! product, and the covariance `n⁻¹ A⁻¹ B A⁻ᵀ`.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Number of equally spaced points used to scan a bracket for sign changes.
pub const DEFAULT_SCAN_POINTS: usize = 101;

/// Outcome of a bracketed root search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RootSearch {
    Found(ScalarRoot),
    NoSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarRoot {
    pub x: f64,
    /// `f(x)` at the returned root.
    pub residual: f64,
    /// Number of distinct roots located in the bracket.
    pub n_roots: usize,
}

impl RootSearch {
    pub fn root(&self) -> Option<f64> {
        match self {
            RootSearch::Found(r) => Some(r.x),
            RootSearch::NoSolution => None,
        }
    }
}

/// Finds a root of `f` in `bracket` using the default 101-point scan.
pub fn solve_scalar_root<F>(f: F, bracket: (f64, f64), tol: f64) -> Result<RootSearch>
where
    F: FnMut(f64) -> f64,
{
    solve_scalar_root_scan(f, bracket, tol, DEFAULT_SCAN_POINTS)
}

/// Scans `scan_points` equally spaced abscissae for sign changes, refines
/// each with Brent's method and returns the root of smallest magnitude.
/// Sign changes that do not refine to `|f| <= tol` (poles, jumps) are
/// discarded.
pub fn solve_scalar_root_scan<F>(
    mut f: F,
    bracket: (f64, f64),
    tol: f64,
    scan_points: usize,
) -> Result<RootSearch>
where
    F: FnMut(f64) -> f64,
{
    let (lo, hi) = bracket;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "invalid bracket [{lo}, {hi}]"
        )));
    }
    if scan_points < 2 {
        return Err(Error::InvalidArgument(
            "scan needs at least two points".into(),
        ));
    }
    let mut eval = |x: f64| -> Result<f64> {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("f({x}) = {v}")))
        }
    };

    let step = (hi - lo) / (scan_points - 1) as f64;
    let xs: Vec<f64> = (0..scan_points)
        .map(|k| {
            if k == scan_points - 1 {
                hi
            } else {
                lo + step * k as f64
            }
        })
        .collect();
    let mut fs = Vec::with_capacity(scan_points);
    for &x in &xs {
        fs.push(eval(x)?);
    }

    let mut roots: Vec<(f64, f64)> = Vec::new();
    for k in 0..scan_points {
        if fs[k] == 0.0 {
            roots.push((xs[k], 0.0));
            continue;
        }
        if k + 1 < scan_points && fs[k + 1] != 0.0 && fs[k].signum() != fs[k + 1].signum() {
            let (x, fx) = brent(&mut eval, xs[k], xs[k + 1], fs[k], fs[k + 1])?;
            if fx.abs() <= tol {
                roots.push((x, fx));
            }
        }
    }

    let n_roots = roots.len();
    Ok(roots
        .into_iter()
        .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
        .map_or(RootSearch::NoSolution, |(x, residual)| {
            RootSearch::Found(ScalarRoot {
                x,
                residual,
                n_roots,
            })
        }))
}

/// Brent's method on a bracket with `fa`, `fb` of opposite sign. Runs until
/// the bracket collapses to machine precision.
fn brent<F>(eval: &mut F, a: f64, b: f64, fa: f64, fb: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5e-15;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Ok((b, fb));
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = eval(b)?;
    }
    Ok((b, fb))
}

/// Index ranges of the nuisance and target blocks inside θ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub beta_y: Range<usize>,
    pub mu_z: Range<usize>,
    pub psi: Range<usize>,
}

impl Partition {
    pub fn dim(&self) -> usize {
        self.psi.end
    }
}

type QFn<'a> = dyn Fn(&Observation<'_>, &[f64], f64, &mut [f64]) + Send + Sync + 'a;

/// Per-observation stacked estimating function.
pub struct StackedSystem<'a> {
    q_fn: Box<QFn<'a>>,
    dim: usize,
    partition: Partition,
}

impl<'a> StackedSystem<'a> {
    /// `q_fn(row, θ, α, out)` must write exactly `partition.dim()` entries.
    pub fn new<F>(partition: Partition, q_fn: F) -> Self
    where
        F: Fn(&Observation<'_>, &[f64], f64, &mut [f64]) + Send + Sync + 'a,
    {
        StackedSystem {
            dim: partition.dim(),
            q_fn: Box::new(q_fn),
            partition,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn eval(&self, row: &Observation<'_>, theta: &[f64], alpha: f64, out: &mut [f64]) {
        (self.q_fn)(row, theta, alpha, out)
    }

    /// Sample mean of `Q` over `data`.
    pub fn mean(&self, data: &Dataset, theta: &[f64], alpha: f64) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut acc = vec![0.0; self.dim];
        let mut q = vec![0.0; self.dim];
        for row in data.rows() {
            self.eval(&row, theta, alpha, &mut q);
            for (a, v) in acc.iter_mut().zip(&q) {
                *a += v;
            }
        }
        let n = data.n() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mean estimating function at θ = {theta:?}"
            )));
        }
        Ok(acc)
    }

    /// Max-abs entry of the mean estimating function.
    pub fn residual(&self, data: &Dataset, theta: &[f64], alpha: f64) -> Result<f64> {
        Ok(self
            .mean(data, theta, alpha)?
            .iter()
            .fold(0.0, |m, v| m.max(v.abs())))
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "θ has length {}, system expects {}",
                theta.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

impl fmt::Debug for StackedSystem<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StackedSystem")
            .field("dim", &self.dim)
            .field("partition", &self.partition)
            .finish_non_exhaustive()
    }
}

/// Finite-difference step for coordinate value `t`.
fn fd_step(t: f64) -> f64 {
    (1e-6 * t.abs()).max(1e-6)
}

/// `A = −mean ∂Q/∂θ` by central differences.
pub fn bread_matrix(
    system: &StackedSystem<'_>,
    data: &Dataset,
    theta: &[f64],
    alpha: f64,
) -> Result<Matrix> {
    system.check_theta(theta)?;
    let p = system.dim();
    let mut a = Matrix::zeros(p, p);
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    for j in 0..p {
        let h = fd_step(theta[j]);
        plus[j] = theta[j] + h;
        minus[j] = theta[j] - h;
        let width = plus[j] - minus[j];
        let up = system.mean(data, &plus, alpha)?;
        let down = system.mean(data, &minus, alpha)?;
        for i in 0..p {
            a[(i, j)] = -(up[i] - down[i]) / width;
        }
        plus[j] = theta[j];
        minus[j] = theta[j];
    }
    Ok(a)
}

/// `B = n⁻¹ Σ QᵢQᵢᵀ`.
pub fn meat_matrix(
    system: &StackedSystem<'_>,
    data: &Dataset,
    theta: &[f64],
    alpha: f64,
) -> Result<Matrix> {
    system.check_theta(theta)?;
    let p = system.dim();
    let mut b = Matrix::zeros(p, p);
    let mut q = vec![0.0; p];
    for row in data.rows() {
        system.eval(&row, theta, alpha, &mut q);
        for i in 0..p {
            for j in i..p {
                b[(i, j)] += q[i] * q[j];
            }
        }
    }
    let n = data.n() as f64;
    for i in 0..p {
        for j in i..p {
            let v = b[(i, j)] / n;
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("meat matrix".into()));
    }
    Ok(b)
}

/// Robust covariance of a stacked M-estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichCovariance {
    pub bread: Matrix,
    pub meat: Matrix,
    /// `n⁻¹ A⁻¹ B A⁻ᵀ`, symmetrized.
    pub variance: Matrix,
    pub n: usize,
    /// `max |V − Vᵀ|` before symmetrization.
    pub asymmetry: f64,
}

impl SandwichCovariance {
    pub fn std_error(&self, i: usize) -> f64 {
        self.variance[(i, i)].max(0.0).sqrt()
    }
}

pub fn sandwich_variance(bread: &Matrix, meat: &Matrix, n: usize) -> Result<SandwichCovariance> {
    if !bread.is_square() || bread.rows() != meat.rows() || !meat.is_square() {
        return Err(Error::InvalidArgument(
            "bread and meat must be square and of equal size".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be positive".into(),
        ));
    }
    let a_inv = bread.inverse()?;
    let raw = a_inv
        .matmul(meat)
        .matmul(&a_inv.transpose())
        .scale(1.0 / n as f64);
    let asymmetry = raw.max_abs_diff(&raw.transpose());
    let variance = raw.symmetrized();
    if !variance.is_finite() {
        return Err(Error::NonFinite("sandwich variance".into()));
    }
    Ok(SandwichCovariance {
        bread: bread.clone(),
        meat: meat.clone(),
        variance,
        n,
        asymmetry,
    })
}

/// Two-sided standard-normal quantile `z` with `P(|N| <= z) = level`.
pub fn normal_critical_value(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 * (1.0 + level))
}

/// Wald interval `est ± z·√variance`.
pub fn wald_ci(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} not in (0, 1)"
        )));
    }
    if variance < 0.0 {
        return Err(Error::NegativeVariance(variance));
    }
    if !variance.is_finite() || !estimate.is_finite() {
        return Err(Error::NonFinite("Wald interval inputs".into()));
    }
    let half = normal_critical_value(level) * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_data(y: Vec<f64>) -> Dataset {
        let n = y.len();
        Dataset::new(y, vec![0.0; n], vec![0.0; n]).unwrap()
    }

    fn scalar_partition() -> Partition {
        Partition {
            beta_y: 0..0,
            mu_z: 0..0,
            psi: 0..1,
        }
    }

    #[test]
    fn linear_root() {
        let r = solve_scalar_root(|x| x - 2.0, (0.0, 10.0), 1e-10).unwrap();
        let RootSearch::Found(root) = r else {
            panic!("expected a root")
        };
        assert!((root.x - 2.0).abs() < 1e-12);
        assert_eq!(root.n_roots, 1);
    }

    #[test]
    fn no_real_root() {
        let r = solve_scalar_root(|x| x * x + 1.0, (-5.0, 5.0), 1e-10).unwrap();
        assert_eq!(r, RootSearch::NoSolution);
    }

    #[test]
    fn smallest_magnitude_root_is_chosen() {
        // roots at -3, 0.5 and 4
        let r =
            solve_scalar_root(|x| (x + 3.0) * (x - 0.5) * (x - 4.0), (-10.0, 10.0), 1e-10).unwrap();
        let RootSearch::Found(root) = r else { panic!() };
        assert!((root.x - 0.5).abs() < 1e-12);
        assert_eq!(root.n_roots, 3);
    }

    #[test]
    fn pole_is_not_a_root() {
        let r = solve_scalar_root(|x| 1.0 / (x - 0.3333), (-1.0, 1.0), 1e-10);
        // the pole produces a sign change but never a small residual
        assert!(matches!(
            r,
            Ok(RootSearch::NoSolution) | Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = solve_scalar_root(|x| if x > 1.0 { f64::NAN } else { x }, (-5.0, 5.0), 1e-10);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn bad_bracket() {
        assert!(solve_scalar_root(|x| x, (1.0, 1.0), 1e-10).is_err());
    }

    #[test]
    fn constant_target_bread_is_identity() {
        let data = column_data(vec![0.0; 5]);
        let c = [1.5, -2.0];
        let system = StackedSystem::new(
            Partition {
                beta_y: 0..0,
                mu_z: 0..1,
                psi: 1..2,
            },
            move |_row, theta, _alpha, out| {
                out[0] = c[0] - theta[0];
                out[1] = c[1] - theta[1];
            },
        );
        let a = bread_matrix(&system, &data, &c, 0.0).unwrap();
        assert!(a.max_abs_diff(&Matrix::identity(2)) < 1e-9);
    }

    #[test]
    fn zero_q_gives_zero_meat() {
        let data = column_data(vec![1.0, 2.0, 3.0]);
        let system = StackedSystem::new(scalar_partition(), |_r, _t, _a, out| out[0] = 0.0);
        let b = meat_matrix(&system, &data, &[0.0], 0.0).unwrap();
        assert_eq!(b, Matrix::zeros(1, 1));
    }

    #[test]
    fn identity_sandwich() {
        let v = sandwich_variance(&Matrix::identity(3), &Matrix::identity(3), 100).unwrap();
        assert!(v.variance.max_abs_diff(&Matrix::identity(3).scale(0.01)) < 1e-15);
    }

    #[test]
    fn singular_bread_detected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let err = sandwich_variance(&a, &Matrix::identity(2), 10).unwrap_err();
        assert!(matches!(err, Error::SingularBread { .. }));
    }

    #[test]
    fn plain_mean_sandwich_matches_classical_se() {
        let y: Vec<f64> = (0..57)
            .map(|i| ((i * 37 % 11) as f64).sin() * 3.0 + i as f64 * 0.01)
            .collect();
        let n = y.len();
        let data = column_data(y.clone());
        let system = StackedSystem::new(scalar_partition(), |r, t, _a, out| out[0] = r.y - t[0]);
        let mu = y.iter().sum::<f64>() / n as f64;
        let a = bread_matrix(&system, &data, &[mu], 0.0).unwrap();
        let b = meat_matrix(&system, &data, &[mu], 0.0).unwrap();
        let cov = sandwich_variance(&a, &b, n).unwrap();
        // classical oracle with the n-denominator variance
        let s2 = y.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let se = (s2 / n as f64).sqrt();
        assert!(
            (cov.std_error(0) - se).abs() < 1e-10,
            "{} vs {}",
            cov.std_error(0),
            se
        );
    }

    #[test]
    fn wald_interval() {
        let (lo, hi) = wald_ci(0.0, 1.0, 0.95).unwrap();
        assert!((lo + 1.959964).abs() < 1e-6 && (hi - 1.959964).abs() < 1e-6);
        let (lo, hi) = wald_ci(0.3, 0.49, 0.95).unwrap();
        assert!(((hi - lo) - 2.0 * normal_critical_value(0.95) * 0.7).abs() < 1e-14);
        assert!(matches!(
            wald_ci(0.0, -1.0, 0.95),
            Err(Error::NegativeVariance(_))
        ));
        assert!(wald_ci(0.0, 1.0, 1.0).is_err());
    }
}
