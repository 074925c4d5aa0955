//! Calibrated data-generating processes and the Monte Carlo harness.
//!
//! Both DGPs draw a binary instrument, a binary exposure from a logistic
//! first stage, and an outcome whose conditional mean has an X·Z
//! interaction. The interaction (and, for the logistic outcome, the
//! intercept) is solved so that the violation `E[Y₀|Z=1]` vs `E[Y₀|Z=0]`
//! on the link scale equals the requested α*.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::sensitivity::{FitOptions, FitStatus, ProfileFit};
use crate::smm::{expit, logit, Link, SmmSpec};

/// Coefficients held fixed during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedCoefficients {
    /// Ignored by the logistic calibration, which solves for it.
    pub beta_0: f64,
    pub beta_x: f64,
    pub beta_z: f64,
    pub gamma_0: f64,
}

impl Default for FixedCoefficients {
    fn default() -> Self {
        FixedCoefficients {
            beta_0: 1.0,
            beta_x: 1.0,
            beta_z: 1.0,
            gamma_0: -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDgpConfig {
    pub p_z: f64,
    pub gamma_0: f64,
    pub gamma_z: f64,
    pub beta_0: f64,
    pub beta_x: f64,
    pub beta_z: f64,
    pub beta_xz: f64,
    pub sigma: f64,
    pub psi: f64,
    pub alpha_star: f64,
}

impl LinearDgpConfig {
    fn exposure_probs(&self) -> (f64, f64) {
        (expit(self.gamma_0), expit(self.gamma_0 + self.gamma_z))
    }

    /// `E[Y₀|Z=1] − E[Y₀|Z=0]` implied by the coefficients.
    pub fn implied_alpha_star(&self) -> f64 {
        let (e0, e1) = self.exposure_probs();
        linear_violation(
            self.beta_0,
            self.beta_x,
            self.beta_z,
            self.beta_xz,
            self.psi,
            e0,
            e1,
        )
    }

    pub fn implied_p_x(&self) -> f64 {
        let (e0, e1) = self.exposure_probs();
        (1.0 - self.p_z) * e0 + self.p_z * e1
    }

    /// Population `cov(X, Z) / var(Z)`; for binary Z this is
    /// `P(X=1|Z=1) − P(X=1|Z=0)`.
    pub fn beta_xz_population(&self) -> f64 {
        let (e0, e1) = self.exposure_probs();
        e1 - e0
    }

    fn validate(&self) -> Result<()> {
        if !(self.p_z > 0.0 && self.p_z < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p_z = {} not in (0, 1)",
                self.p_z
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma = {} must be positive",
                self.sigma
            )));
        }
        Ok(())
    }
}

fn linear_violation(b0: f64, bx: f64, bz: f64, bxz: f64, psi: f64, e0: f64, e1: f64) -> f64 {
    (b0 + bz) * (1.0 - e1) + (b0 + bx + bz + bxz - psi) * e1
        - b0 * (1.0 - e0)
        - (b0 + bx - psi) * e0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticDgpConfig {
    pub p_z: f64,
    pub gamma_0: f64,
    pub gamma_z: f64,
    pub beta_0: f64,
    pub beta_x: f64,
    pub beta_z: f64,
    pub beta_xz: f64,
    pub psi: f64,
    pub alpha_star: f64,
    pub p_y: f64,
    pub p_x: f64,
}

impl LogisticDgpConfig {
    fn exposure_probs(&self) -> (f64, f64) {
        (expit(self.gamma_0), expit(self.gamma_0 + self.gamma_z))
    }

    /// `logit P(Y₀=1|Z=1) − logit P(Y₀=1|Z=0)` implied by the coefficients.
    pub fn implied_alpha_star(&self) -> f64 {
        let (e0, e1) = self.exposure_probs();
        logistic_violation(
            self.beta_0,
            self.beta_x,
            self.beta_z,
            self.beta_xz,
            self.psi,
            e0,
            e1,
        )
    }

    pub fn implied_p_y(&self) -> f64 {
        let (e0, e1) = self.exposure_probs();
        logistic_marginal_y(
            self.beta_0,
            self.beta_x,
            self.beta_z,
            self.beta_xz,
            self.p_z,
            e0,
            e1,
        )
    }

    pub fn implied_p_x(&self) -> f64 {
        let (e0, e1) = self.exposure_probs();
        (1.0 - self.p_z) * e0 + self.p_z * e1
    }

    fn validate(&self) -> Result<()> {
        if !(self.p_z > 0.0 && self.p_z < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p_z = {} not in (0, 1)",
                self.p_z
            )));
        }
        Ok(())
    }
}

/// `P(Y₀ = 1 | Z = z)` for the logistic DGP.
fn logistic_y0_given_z(b0: f64, bx: f64, bz: f64, bxz: f64, psi: f64, z: f64, e_z: f64) -> f64 {
    expit(b0 + bz * z) * (1.0 - e_z) + expit(b0 + bx + bz * z + bxz * z - psi) * e_z
}

fn logistic_violation(b0: f64, bx: f64, bz: f64, bxz: f64, psi: f64, e0: f64, e1: f64) -> f64 {
    logit(logistic_y0_given_z(b0, bx, bz, bxz, psi, 1.0, e1))
        - logit(logistic_y0_given_z(b0, bx, bz, bxz, psi, 0.0, e0))
}

fn logistic_marginal_y(b0: f64, bx: f64, bz: f64, bxz: f64, p_z: f64, e0: f64, e1: f64) -> f64 {
    let given_z0 = (1.0 - e0) * expit(b0) + e0 * expit(b0 + bx);
    let given_z1 = (1.0 - e1) * expit(b0 + bz) + e1 * expit(b0 + bx + bz + bxz);
    (1.0 - p_z) * given_z0 + p_z * given_z1
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} = {p} not in (0, 1)"
        )))
    }
}

/// Solves `γ_z` so that `P(X = 1) = p_x` given `γ_0` and `p_z`.
pub fn solve_gamma_z(p_z: f64, p_x: f64, gamma_0: f64) -> Result<f64> {
    check_probability("p_z", p_z)?;
    check_probability("p_x", p_x)?;
    let e1 = (p_x - (1.0 - p_z) * expit(gamma_0)) / p_z;
    if !(e1 > 0.0 && e1 < 1.0) {
        return Err(Error::Unreachable(format!(
            "P(X=1|Z=1) would be {e1:.6} for p_x = {p_x}, p_z = {p_z}, gamma_0 = {gamma_0}"
        )));
    }
    Ok(logit(e1) - gamma_0)
}

pub fn calibrate_linear(
    psi: f64,
    alpha_star: f64,
    p_z: f64,
    p_x: f64,
    fixed: &FixedCoefficients,
    sigma: f64,
) -> Result<LinearDgpConfig> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma = {sigma} must be positive"
        )));
    }
    let gamma_z = solve_gamma_z(p_z, p_x, fixed.gamma_0)?;
    let e0 = expit(fixed.gamma_0);
    let e1 = expit(fixed.gamma_0 + gamma_z);
    // the violation is affine in β_xz with slope e1
    let at_zero = linear_violation(fixed.beta_0, fixed.beta_x, fixed.beta_z, 0.0, psi, e0, e1);
    let beta_xz = (alpha_star - at_zero) / e1;
    Ok(LinearDgpConfig {
        p_z,
        gamma_0: fixed.gamma_0,
        gamma_z,
        beta_0: fixed.beta_0,
        beta_x: fixed.beta_x,
        beta_z: fixed.beta_z,
        beta_xz,
        sigma,
        psi,
        alpha_star,
    })
}

const CALIBRATION_MAX_ITERATIONS: usize = 200;
const CALIBRATION_TOLERANCE: f64 = 1e-10;

/// Solves `(β_0, β_xz)` by damped Newton so the logistic DGP has
/// `P(Y = 1) = p_y` and violation α*.
pub fn calibrate_logistic(
    psi: f64,
    alpha_star: f64,
    p_z: f64,
    p_x: f64,
    p_y: f64,
    fixed: &FixedCoefficients,
) -> Result<LogisticDgpConfig> {
    check_probability("p_y", p_y)?;
    let gamma_z = solve_gamma_z(p_z, p_x, fixed.gamma_0)?;
    let e0 = expit(fixed.gamma_0);
    let e1 = expit(fixed.gamma_0 + gamma_z);
    let (bx, bz) = (fixed.beta_x, fixed.beta_z);

    let residual = |u: [f64; 2]| -> [f64; 2] {
        [
            logistic_marginal_y(u[0], bx, bz, u[1], p_z, e0, e1) - p_y,
            logistic_violation(u[0], bx, bz, u[1], psi, e0, e1) - alpha_star,
        ]
    };
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());

    let mut u = [logit(p_y), 0.0];
    let mut r = residual(u);
    for _ in 0..CALIBRATION_MAX_ITERATIONS {
        if !(norm(r) > 1e-14) {
            break;
        }
        let mut jac = Matrix::zeros(2, 2);
        for j in 0..2 {
            let h = 1e-6 * (1.0 + u[j].abs());
            let (mut up, mut down) = (u, u);
            up[j] += h;
            down[j] -= h;
            let (ru, rd) = (residual(up), residual(down));
            for i in 0..2 {
                jac[(i, j)] = (ru[i] - rd[i]) / (2.0 * h);
            }
        }
        let step = match jac.solve(&[-r[0], -r[1]]) {
            Ok(s) => s,
            Err(_) => break,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = [u[0] + t * step[0], u[1] + t * step[1]];
            let rc = residual(candidate);
            if rc.iter().all(|v| v.is_finite()) && norm(rc) < norm(r) {
                u = candidate;
                r = rc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !(norm(r) <= CALIBRATION_TOLERANCE) {
        if u.iter().any(|v| v.abs() > 30.0) {
            // the iterates ran off to infinity: the targets sit outside the
            // range the mixture can attain
            return Err(Error::Unreachable(format!(
                "alpha* = {alpha_star} with p_y = {p_y} is not attainable for P(X=1|Z=1) = {e1:.4}"
            )));
        }
        return Err(Error::NoConvergence(format!(
            "logistic calibration residual {:.3e} for psi = {psi}, alpha* = {alpha_star}, p_y = {p_y}",
            norm(r)
        )));
    }
    Ok(LogisticDgpConfig {
        p_z,
        gamma_0: fixed.gamma_0,
        gamma_z,
        beta_0: u[0],
        beta_x: bx,
        beta_z: bz,
        beta_xz: u[1],
        psi,
        alpha_star,
        p_y,
        p_x,
    })
}

fn draw_instrument_and_exposure<R: Rng>(
    rng: &mut R,
    p_z: f64,
    gamma_0: f64,
    gamma_z: f64,
) -> (f64, f64) {
    let z = if rng.random::<f64>() < p_z { 1.0 } else { 0.0 };
    let x = if rng.random::<f64>() < expit(gamma_0 + gamma_z * z) {
        1.0
    } else {
        0.0
    };
    (z, x)
}

/// Normal outcome DGP. Deterministic given `seed`.
pub fn generate_linear(config: &LinearDgpConfig, n: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y, mut x, mut z) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let (zi, xi) =
            draw_instrument_and_exposure(&mut rng, config.p_z, config.gamma_0, config.gamma_z);
        let mean =
            config.beta_0 + config.beta_x * xi + config.beta_z * zi + config.beta_xz * xi * zi;
        let noise: f64 = rng.sample(StandardNormal);
        y.push(mean + config.sigma * noise);
        x.push(xi);
        z.push(zi);
    }
    Dataset::new(y, x, z)
}

/// Bernoulli outcome DGP. Deterministic given `seed`.
pub fn generate_logistic(config: &LogisticDgpConfig, n: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y, mut x, mut z) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let (zi, xi) =
            draw_instrument_and_exposure(&mut rng, config.p_z, config.gamma_0, config.gamma_z);
        let eta =
            config.beta_0 + config.beta_x * xi + config.beta_z * zi + config.beta_xz * xi * zi;
        y.push(if rng.random::<f64>() < expit(eta) {
            1.0
        } else {
            0.0
        });
        x.push(xi);
        z.push(zi);
    }
    Dataset::new(y, x, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DgpConfig {
    Linear(LinearDgpConfig),
    Logistic(LogisticDgpConfig),
}

impl DgpConfig {
    pub fn psi(&self) -> f64 {
        match self {
            DgpConfig::Linear(c) => c.psi,
            DgpConfig::Logistic(c) => c.psi,
        }
    }

    pub fn alpha_star(&self) -> f64 {
        match self {
            DgpConfig::Linear(c) => c.alpha_star,
            DgpConfig::Logistic(c) => c.alpha_star,
        }
    }

    pub fn link(&self) -> Link {
        match self {
            DgpConfig::Linear(_) => Link::Identity,
            DgpConfig::Logistic(_) => Link::Logit,
        }
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            DgpConfig::Linear(c) => generate_linear(c, n, seed),
            DgpConfig::Logistic(c) => generate_logistic(c, n, seed),
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `r`; a bijection in `r` for fixed `master_seed`.
pub fn replication_seed(master_seed: u64, r: u64) -> u64 {
    mix64(mix64(master_seed) ^ r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub fit: FitOptions,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        MonteCarloOptions {
            fit: FitOptions::default(),
            threads: None,
        }
    }
}

/// Per-α aggregate over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    /// Fraction of all `m` replications whose interval covers ψ.
    pub coverage: f64,
    /// Mean interval length over solved replications.
    pub mean_ci_length: Option<f64>,
    pub mean_est: Option<f64>,
    pub sd_est: Option<f64>,
    pub q25: Option<f64>,
    pub q50: Option<f64>,
    pub q75: Option<f64>,
    pub n_solved: usize,
    pub n_no_solution: usize,
    pub n_singular: usize,
    /// Replications whose nuisance fit failed (e.g. separation).
    pub n_nuisance_failed: usize,
}

impl AlphaSummary {
    pub fn n_failed(&self) -> usize {
        self.n_no_solution + self.n_singular + self.n_nuisance_failed
    }

    /// Monte Carlo standard error of `mean_est`.
    pub fn mean_est_se(&self) -> Option<f64> {
        self.sd_est.map(|s| s / (self.n_solved as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub psi: f64,
    pub alpha_star: f64,
    pub grid: Vec<f64>,
    pub rows: Vec<AlphaSummary>,
    pub m: usize,
    pub n: usize,
    pub master_seed: u64,
}

impl MonteCarloReport {
    pub fn row_at(&self, alpha: f64) -> Option<&AlphaSummary> {
        self.rows.iter().find(|r| (r.alpha - alpha).abs() < 1e-9)
    }
}

#[derive(Debug, Clone)]
enum Replication {
    Fitted(Vec<(FitStatus, Option<f64>, Option<(f64, f64)>)>),
    NuisanceFailed,
}

fn run_replication(
    config: &DgpConfig,
    spec: &SmmSpec,
    n: usize,
    grid: &[f64],
    seed: u64,
    fit: &FitOptions,
) -> Result<Replication> {
    let data = config.generate(n, seed)?;
    let profile = match ProfileFit::new(&data, spec) {
        Ok(p) => p,
        Err(Error::Separation { .. } | Error::RankDeficient(_) | Error::WeakInstrument(_)) => {
            return Ok(Replication::NuisanceFailed)
        }
        Err(e) => return Err(e),
    };
    let mut out = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let g = match profile.fit(alpha, fit) {
            Ok(g) => g,
            Err(Error::NonFinite(_)) => {
                out.push((FitStatus::SingularCovariance, None, None));
                continue;
            }
            Err(e) => return Err(e),
        };
        out.push((g.status, g.psi, g.ci));
    }
    Ok(Replication::Fitted(out))
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn run_monte_carlo(
    config: &DgpConfig,
    spec: &SmmSpec,
    n: usize,
    m: usize,
    grid: &[f64],
    master_seed: u64,
) -> Result<MonteCarloReport> {
    run_monte_carlo_with(
        config,
        spec,
        n,
        m,
        grid,
        master_seed,
        &MonteCarloOptions::default(),
    )
}

/// Replications run in parallel; each draws its data from
/// [`replication_seed`] and results are aggregated in replication order,
/// so the report does not depend on the thread count.
pub fn run_monte_carlo_with(
    config: &DgpConfig,
    spec: &SmmSpec,
    n: usize,
    m: usize,
    grid: &[f64],
    master_seed: u64,
    options: &MonteCarloOptions,
) -> Result<MonteCarloReport> {
    if spec.link == Link::Log {
        return Err(Error::UnsupportedCombination(
            "no calibrated data-generating process exists for the log link".into(),
        ));
    }
    if spec.link != config.link() {
        return Err(Error::UnsupportedCombination(format!(
            "{} link cannot be fitted to data from the {} DGP",
            spec.link,
            config.link()
        )));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("m and n must be at least 1".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("α grid is empty".into()));
    }

    let work = || -> Result<Vec<Replication>> {
        (0..m as u64)
            .into_par_iter()
            .map(|r| {
                run_replication(
                    config,
                    spec,
                    n,
                    grid,
                    replication_seed(master_seed, r),
                    &options.fit,
                )
            })
            .collect()
    };
    let replications = match options.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let psi = config.psi();
    let rows = grid
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let mut summary = AlphaSummary {
                alpha,
                coverage: 0.0,
                mean_ci_length: None,
                mean_est: None,
                sd_est: None,
                q25: None,
                q50: None,
                q75: None,
                n_solved: 0,
                n_no_solution: 0,
                n_singular: 0,
                n_nuisance_failed: 0,
            };
            let mut covered = 0usize;
            let mut lengths = Vec::new();
            let mut estimates = Vec::new();
            for rep in &replications {
                match rep {
                    Replication::NuisanceFailed => summary.n_nuisance_failed += 1,
                    Replication::Fitted(points) => match points[k] {
                        (FitStatus::Solved, Some(est), Some((lo, hi))) => {
                            summary.n_solved += 1;
                            if lo <= psi && psi <= hi {
                                covered += 1;
                            }
                            lengths.push(hi - lo);
                            estimates.push(est);
                        }
                        (FitStatus::SingularCovariance, ..) => summary.n_singular += 1,
                        _ => summary.n_no_solution += 1,
                    },
                }
            }
            summary.coverage = covered as f64 / m as f64;
            if !estimates.is_empty() {
                let count = estimates.len() as f64;
                let mean = estimates.iter().sum::<f64>() / count;
                summary.mean_ci_length = Some(lengths.iter().sum::<f64>() / count);
                summary.mean_est = Some(mean);
                summary.sd_est = (estimates.len() > 1).then(|| {
                    (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (count - 1.0))
                        .sqrt()
                });
                estimates.sort_by(f64::total_cmp);
                summary.q25 = Some(quantile_sorted(&estimates, 0.25));
                summary.q50 = Some(quantile_sorted(&estimates, 0.5));
                summary.q75 = Some(quantile_sorted(&estimates, 0.75));
            }
            summary
        })
        .collect();

    Ok(MonteCarloReport {
        psi,
        alpha_star: config.alpha_star(),
        grid: grid.to_vec(),
        rows,
        m,
        n,
        master_seed,
    })
}
