//! G-estimation at a fixed sensitivity value α and sweeps over α grids.
//!
//! Nuisance models are fitted once per dataset (their estimating equations
//! do not involve ψ or α); ψ is then solved from the D·h row alone, and the
//! covariance is evaluated on the full stacked system so nuisance
//! uncertainty propagates into the interval for ψ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::data::{covariance, Dataset};
use crate::error::{Error, Result};
use crate::mestim::{
    bread_matrix, meat_matrix, sandwich_variance, solve_scalar_root_scan, wald_ci, RootSearch,
    SandwichCovariance, StackedSystem, DEFAULT_SCAN_POINTS,
};
use crate::smm::{expit, stacked_system, Link, NuisanceFit, SmmSpec};

/// Threshold below which `|cov(X, Z)|` counts as no first stage.
pub const WEAK_INSTRUMENT_TOLERANCE: f64 = 1e-12;
/// Max-abs mean estimating function tolerated for a `Solved` status.
pub const ROOT_RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Interval scanned for roots of the ψ-row.
    pub bracket: (f64, f64),
    pub scan_points: usize,
    /// Residual tolerance of the scalar root solve.
    pub tol: f64,
    pub level: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bracket: (-10.0, 10.0),
            scan_points: DEFAULT_SCAN_POINTS,
            tol: 1e-10,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Solved,
    NoSolution,
    SingularCovariance,
}

impl FitStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitStatus::Solved => "solved",
            FitStatus::NoSolution => "no_solution",
            FitStatus::SingularCovariance => "singular_covariance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Max-abs mean of the stacked estimating function at θ̂.
    pub root_residual: Option<f64>,
    /// Distinct roots of the ψ-row found in the bracket.
    pub n_roots: usize,
    pub multiple_roots: bool,
}

/// G-estimate of ψ at one value of α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GEstimate {
    pub alpha: f64,
    /// Full parameter vector (nuisance block then ψ); empty without a root.
    pub theta: Vec<f64>,
    pub psi: Option<f64>,
    pub cov: Option<SandwichCovariance>,
    pub ci: Option<(f64, f64)>,
    pub status: FitStatus,
    pub diagnostics: Diagnostics,
}

impl GEstimate {
    pub fn is_solved(&self) -> bool {
        self.status == FitStatus::Solved
    }

    /// Sandwich variance of ψ̂.
    pub fn psi_variance(&self) -> Option<f64> {
        self.cov.as_ref().map(|c| {
            let p = c.variance.rows() - 1;
            c.variance[(p, p)]
        })
    }

    pub fn ci_length(&self) -> Option<f64> {
        self.ci.map(|(lo, hi)| hi - lo)
    }

    /// Whether the interval contains `value`; false without an interval.
    pub fn covers(&self, value: f64) -> bool {
        self.ci.is_some_and(|(lo, hi)| lo <= value && value <= hi)
    }
}

/// Nuisance fits and stacked system for one dataset, reusable across α.
pub struct ProfileFit<'d> {
    data: &'d Dataset,
    spec: SmmSpec,
    nuisance: NuisanceFit,
    system: StackedSystem<'static>,
    d: Vec<f64>,
    /// Link-scale predictor for logit, outcome otherwise.
    base: Vec<f64>,
}

impl<'d> ProfileFit<'d> {
    pub fn new(data: &'d Dataset, spec: &SmmSpec) -> Result<Self> {
        let nuisance = NuisanceFit::fit(data, spec)?;
        let z = data.z();
        if z.iter().all(|&v| v == z[0]) {
            return Err(Error::WeakInstrument(0.0));
        }
        let system = stacked_system(spec, nuisance.instrument.kind);
        let d = data
            .rows()
            .map(|r| r.z - nuisance.instrument.mean(&r))
            .collect();
        let base = match (&nuisance.outcome, spec.link) {
            (Some(model), Link::Logit) => data.rows().map(|r| model.linear_predictor(&r)).collect(),
            _ => data.y().to_vec(),
        };
        Ok(ProfileFit {
            data,
            spec: spec.clone(),
            nuisance,
            system,
            d,
            base,
        })
    }

    pub fn nuisance(&self) -> &NuisanceFit {
        &self.nuisance
    }

    pub fn system(&self) -> &StackedSystem<'static> {
        &self.system
    }

    /// Mean of D·h(ψ; α) with nuisance estimates held fixed.
    pub fn psi_row(&self, psi: f64, alpha: f64) -> f64 {
        let x = self.data.x();
        let z = self.data.z();
        let n = self.data.n();
        let mut acc = 0.0;
        match self.spec.link {
            Link::Identity => {
                for i in 0..n {
                    acc += self.d[i] * (self.base[i] - x[i] * psi - alpha * z[i]);
                }
            }
            Link::Log => {
                for i in 0..n {
                    acc += self.d[i] * self.base[i] * (-x[i] * psi - alpha * z[i]).exp();
                }
            }
            Link::Logit => {
                for i in 0..n {
                    acc += self.d[i] * expit(self.base[i] - x[i] * psi - alpha * z[i]);
                }
            }
        }
        acc / n as f64
    }

    pub fn fit(&self, alpha: f64, options: &FitOptions) -> Result<GEstimate> {
        let search = solve_scalar_root_scan(
            |psi| self.psi_row(psi, alpha),
            options.bracket,
            options.tol,
            options.scan_points,
        )?;
        let root = match search {
            RootSearch::NoSolution => {
                return Ok(GEstimate {
                    alpha,
                    theta: Vec::new(),
                    psi: None,
                    cov: None,
                    ci: None,
                    status: FitStatus::NoSolution,
                    diagnostics: Diagnostics {
                        root_residual: None,
                        n_roots: 0,
                        multiple_roots: false,
                    },
                })
            }
            RootSearch::Found(root) => root,
        };

        let mut theta = self.nuisance.theta_prefix();
        theta.push(root.x);
        let residual = self.system.residual(self.data, &theta, alpha)?;
        let diagnostics = Diagnostics {
            root_residual: Some(residual),
            n_roots: root.n_roots,
            multiple_roots: root.n_roots > 1,
        };
        let mut estimate = GEstimate {
            alpha,
            theta,
            psi: Some(root.x),
            cov: None,
            ci: None,
            status: FitStatus::NoSolution,
            diagnostics,
        };
        if residual > ROOT_RESIDUAL_TOLERANCE {
            return Ok(estimate);
        }

        let bread = bread_matrix(&self.system, self.data, &estimate.theta, alpha)?;
        let meat = meat_matrix(&self.system, self.data, &estimate.theta, alpha)?;
        match sandwich_variance(&bread, &meat, self.data.n()) {
            Ok(cov) => {
                let p = cov.variance.rows() - 1;
                estimate.ci = Some(wald_ci(
                    root.x,
                    cov.variance[(p, p)].max(0.0),
                    options.level,
                )?);
                estimate.cov = Some(cov);
                estimate.status = FitStatus::Solved;
            }
            Err(Error::SingularBread { .. }) | Err(Error::NonFinite(_)) => {
                estimate.status = FitStatus::SingularCovariance;
            }
            Err(e) => return Err(e),
        }
        Ok(estimate)
    }
}

/// G-estimate of ψ at a fixed α with default options.
pub fn fit_g_estimator(data: &Dataset, spec: &SmmSpec, alpha: f64) -> Result<GEstimate> {
    fit_g_estimator_with(data, spec, alpha, &FitOptions::default())
}

pub fn fit_g_estimator_with(
    data: &Dataset,
    spec: &SmmSpec,
    alpha: f64,
    options: &FitOptions,
) -> Result<GEstimate> {
    ProfileFit::new(data, spec)?.fit(alpha, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub fit: FitOptions,
    /// Evaluate grid points on the rayon pool.
    pub parallel: bool,
    /// Re-center the scan bracket on the previous solution. Ignored when
    /// `parallel` is set, since results would then depend on scheduling.
    pub warm_start: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            fit: FitOptions::default(),
            parallel: false,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub entries: Vec<GEstimate>,
    /// Smallest and largest α with a solved fit.
    pub solvable_range: Option<(f64, f64)>,
}

/// The grid `{center − half_width + k·step}` up to `center + half_width`.
/// The default grid is 21 points at step 0.02 over `center ± 0.2`.
pub fn alpha_grid(center: f64, half_width: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(half_width >= 0.0) || !center.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "invalid grid: center {center}, half-width {half_width}, step {step}"
        )));
    }
    let count = (2.0 * half_width / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| {
            let v = center - half_width + k as f64 * step;
            // drop accumulated rounding so labels print as 0.3, not 0.30000000000000004
            (v * 1e12).round() / 1e12
        })
        .collect())
}

pub fn default_alpha_grid(center: f64) -> Vec<f64> {
    alpha_grid(center, 0.2, 0.02).expect("valid default grid")
}

pub fn sweep_alpha(data: &Dataset, spec: &SmmSpec, grid: &[f64]) -> Result<SweepResult> {
    sweep_alpha_with(data, spec, grid, &SweepOptions::default())
}

pub fn sweep_alpha_with(
    data: &Dataset,
    spec: &SmmSpec,
    grid: &[f64],
    options: &SweepOptions,
) -> Result<SweepResult> {
    validate_grid(grid)?;
    let profile = ProfileFit::new(data, spec)?;
    let entries: Vec<GEstimate> = if options.parallel {
        grid.par_iter()
            .map(|&a| profile.fit(a, &options.fit))
            .collect::<Result<_>>()?
    } else {
        let mut out = Vec::with_capacity(grid.len());
        let mut fit_options = options.fit.clone();
        let width = options.fit.bracket.1 - options.fit.bracket.0;
        for &alpha in grid {
            let estimate = profile.fit(alpha, &fit_options)?;
            if options.warm_start {
                if let Some(psi) = estimate.psi {
                    fit_options.bracket = (psi - 0.5 * width, psi + 0.5 * width);
                }
            }
            out.push(estimate);
        }
        out
    };
    let solved: Vec<f64> = entries
        .iter()
        .filter(|e| e.is_solved())
        .map(|e| e.alpha)
        .collect();
    let solvable_range = solved.first().zip(solved.last()).map(|(a, b)| (*a, *b));
    Ok(SweepResult {
        grid: grid.to_vec(),
        entries,
        solvable_range,
    })
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("α grid is empty".into()));
    }
    if grid.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument(
            "α grid contains non-finite values".into(),
        ));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "α grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `ψ = β̂_YZ/β̂_XZ − α/β̂_XZ` from sample covariance ratios (identity link,
/// no covariates).
pub fn closed_form_linear(data: &Dataset, alpha: f64) -> Result<f64> {
    let (x, y, z) = (data.x(), data.y(), data.z());
    let cov_xz = covariance(x, z);
    if cov_xz.abs() < WEAK_INSTRUMENT_TOLERANCE {
        return Err(Error::WeakInstrument(cov_xz.abs()));
    }
    let var_z = covariance(z, z);
    let beta_xz = cov_xz / var_z;
    let beta_yz = covariance(y, z) / var_z;
    Ok(beta_yz / beta_xz - alpha / beta_xz)
}

/// Single sensitivity parameter from a direct instrument effect `δ1` and a
/// confounding-induced association `δ2`, both on the link scale.
pub fn compose_alpha(direct_effect: f64, confounding: f64) -> f64 {
    direct_effect + confounding
}

/// Asymptotic bias `β_YZ.L / β_XZ.L` of the uncorrected G-estimator.
pub fn asymptotic_bias_linear(beta_yz_l: f64, beta_xz_l: f64) -> Result<f64> {
    if beta_xz_l.abs() < WEAK_INSTRUMENT_TOLERANCE {
        return Err(Error::WeakInstrument(beta_xz_l.abs()));
    }
    Ok(beta_yz_l / beta_xz_l)
}

/// First-stage relevance: least squares of X on (1, Z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCheck {
    pub f_stat: f64,
    pub coef: f64,
    pub ci: (f64, f64),
    pub df: (usize, usize),
    pub p_value: f64,
    /// X is an exact affine function of Z; the F statistic is infinite.
    pub perfect_collinearity: bool,
}

pub fn relevance_check(data: &Dataset) -> Result<RelevanceCheck> {
    let n = data.n();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "relevance check needs n >= 3, got {n}"
        )));
    }
    let (x, z) = (data.x(), data.z());
    let szz = covariance(z, z) * n as f64;
    if !(szz > 0.0) {
        return Err(Error::RankDeficient("instrument column is constant".into()));
    }
    let coef = covariance(x, z) * n as f64 / szz;
    let x_mean = x.iter().sum::<f64>() / n as f64;
    let z_mean = z.iter().sum::<f64>() / n as f64;
    let intercept = x_mean - coef * z_mean;
    let rss: f64 = x
        .iter()
        .zip(z)
        .map(|(xi, zi)| (xi - intercept - coef * zi).powi(2))
        .sum();
    let tss: f64 = x.iter().map(|xi| (xi - x_mean).powi(2)).sum();
    let df_resid = n - 2;
    let t_quantile = StudentsT::new(0.0, 1.0, df_resid as f64)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.975);

    if rss <= 1e-24 * tss.max(f64::MIN_POSITIVE) || rss == 0.0 {
        return Ok(RelevanceCheck {
            f_stat: f64::INFINITY,
            coef,
            ci: (coef, coef),
            df: (1, df_resid),
            p_value: 0.0,
            perfect_collinearity: true,
        });
    }
    let sigma2 = rss / df_resid as f64;
    let se = (sigma2 / szz).sqrt();
    let f_stat = (coef / se).powi(2);
    let p_value = FisherSnedecor::new(1.0, df_resid as f64)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sf(f_stat);
    Ok(RelevanceCheck {
        f_stat,
        coef,
        ci: (coef - t_quantile * se, coef + t_quantile * se),
        df: (1, df_resid),
        p_value,
        perfect_collinearity: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            vec![1.2, 0.3, 2.5, 1.1, 0.7, 3.0, 0.2, 1.9],
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn closed_form_at_zero_is_wald_ratio() {
        let d = toy();
        let wald = covariance(d.y(), d.z()) / covariance(d.x(), d.z());
        assert!((closed_form_linear(&d, 0.0).unwrap() - wald).abs() < 1e-14);
    }

    #[test]
    fn closed_form_identity_columns() {
        let z = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        let d = Dataset::new(z.clone(), z.clone(), z).unwrap();
        assert!((closed_form_linear(&d, 0.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn closed_form_weak_instrument() {
        let d = Dataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0; 4],
            vec![0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        assert!(matches!(
            closed_form_linear(&d, 0.0),
            Err(Error::WeakInstrument(_))
        ));
    }

    #[test]
    fn compose_alpha_is_additive_and_symmetric() {
        assert_eq!(compose_alpha(0.0, 0.0), 0.0);
        assert!((compose_alpha(0.3, 0.2) - 0.5).abs() < 1e-15);
        assert_eq!(compose_alpha(0.7, -0.1), compose_alpha(-0.1, 0.7));
    }

    #[test]
    fn bias_formula() {
        assert_eq!(asymptotic_bias_linear(0.0, 0.4).unwrap(), 0.0);
        assert_eq!(asymptotic_bias_linear(0.5, 0.25).unwrap(), 2.0);
        assert!(asymptotic_bias_linear(0.5, 0.0).is_err());
    }

    #[test]
    fn fit_matches_closed_form_on_toy_data() {
        let d = toy();
        for alpha in [-0.3, 0.0, 0.25] {
            let g = fit_g_estimator(&d, &SmmSpec::identity(), alpha).unwrap();
            assert!(g.is_solved());
            let cf = closed_form_linear(&d, alpha).unwrap();
            assert!((g.psi.unwrap() - cf).abs() < 1e-8);
            let (lo, hi) = g.ci.unwrap();
            assert!(lo <= g.psi.unwrap() && g.psi.unwrap() <= hi);
            assert!(g.diagnostics.root_residual.unwrap() <= ROOT_RESIDUAL_TOLERANCE);
        }
    }

    #[test]
    fn root_outside_bracket_is_no_solution() {
        let d = toy();
        let options = FitOptions {
            bracket: (100.0, 200.0),
            ..FitOptions::default()
        };
        let g = fit_g_estimator_with(&d, &SmmSpec::identity(), 0.0, &options).unwrap();
        assert_eq!(g.status, FitStatus::NoSolution);
        assert!(g.psi.is_none() && g.ci.is_none());
    }

    #[test]
    fn grid_validation() {
        let d = toy();
        assert!(sweep_alpha(&d, &SmmSpec::identity(), &[]).is_err());
        assert!(sweep_alpha(&d, &SmmSpec::identity(), &[0.1, 0.1]).is_err());
        assert!(sweep_alpha(&d, &SmmSpec::identity(), &[0.2, 0.1]).is_err());
    }

    #[test]
    fn singleton_sweep_equals_single_fit() {
        let d = toy();
        let s = sweep_alpha(&d, &SmmSpec::identity(), &[0.0]).unwrap();
        let g = fit_g_estimator(&d, &SmmSpec::identity(), 0.0).unwrap();
        assert_eq!(s.entries[0], g);
        assert_eq!(s.solvable_range, Some((0.0, 0.0)));
    }

    #[test]
    fn default_grid_shape() {
        let g = default_alpha_grid(0.0);
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], -0.2);
        assert_eq!(g[10], 0.0);
        assert_eq!(g[20], 0.2);
        let g = default_alpha_grid(0.5);
        assert_eq!(g.len(), 21);
        assert!((g[0] - 0.3).abs() < 1e-15 && (g[20] - 0.7).abs() < 1e-15);
        assert!(g.contains(&0.5));
    }

    #[test]
    fn relevance_perfect_collinearity() {
        let z = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let d = Dataset::new(vec![0.0; 6], z.clone(), z).unwrap();
        let r = relevance_check(&d).unwrap();
        assert!(r.perfect_collinearity && r.f_stat.is_infinite());
    }

    #[test]
    fn relevance_constant_instrument() {
        let d = Dataset::new(vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0], vec![1.0; 4]).unwrap();
        assert!(matches!(relevance_check(&d), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn relevance_f_is_squared_t() {
        // oracle: textbook simple regression
        let d = toy();
        let r = relevance_check(&d).unwrap();
        let (x, z) = (d.x(), d.z());
        let n = x.len() as f64;
        let zbar = z.iter().sum::<f64>() / n;
        let xbar = x.iter().sum::<f64>() / n;
        let sxz: f64 = x.iter().zip(z).map(|(a, b)| (a - xbar) * (b - zbar)).sum();
        let szz: f64 = z.iter().map(|b| (b - zbar).powi(2)).sum();
        let b1 = sxz / szz;
        let b0 = xbar - b1 * zbar;
        let rss: f64 = x
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b0 - b1 * b).powi(2))
            .sum();
        let se = (rss / (n - 2.0) / szz).sqrt();
        assert!((r.coef - b1).abs() < 1e-14);
        assert!((r.f_stat - (b1 / se).powi(2)).abs() < 1e-10);
        assert_eq!(r.df, (1, 6));
    }
}
