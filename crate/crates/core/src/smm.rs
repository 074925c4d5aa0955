//! Structural mean model pieces: link-specific residual transform
//! `h(ψ; α)`, the violation `b = αZ`, the D-function `Z − E[Z|L]`, and the
//! nuisance fits whose scores enter the stacked system.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mestim::{Partition, StackedSystem};

const MAX_NEWTON_ITERATIONS: usize = 100;
const SCORE_TOLERANCE: f64 = 1e-10;
const DIVERGENCE_NORM: f64 = 50.0;

#[inline]
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Link function of the structural mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            "logit" | "logistic" => Ok(Link::Logit),
            other => Err(Error::config(
                "link",
                format!("unknown link `{other}` (expected identity, log or logit)"),
            )),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
        })
    }
}

/// A regressor in an outcome or instrument model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Exposure,
    Instrument,
    /// Exposure × instrument.
    Interaction,
    Covariate(usize),
}

impl Term {
    #[inline]
    pub fn value(&self, row: &Observation<'_>) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Exposure => row.x,
            Term::Instrument => row.z,
            Term::Interaction => row.x * row.z,
            Term::Covariate(j) => row.l[j],
        }
    }
}

/// Default outcome formula: intercept + X + Z + X·Z.
pub fn default_outcome_formula() -> Vec<Term> {
    vec![
        Term::Intercept,
        Term::Exposure,
        Term::Instrument,
        Term::Interaction,
    ]
}

/// Default instrument formula: intercept only.
pub fn default_instrument_formula() -> Vec<Term> {
    vec![Term::Intercept]
}

/// Effect modifier `m(L)`. Only the constant is supported, giving a scalar ψ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectModifier {
    #[default]
    Constant,
}

/// Violation `b(L, Z; α)` on the link scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    /// `b = α·Z`.
    #[default]
    LinearInInstrument,
}

impl Violation {
    #[inline]
    pub fn value(&self, row: &Observation<'_>, alpha: f64) -> f64 {
        match self {
            Violation::LinearInInstrument => alpha * row.z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmmSpec {
    pub link: Link,
    pub m_of_l: EffectModifier,
    pub violation: Violation,
    pub outcome_formula: Vec<Term>,
    pub instrument_formula: Vec<Term>,
}

impl SmmSpec {
    pub fn new(link: Link) -> Self {
        SmmSpec {
            link,
            m_of_l: EffectModifier::Constant,
            violation: Violation::LinearInInstrument,
            outcome_formula: default_outcome_formula(),
            instrument_formula: default_instrument_formula(),
        }
    }

    pub fn identity() -> Self {
        Self::new(Link::Identity)
    }

    pub fn logit() -> Self {
        Self::new(Link::Logit)
    }

    /// Checks the model against a dataset: binary outcome for logit, a
    /// nonnegative outcome for log, covariate indices in range.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let k = data.n_covariates();
        let out_of_range = self
            .outcome_formula
            .iter()
            .chain(&self.instrument_formula)
            .any(|t| matches!(t, Term::Covariate(j) if *j >= k));
        if out_of_range {
            return Err(Error::InvalidArgument(format!(
                "formula references a covariate but the dataset has {k}"
            )));
        }
        if self
            .instrument_formula
            .iter()
            .any(|t| !matches!(t, Term::Intercept | Term::Covariate(_)))
        {
            return Err(Error::InvalidArgument(
                "instrument formula may contain only the intercept and covariates".into(),
            ));
        }
        match self.link {
            Link::Logit if !data.is_binary_outcome() => Err(Error::DomainError(
                "logit link requires a binary outcome".into(),
            )),
            Link::Log if data.y().iter().any(|&v| v < 0.0) => Err(Error::DomainError(
                "log link requires a nonnegative outcome".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Logistic model for `E[Y | X, Z, L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub coefficients: Vec<f64>,
    pub formula: Vec<Term>,
    pub converged: bool,
    pub iterations: usize,
}

impl OutcomeModel {
    #[inline]
    pub fn linear_predictor(&self, row: &Observation<'_>) -> f64 {
        linear_predictor(&self.formula, &self.coefficients, row)
    }

    pub fn fitted_probability(&self, row: &Observation<'_>) -> f64 {
        expit(self.linear_predictor(row))
    }
}

#[inline]
fn linear_predictor(formula: &[Term], coefficients: &[f64], row: &Observation<'_>) -> f64 {
    formula
        .iter()
        .zip(coefficients)
        .map(|(t, b)| t.value(row) * b)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentKind {
    /// Intercept only: `E[Z] = μ_Z`.
    Mean,
    /// Binary instrument regressed on covariates with a logit link.
    Logistic,
    /// Real instrument regressed on covariates by least squares.
    Linear,
}

/// Model for `E[Z | L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentModel {
    pub kind: InstrumentKind,
    pub coefficients: Vec<f64>,
    pub formula: Vec<Term>,
}

impl InstrumentModel {
    /// `Ê[Z | L]` for the given row.
    #[inline]
    pub fn mean(&self, row: &Observation<'_>) -> f64 {
        instrument_mean(self.kind, &self.formula, &self.coefficients, row)
    }

    /// Scalar `μ̂_Z` for the intercept-only model.
    pub fn mu_z(&self) -> Option<f64> {
        (self.kind == InstrumentKind::Mean).then(|| self.coefficients[0])
    }
}

#[inline]
fn instrument_mean(
    kind: InstrumentKind,
    formula: &[Term],
    coef: &[f64],
    row: &Observation<'_>,
) -> f64 {
    match kind {
        InstrumentKind::Mean => coef[0],
        InstrumentKind::Linear => linear_predictor(formula, coef, row),
        InstrumentKind::Logistic => expit(linear_predictor(formula, coef, row)),
    }
}

/// Link-specific residual transform `h(ψ; α)`.
pub fn h_psi_alpha(
    row: &Observation<'_>,
    psi: f64,
    alpha: f64,
    spec: &SmmSpec,
    outcome: Option<&OutcomeModel>,
) -> Result<f64> {
    let b = spec.violation.value(row, alpha);
    match spec.link {
        Link::Identity => Ok(row.y - row.x * psi - b),
        Link::Log => {
            if row.y < 0.0 {
                return Err(Error::DomainError(format!(
                    "log link with outcome {}",
                    row.y
                )));
            }
            Ok(row.y * (-row.x * psi - b).exp())
        }
        Link::Logit => {
            let model = outcome.ok_or(Error::MissingOutcomeModel)?;
            Ok(expit(model.linear_predictor(row) - row.x * psi - b))
        }
    }
}

/// `D = Z − Ê[Z | L]`.
pub fn d_function(row: &Observation<'_>, instrument: &InstrumentModel) -> f64 {
    row.z - instrument.mean(row)
}

fn design(data: &Dataset, formula: &[Term]) -> Vec<Vec<f64>> {
    data.rows()
        .map(|r| formula.iter().map(|t| t.value(&r)).collect())
        .collect()
}

fn cross_product(rows: &[Vec<f64>], weights: impl Fn(usize) -> f64) -> Matrix {
    let k = rows.first().map_or(0, Vec::len);
    let mut m = Matrix::zeros(k, k);
    for (i, r) in rows.iter().enumerate() {
        let w = weights(i);
        for a in 0..k {
            let ra = r[a] * w;
            for b in a..k {
                m[(a, b)] += ra * r[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// Ordinary least squares by the normal equations. Errors `RankDeficient`
/// when `XᵀX / n` has a vanishing pivot.
pub(crate) fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let n = rows.len() as f64;
    let xtx = cross_product(rows, |_| 1.0).scale(1.0 / n);
    let k = xtx.rows();
    let mut xty = vec![0.0; k];
    for (r, yi) in rows.iter().zip(y) {
        for a in 0..k {
            xty[a] += r[a] * yi / n;
        }
    }
    xtx.solve(&xty)
        .map_err(|_| Error::RankDeficient("least-squares design is singular".into()))
}

/// Newton–Raphson for a logistic log-likelihood, starting at zero.
/// Fitted probabilities this close to 0 or 1 mean the likelihood is
/// maximised at infinity and the "converged" point is an artefact.
const SATURATION: f64 = 1e-8;

fn finish(beta: Vec<f64>, iterations: usize, saturated: bool) -> Result<(Vec<f64>, usize)> {
    if saturated {
        Err(Error::Separation { iterations })
    } else {
        Ok((beta, iterations))
    }
}

fn logistic_newton(rows: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, usize)> {
    let k = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    // rank check on the unweighted design
    cross_product(rows, |_| 1.0 / n)
        .solve(&vec![0.0; k])
        .map_err(|_| Error::RankDeficient("logistic design matrix is singular".into()))?;

    let log_lik = |beta: &[f64]| -> f64 {
        rows.iter()
            .zip(y)
            .map(|(r, &yi)| {
                let eta: f64 = r.iter().zip(beta).map(|(a, b)| a * b).sum();
                // y·η − log(1 + e^η), stable in both tails
                yi * eta
                    - (if eta > 0.0 {
                        eta + (-eta).exp().ln_1p()
                    } else {
                        eta.exp().ln_1p()
                    })
            })
            .sum()
    };

    let mut beta = vec![0.0; k];
    let mut current = log_lik(&beta);
    for iteration in 0..=MAX_NEWTON_ITERATIONS {
        let probs: Vec<f64> = rows
            .iter()
            .map(|r| expit(r.iter().zip(&beta).map(|(a, b)| a * b).sum()))
            .collect();
        let mut score = vec![0.0; k];
        for (i, r) in rows.iter().enumerate() {
            let resid = y[i] - probs[i];
            for a in 0..k {
                score[a] += resid * r[a];
            }
        }
        let max_score = score.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let saturated = probs
            .iter()
            .any(|&p| p < SATURATION || p > 1.0 - SATURATION);
        if max_score <= SCORE_TOLERANCE {
            return finish(beta, iteration, saturated);
        }
        if iteration == MAX_NEWTON_ITERATIONS {
            break;
        }
        let info = cross_product(rows, |i| probs[i] * (1.0 - probs[i]));
        let step = info.solve(&score).map_err(|_| Error::Separation {
            iterations: iteration,
        })?;
        let step_size = step.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let scale = 1.0 + beta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if step_size <= 1e-14 * scale && max_score <= 1e-6 {
            // score is at rounding level for this sample size
            return finish(beta, iteration, saturated);
        }

        let mut t = 1.0;
        let mut candidate: Vec<f64>;
        loop {
            candidate = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let ll = log_lik(&candidate);
            if ll >= current - 1e-12 * current.abs() || t < 1e-4 {
                current = ll;
                break;
            }
            t *= 0.5;
        }
        beta = candidate;
        if beta
            .iter()
            .any(|b| b.abs() > DIVERGENCE_NORM || !b.is_finite())
        {
            return Err(Error::Separation {
                iterations: iteration + 1,
            });
        }
    }
    Err(Error::Separation {
        iterations: MAX_NEWTON_ITERATIONS,
    })
}

/// Logistic maximum-likelihood fit of a binary outcome.
pub fn fit_outcome_model(data: &Dataset, formula: &[Term]) -> Result<OutcomeModel> {
    if !data.is_binary_outcome() {
        return Err(Error::DomainError(
            "outcome model requires y in {0, 1}".into(),
        ));
    }
    if formula.is_empty() {
        return Err(Error::InvalidArgument("outcome formula is empty".into()));
    }
    let rows = design(data, formula);
    let (coefficients, iterations) = logistic_newton(&rows, data.y())?;
    Ok(OutcomeModel {
        coefficients,
        formula: formula.to_vec(),
        converged: true,
        iterations,
    })
}

/// Model for `E[Z | L]`: the sample mean when the formula is intercept
/// only, otherwise a logistic (binary Z) or least-squares (real Z) fit.
pub fn fit_instrument_model(data: &Dataset, formula: &[Term]) -> Result<InstrumentModel> {
    if formula.is_empty() {
        return Err(Error::InvalidArgument("instrument formula is empty".into()));
    }
    if formula
        .iter()
        .any(|t| !matches!(t, Term::Intercept | Term::Covariate(_)))
    {
        return Err(Error::InvalidArgument(
            "instrument formula may contain only the intercept and covariates".into(),
        ));
    }
    if formula == [Term::Intercept] {
        let mu = data.z().iter().sum::<f64>() / data.n() as f64;
        return Ok(InstrumentModel {
            kind: InstrumentKind::Mean,
            coefficients: vec![mu],
            formula: formula.to_vec(),
        });
    }
    let z = data.z();
    if z.iter().all(|&v| v == z[0]) {
        return Err(Error::RankDeficient("instrument column is constant".into()));
    }
    let rows = design(data, formula);
    if data.is_binary_instrument() {
        let (coefficients, _) = logistic_newton(&rows, z)?;
        Ok(InstrumentModel {
            kind: InstrumentKind::Logistic,
            coefficients,
            formula: formula.to_vec(),
        })
    } else {
        Ok(InstrumentModel {
            kind: InstrumentKind::Linear,
            coefficients: least_squares(&rows, z)?,
            formula: formula.to_vec(),
        })
    }
}

/// Nuisance estimates needed to evaluate the stacked system at a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub outcome: Option<OutcomeModel>,
    pub instrument: InstrumentModel,
}

impl NuisanceFit {
    /// Fits the outcome model (logit link only) and the instrument model.
    pub fn fit(data: &Dataset, spec: &SmmSpec) -> Result<Self> {
        spec.validate(data)?;
        let outcome = match spec.link {
            Link::Logit => Some(fit_outcome_model(data, &spec.outcome_formula)?),
            Link::Identity | Link::Log => None,
        };
        let instrument = fit_instrument_model(data, &spec.instrument_formula)?;
        Ok(NuisanceFit {
            outcome,
            instrument,
        })
    }

    /// Nuisance block of θ: outcome coefficients followed by instrument
    /// coefficients.
    pub fn theta_prefix(&self) -> Vec<f64> {
        let mut theta = self
            .outcome
            .as_ref()
            .map(|o| o.coefficients.clone())
            .unwrap_or_default();
        theta.extend_from_slice(&self.instrument.coefficients);
        theta
    }
}

/// Builds the stacked estimating function for `spec`. θ is laid out as
/// (outcome coefficients [logit only], instrument-model coefficients, ψ).
/// The instrument kind is decided from the data, as in
/// [`fit_instrument_model`].
pub fn build_stacked_system(data: &Dataset, spec: &SmmSpec) -> Result<StackedSystem<'static>> {
    spec.validate(data)?;
    let kind = if spec.instrument_formula == [Term::Intercept] {
        InstrumentKind::Mean
    } else if data.is_binary_instrument() {
        InstrumentKind::Logistic
    } else {
        InstrumentKind::Linear
    };
    Ok(stacked_system(spec, kind))
}

pub(crate) fn stacked_system(spec: &SmmSpec, kind: InstrumentKind) -> StackedSystem<'static> {
    let link = spec.link;
    let violation = spec.violation;
    let outcome_formula: Vec<Term> = match link {
        Link::Logit => spec.outcome_formula.clone(),
        _ => Vec::new(),
    };
    let instrument_formula = spec.instrument_formula.clone();
    let k_out = outcome_formula.len();
    let k_inst = instrument_formula.len();
    let partition = Partition {
        beta_y: 0..k_out,
        mu_z: k_out..k_out + k_inst,
        psi: k_out + k_inst..k_out + k_inst + 1,
    };
    let psi_index = k_out + k_inst;

    StackedSystem::new(partition, move |row, theta, alpha, out| {
        let beta = &theta[..k_out];
        let gamma = &theta[k_out..psi_index];
        let psi = theta[psi_index];
        let b = violation.value(row, alpha);

        let h = match link {
            Link::Identity => row.y - row.x * psi - b,
            Link::Log => row.y * (-row.x * psi - b).exp(),
            Link::Logit => {
                let eta = linear_predictor(&outcome_formula, beta, row);
                let resid = row.y - expit(eta);
                for (slot, term) in out[..k_out].iter_mut().zip(&outcome_formula) {
                    *slot = resid * term.value(row);
                }
                expit(eta - row.x * psi - b)
            }
        };

        let z_hat = instrument_mean(kind, &instrument_formula, gamma, row);
        let d = row.z - z_hat;
        match kind {
            InstrumentKind::Mean => out[k_out] = d,
            InstrumentKind::Linear | InstrumentKind::Logistic => {
                for (slot, term) in out[k_out..psi_index].iter_mut().zip(&instrument_formula) {
                    *slot = d * term.value(row);
                }
            }
        }
        out[psi_index] = d * h;
    })
}
