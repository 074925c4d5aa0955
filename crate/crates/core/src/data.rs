use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columnar observations: outcome `y`, exposure `x`, instrument `z` and
/// optional measured covariates stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    covariates: Vec<f64>,
    covariate_names: Vec<String>,
}

/// One row of a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub y: f64,
    pub x: f64,
    pub z: f64,
    pub l: &'a [f64],
}

impl Dataset {
    /// Dataset without covariates.
    pub fn new(y: Vec<f64>, x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        Self::with_covariates(y, x, z, Vec::new(), Vec::new())
    }

    /// `covariates` holds one inner vector per covariate column.
    pub fn with_covariates(
        y: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        covariates: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "dataset must have at least one row".into(),
            ));
        }
        if x.len() != n || z.len() != n {
            return Err(Error::InvalidArgument(format!(
                "column lengths differ: y={}, x={}, z={}",
                n,
                x.len(),
                z.len()
            )));
        }
        if covariates.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument(
                "covariate column length differs from y".into(),
            ));
        }
        let k = covariates.len();
        let names = if covariate_names.is_empty() {
            (0..k).map(|j| format!("l{j}")).collect()
        } else if covariate_names.len() == k {
            covariate_names
        } else {
            return Err(Error::InvalidArgument(
                "one name per covariate column required".into(),
            ));
        };
        let mut flat = Vec::with_capacity(n * k);
        for i in 0..n {
            flat.extend(covariates.iter().map(|c| c[i]));
        }
        let all_finite = y
            .iter()
            .chain(&x)
            .chain(&z)
            .chain(&flat)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite(
                "dataset contains NaN or infinite values".into(),
            ));
        }
        Ok(Dataset {
            y,
            x,
            z,
            covariates: flat,
            covariate_names: names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Values of covariate `j` as a fresh column.
    pub fn covariate(&self, j: usize) -> Vec<f64> {
        let k = self.n_covariates();
        (0..self.n()).map(|i| self.covariates[i * k + j]).collect()
    }

    pub fn row(&self, i: usize) -> Observation<'_> {
        let k = self.n_covariates();
        Observation {
            y: self.y[i],
            x: self.x[i],
            z: self.z[i],
            l: &self.covariates[i * k..(i + 1) * k],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Observation<'_>> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    pub fn is_binary_outcome(&self) -> bool {
        is_binary(&self.y)
    }

    pub fn is_binary_instrument(&self) -> bool {
        is_binary(&self.z)
    }

    /// Divides the exposure column by its sample standard deviation
    /// (n − 1 denominator). Returns the divisor.
    pub fn standardize_exposure(&mut self) -> Result<f64> {
        let sd = sample_variance(&self.x).sqrt();
        if !(sd > 0.0) {
            return Err(Error::InvalidArgument("exposure column is constant".into()));
        }
        self.x.iter_mut().for_each(|v| *v /= sd);
        Ok(sd)
    }
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&t| t == 0.0 || t == 1.0)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased (n − 1) sample variance.
pub(crate) fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Covariance with an n denominator.
pub(crate) fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64
}
