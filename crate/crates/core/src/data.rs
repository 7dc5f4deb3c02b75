use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;

/// Response series with per-time covariates. A missing response (or any
/// missing covariate) makes the whole observation missing for likelihood
/// purposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesData {
    pub response: Vec<f64>,
    /// One vector of length `T` per covariate.
    pub covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    pub missing: Vec<bool>,
}

impl TimeSeriesData {
    /// Build from columns; NaN marks a missing value.
    pub fn new(response: Vec<f64>, covariates: Vec<Vec<f64>>, covariate_names: Vec<String>) -> Result<Self> {
        let t_len = response.len();
        if t_len == 0 {
            return Err(Error::InvalidInput("empty series".into()));
        }
        if covariate_names.len() != covariates.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} covariates",
                covariate_names.len(),
                covariates.len()
            )));
        }
        if let Some((p, c)) = covariates.iter().enumerate().find(|(_, c)| c.len() != t_len) {
            return Err(Error::DimensionMismatch(format!(
                "covariate {p} has {} values, response has {t_len}",
                c.len()
            )));
        }
        let missing = (0..t_len)
            .map(|t| response[t].is_nan() || covariates.iter().any(|c| c[t].is_nan()))
            .collect();
        Ok(Self {
            response,
            covariates,
            covariate_names,
            missing,
        })
    }

    /// Convenience constructor naming covariates `x1, x2, ...`.
    pub fn unnamed(response: Vec<f64>, covariates: Vec<Vec<f64>>) -> Result<Self> {
        let names = (1..=covariates.len()).map(|p| format!("x{p}")).collect();
        Self::new(response, covariates, names)
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn n_observed(&self) -> usize {
        self.missing.iter().filter(|m| !**m).count()
    }

    /// First `len` observations.
    pub fn prefix(&self, len: usize) -> Self {
        Self {
            response: self.response[..len].to_vec(),
            covariates: self.covariates.iter().map(|c| c[..len].to_vec()).collect(),
            covariate_names: self.covariate_names.clone(),
            missing: self.missing[..len].to_vec(),
        }
    }

    /// Same covariates, new responses (for simulation).
    pub fn with_response(&self, response: Vec<f64>) -> Self {
        let missing = (0..response.len())
            .map(|t| response[t].is_nan() || self.covariates.iter().any(|c| c[t].is_nan()))
            .collect();
        Self {
            response,
            covariates: self.covariates.clone(),
            covariate_names: self.covariate_names.clone(),
            missing,
        }
    }

    pub fn validate_for(&self, family: Family) -> Result<()> {
        for (t, (&y, &m)) in self.response.iter().zip(&self.missing).enumerate() {
            if !m {
                family.check_response(t, y)?;
            }
        }
        if self.n_observed() == 0 {
            return Err(Error::InvalidInput("all observations are missing".into()));
        }
        Ok(())
    }

    pub fn observed_response(&self) -> impl Iterator<Item = f64> + '_ {
        self.response
            .iter()
            .zip(&self.missing)
            .filter(|(_, m)| !**m)
            .map(|(y, _)| *y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_flags_follow_nans() {
        let d = TimeSeriesData::unnamed(vec![1.0, f64::NAN, 3.0], vec![vec![0.0, 1.0, f64::NAN]]).unwrap();
        assert_eq!(d.missing, vec![false, true, true]);
        assert_eq!(d.n_observed(), 1);
        assert_eq!(d.prefix(2).len(), 2);
    }

    #[test]
    fn shape_errors() {
        assert!(TimeSeriesData::unnamed(vec![1.0, 2.0], vec![vec![0.0]]).is_err());
        assert!(TimeSeriesData::unnamed(vec![], vec![]).is_err());
    }

    #[test]
    fn validation_reports_index() {
        let d = TimeSeriesData::unnamed(vec![1.0, -2.0], vec![]).unwrap();
        match d.validate_for(Family::poisson()) {
            Err(Error::InvalidResponse { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
