//! JSON run configuration.

use std::path::Path;

use msgam::experiments::{ForecastModel, ScenarioConfig};
use msgam::hmm::InitMode;
use msgam::model::TermChoice;
use msgam::smoothing::{FoldMode, SelectionMethod, Tying};
use msgam::{Family, FamilyKind};
use serde::Deserialize;

use crate::error::CliError;

/// Family given either by name (canonical link) or as `{kind, link}`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
pub enum FamilyChoice {
    Name(FamilyKind),
    Full(Family),
}

impl FamilyChoice {
    pub fn family(self) -> Family {
        match self {
            FamilyChoice::Name(kind) => Family::canonical(kind),
            FamilyChoice::Full(f) => f,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: default_replicates(),
            level: default_level(),
            grid_size: default_grid_size(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    pub u_start: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub models: Vec<ForecastModel>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: Option<FamilyChoice>,
    #[serde(default = "default_states")]
    pub states: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_penalty_order")]
    pub penalty_order: usize,
    #[serde(default)]
    pub init_mode: InitMode,
    /// Response column name; defaults to the first non-`t` column.
    pub response: Option<String>,
    /// One entry per covariate; defaults to all smooth.
    pub terms: Option<Vec<TermChoice>>,
    /// Fixed smoothing parameters `[state][covariate]`; skips selection.
    pub lambda: Option<Vec<Vec<f64>>>,
    /// Candidate values shared by every smooth.
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub tying: Tying,
    #[serde(default = "default_selection")]
    pub selection: SelectionMethod,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_calib")]
    pub calib_fraction: f64,
    #[serde(default)]
    pub fold_mode: FoldMode,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    pub forecast: Option<ForecastConfig>,
    /// Custom simulation scenario.
    pub scenario: Option<ScenarioConfig>,
}

fn default_states() -> usize {
    2
}
fn default_k() -> usize {
    msgam::basis::DEFAULT_K
}
fn default_penalty_order() -> usize {
    msgam::basis::DEFAULT_PENALTY_ORDER
}
fn default_selection() -> SelectionMethod {
    SelectionMethod::Aicp
}
fn default_folds() -> usize {
    10
}
fn default_calib() -> f64 {
    0.9
}
fn default_restarts() -> usize {
    5
}
fn default_replicates() -> usize {
    999
}
fn default_level() -> f64 {
    0.95
}
fn default_grid_size() -> usize {
    100
}
fn default_stride() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let c: Self = serde_json::from_str(text).map_err(|e| CliError::Input(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(format!("invalid config: {m}")));
        if self.states == 0 {
            return bad("states must be at least 1".into());
        }
        if self.k < 5 || self.k % 2 == 0 {
            return bad(format!("k = {} must be odd and at least 5", self.k));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if let Some(l) = &self.lambda {
            if l.len() != self.states {
                return bad(format!("lambda has {} rows for {} states", l.len(), self.states));
            }
            if l.iter().flatten().any(|v| !(*v >= 0.0) || v.is_infinite()) {
                return bad("lambda entries must be finite and non-negative".into());
            }
        }
        if let Some(g) = &self.grid {
            if g.is_empty() || g.iter().any(|v| !(*v >= 0.0) || v.is_infinite()) {
                return bad("grid must be a non-empty list of non-negative numbers".into());
            }
        }
        if self.lambda.is_some() && self.grid.is_some() {
            return bad("give either lambda or grid, not both".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if !(self.calib_fraction > 0.5 && self.calib_fraction < 1.0) {
            return bad("calib_fraction must lie in (0.5, 1)".into());
        }
        let b = &self.bootstrap;
        if b.replicates == 0 || !(b.level > 0.0 && b.level < 1.0) || b.grid_size < 2 {
            return bad("bootstrap needs replicates ≥ 1, level in (0, 1), grid_size ≥ 2".into());
        }
        if let Some(f) = &self.forecast {
            if f.models.is_empty() {
                return bad("forecast.models must list at least one model".into());
            }
            if f.stride == 0 || f.u_start < 2 {
                return bad("forecast needs stride ≥ 1 and u_start ≥ 2".into());
            }
        }
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| CliError::Input(format!("invalid config: scenario: {e}")))?;
        }
        Ok(())
    }

    pub fn family(&self) -> Result<Family, CliError> {
        self.family
            .map(FamilyChoice::family)
            .ok_or_else(|| CliError::Input("invalid config: `family` is required for this command".into()))
    }

    /// Default grid when none is configured.
    pub fn grid_values(&self) -> Vec<f64> {
        self.grid
            .clone()
            .unwrap_or_else(|| vec![0.125, 1.0, 8.0, 64.0, 512.0, 4096.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_and_full_family_forms() {
        let c = RunConfig::parse(r#"{"family": "poisson"}"#).unwrap();
        assert_eq!(c.family().unwrap(), Family::poisson());
        assert_eq!(c.states, 2);
        let c = RunConfig::parse(r#"{"family": {"kind": "gamma", "link": "log"}, "states": 1}"#).unwrap();
        assert_eq!(c.family().unwrap(), Family::gamma());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse(r#"{"family": "poisson", "colour": 1}"#).is_err());
        assert!(RunConfig::parse(r#"{"family": "poisson", "k": 14}"#).is_err());
        assert!(RunConfig::parse(r#"{"family": {"kind": "poisson", "link": "identity"}}"#).is_err());
        assert!(RunConfig::parse(r#"{"family": "poisson", "grid": []}"#).is_err());
        assert!(RunConfig::parse(r#"{"family": "poisson", "bootstrap": {"replicates": 10, "lvl": 0.9}}"#).is_err());
    }
}
