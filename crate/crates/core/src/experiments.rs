//! Simulation scenarios, Monte Carlo summaries and rolling one-step-ahead
//! forecast evaluation.

use std::io::Write;

use itertools::Itertools;
use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{centered_curve, sample_sd, simulate_path, SimulatedSeries};
use crate::data::TimeSeriesData;
use crate::error::{Error, Result};
use crate::exec;
use crate::family::Family;
use crate::fit::{self, FitOptions, FitResult};
use crate::hmm::{self, MarkovChain};
use crate::model::{self, MsGamParams, MsGamSpec, SmoothingVector, SpecOptions, TermChoice};
use crate::rng;
use crate::smoothing::{aicp_select, cv_select, CvOptions, FoldMode, LambdaGrid, SelectionMethod, Tying};

/// Closed-form effect curves; every variant is zero at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthCurve {
    Zero,
    Linear { slope: f64 },
    Quadratic { linear: f64, quadratic: f64 },
    Sine { amplitude: f64, frequency: f64 },
}

impl TruthCurve {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TruthCurve::Zero => 0.0,
            TruthCurve::Linear { slope } => slope * x,
            TruthCurve::Quadratic { linear, quadratic } => linear * x + quadratic * x * x,
            TruthCurve::Sine { amplitude, frequency } => amplitude * (frequency * x).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioId {
    I,
    II,
    III,
    Custom,
}

impl std::str::FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(ScenarioId::I),
            "II" | "2" => Ok(ScenarioId::II),
            "III" | "3" => Ok(ScenarioId::III),
            other => Err(Error::InvalidInput(format!("unknown scenario `{other}` (expected I, II or III)"))),
        }
    }
}

/// Everything needed to simulate and refit one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    pub family: Family,
    pub intercepts: Vec<f64>,
    /// `truths[state][covariate]`
    pub truths: Vec<Vec<TruthCurve>>,
    pub tpm: Vec<Vec<f64>>,
    /// Per-state dispersion; empty for Poisson.
    pub dispersions: Vec<f64>,
    pub t_len: usize,
    pub runs: usize,
    pub k: usize,
    pub grid: Vec<f64>,
    #[serde(default)]
    pub tying: Tying,
    pub selection: SelectionMethod,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_calib")]
    pub calib_fraction: f64,
    #[serde(default = "default_restarts")]
    pub n_restarts: usize,
    pub seed: u64,
    #[serde(default = "default_range")]
    pub covariate_range: (f64, f64),
}

fn default_folds() -> usize {
    25
}
fn default_calib() -> f64 {
    0.9
}
fn default_restarts() -> usize {
    5
}
fn default_range() -> (f64, f64) {
    (-3.0, 3.0)
}

impl ScenarioConfig {
    /// Two-state Poisson model with one covariate: a strongly nonlinear
    /// effect in state 1 and a moderate one in state 2.
    pub fn scenario_i() -> Self {
        Self {
            id: ScenarioId::I,
            family: Family::poisson(),
            intercepts: vec![2.0, 2.0],
            truths: vec![
                vec![TruthCurve::Sine {
                    amplitude: 1.2,
                    frequency: 1.0,
                }],
                vec![TruthCurve::Quadratic {
                    linear: 0.4,
                    quadratic: -0.08,
                }],
            ],
            tpm: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            dispersions: Vec::new(),
            t_len: 300,
            runs: 200,
            k: 15,
            grid: vec![0.125, 1.0, 8.0, 64.0, 512.0, 4096.0],
            tying: Tying::None,
            selection: SelectionMethod::Aicp,
            cv_folds: 25,
            calib_fraction: 0.9,
            n_restarts: 5,
            seed: 2024,
            covariate_range: (-3.0, 3.0),
        }
    }

    /// Two-state Gaussian model with two covariates; the first covariate's
    /// effect in state 2 is a straight line.
    pub fn scenario_ii() -> Self {
        Self {
            id: ScenarioId::II,
            family: Family::normal(),
            intercepts: vec![1.0, -1.0],
            truths: vec![
                vec![
                    TruthCurve::Sine {
                        amplitude: 3.0,
                        frequency: 1.0,
                    },
                    TruthCurve::Quadratic {
                        linear: 0.0,
                        quadratic: 0.5,
                    },
                ],
                vec![
                    TruthCurve::Linear { slope: 1.0 },
                    TruthCurve::Quadratic {
                        linear: 0.5,
                        quadratic: -0.4,
                    },
                ],
            ],
            tpm: vec![vec![0.95, 0.05], vec![0.05, 0.95]],
            dispersions: vec![3.0, 2.0],
            t_len: 1000,
            runs: 200,
            k: 15,
            grid: vec![0.25, 4.0, 64.0, 1024.0, 16384.0],
            tying: Tying::None,
            selection: SelectionMethod::Aicp,
            cv_folds: 25,
            calib_fraction: 0.9,
            n_restarts: 5,
            seed: 2025,
            covariate_range: (-3.0, 3.0),
        }
    }

    /// Scenario I with a much less persistent chain.
    pub fn scenario_iii() -> Self {
        Self {
            id: ScenarioId::III,
            tpm: vec![vec![0.6, 0.4], vec![0.4, 0.6]],
            seed: 2026,
            ..Self::scenario_i()
        }
    }

    pub fn builtin(id: ScenarioId) -> Result<Self> {
        match id {
            ScenarioId::I => Ok(Self::scenario_i()),
            ScenarioId::II => Ok(Self::scenario_ii()),
            ScenarioId::III => Ok(Self::scenario_iii()),
            ScenarioId::Custom => Err(Error::InvalidInput("custom scenarios need a configuration".into())),
        }
    }

    pub fn n_states(&self) -> usize {
        self.intercepts.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.truths.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        let p = self.n_covariates();
        if n == 0 {
            return Err(Error::InvalidInput("scenario needs at least one state".into()));
        }
        if self.truths.len() != n || self.truths.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("truth curves must be given per state and covariate".into()));
        }
        if self.family.has_dispersion() != (self.dispersions.len() == n) {
            return Err(Error::DimensionMismatch(format!(
                "{} family needs {} dispersions",
                self.family.name(),
                if self.family.has_dispersion() { n } else { 0 }
            )));
        }
        let (lo, hi) = self.covariate_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput("covariate range must be a finite interval".into()));
        }
        if self.runs == 0 || self.t_len < 10 * n {
            return Err(Error::InvalidInput("scenario needs runs ≥ 1 and T ≥ 10·N".into()));
        }
        self.chain()?;
        LambdaGrid::shared(n, p, &self.grid, self.tying)?;
        Ok(())
    }

    pub fn chain(&self) -> Result<MarkovChain> {
        if self.n_states() == 1 {
            return Ok(MarkovChain::single());
        }
        MarkovChain::stationary(&self.tpm)
    }

    pub fn truth_predictor(&self, state: usize, x: &[f64]) -> f64 {
        self.intercepts[state] + self.truths[state].iter().zip(x).map(|(f, &v)| f.eval(v)).sum::<f64>()
    }

    /// Draw covariates uniformly on the configured range, then states and
    /// responses from the true model.
    pub fn simulate(&self, seed: u64) -> Result<SimulatedSeries> {
        self.validate()?;
        let (lo, hi) = self.covariate_range;
        let mut g = rng::stream(seed, &[0xc0]);
        let p = self.n_covariates();
        let covariates: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..self.t_len).map(|_| g.gen_range(lo..hi)).collect())
            .collect();
        let names = (1..=p).map(|q| format!("x{q}")).collect();
        let chain = self.chain()?;
        let mut x = vec![0.0; p];
        simulate_path(
            &chain,
            self.family,
            &self.dispersions,
            &covariates,
            names,
            self.t_len,
            rng::derive_seed(seed, &[0x5a]),
            |s, t| {
                for q in 0..p {
                    x[q] = covariates[q][t];
                }
                self.truth_predictor(s, &x)
            },
        )
    }

    /// Seed of run `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        rng::derive_seed(self.seed, &[r as u64])
    }
}

/// Trapezoidal `∫ (est − truth)² dx` over the grid `x`.
pub fn integrated_squared_error(x: &[f64], estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if x.len() != estimate.len() || x.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} points, curves have {} and {}",
            x.len(),
            estimate.len(),
            truth.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("integration grid needs at least two points".into()));
    }
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(x.windows(2)
        .zip(sq.windows(2))
        .map(|(xw, s)| 0.5 * (xw[1] - xw[0]) * (s[0] + s[1]))
        .sum())
}

/// Mean of per-run integrated squared errors against one true curve.
pub fn mise(x: &[f64], estimates: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput("no curves to average".into()));
    }
    let total = estimates
        .iter()
        .map(|e| integrated_squared_error(x, e, truth))
        .sum::<Result<f64>>()?;
    Ok(total / estimates.len() as f64)
}

/// Points used for MISE integration.
pub const MISE_GRID: usize = 200;

pub fn mise_grid(range: (f64, f64)) -> Vec<f64> {
    (0..MISE_GRID)
        .map(|g| range.0 + (range.1 - range.0) * g as f64 / (MISE_GRID - 1) as f64)
        .collect()
}

/// Outcome of one Monte Carlo run, with states matched to the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub converged: bool,
    /// Fitted state matched to each true state.
    pub matching: Vec<usize>,
    pub lambda: SmoothingVector,
    pub tpm: Vec<Vec<f64>>,
    /// Estimated predictor at x = 0 per (true) state.
    pub predictor_at_zero: Vec<f64>,
    pub dispersions: Vec<f64>,
    /// `ise[state][covariate]`
    pub ise: Vec<Vec<f64>>,
    /// Centred fitted curves on the MISE grid, `[state][covariate][g]`.
    pub curves: Vec<Vec<Vec<f64>>>,
    pub loglik: f64,
    pub edf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub id: ScenarioId,
    pub runs: usize,
    /// Runs that errored or did not converge.
    pub failures: usize,
    /// `mise[state][covariate]` over converged runs.
    pub mise: Vec<Vec<f64>>,
    pub summaries: Vec<Summary>,
    pub grid: Vec<f64>,
    pub records: Vec<RunRecord>,
}

impl ScenarioReport {
    pub fn summary(&self, name: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Converged runs in which `λ[state][covariate]` equals `value`.
    pub fn lambda_count(&self, state: usize, covariate: usize, value: f64) -> usize {
        self.converged()
            .filter(|r| r.lambda.values[state][covariate] == value)
            .count()
    }

    pub fn converged(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| r.converged)
    }

    /// `quantity, mean, sd, n` rows, then `mise_s{i}_x{p}` rows.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["quantity", "mean", "sd", "n"])?;
        for s in &self.summaries {
            w.write_record([s.name.clone(), s.mean.to_string(), s.sd.to_string(), s.n.to_string()])?;
        }
        let n_ok = self.converged().count();
        for (i, row) in self.mise.iter().enumerate() {
            for (p, m) in row.iter().enumerate() {
                w.write_record([format!("mise_s{}_x{}", i + 1, p + 1), m.to_string(), String::new(), n_ok.to_string()])?;
            }
        }
        w.write_record(["failures".to_string(), self.failures.to_string(), String::new(), self.runs.to_string()])?;
        w.flush()?;
        Ok(())
    }

    /// Long format: `run, state, covariate, x, value`.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "state", "covariate", "x", "value"])?;
        for r in self.converged() {
            for (i, per_state) in r.curves.iter().enumerate() {
                for (p, curve) in per_state.iter().enumerate() {
                    for (x, v) in self.grid.iter().zip(curve) {
                        w.write_record([
                            (r.run + 1).to_string(),
                            (i + 1).to_string(),
                            format!("x{}", p + 1),
                            x.to_string(),
                            v.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn summarize(name: String, values: &[f64]) -> Summary {
    let n = values.len();
    let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
    Summary {
        name,
        mean,
        sd: sample_sd(values),
        n,
    }
}

/// Select λ as configured and fit on the full data.
pub fn select_and_fit(config: &ScenarioConfig, spec: &MsGamSpec, data: &TimeSeriesData, seed: u64) -> Result<FitResult> {
    let grid = LambdaGrid::shared(spec.n_states, spec.terms.len(), &config.grid, config.tying)?;
    let fit_opts = FitOptions {
        n_restarts: config.n_restarts,
        seed,
        ..FitOptions::default()
    };
    match config.selection {
        SelectionMethod::Aicp => {
            let sel = aicp_select(spec, data, &grid, &fit_opts)?;
            sel.chosen_fit
                .ok_or_else(|| Error::InvalidInput("no grid point produced a usable fit".into()))
        }
        SelectionMethod::Cv => {
            let sel = cv_select(
                spec,
                data,
                &grid,
                &CvOptions {
                    folds: config.cv_folds,
                    calib_fraction: config.calib_fraction,
                    mode: FoldMode::Scatter,
                    seed,
                    fit: FitOptions {
                        compute_edf: false,
                        ..fit_opts
                    },
                },
            )?;
            fit::fit(spec, data, &sel.lambda, &fit_opts)
        }
    }
}

/// Fitted-to-true state assignment minimizing the summed ISE.
fn match_states(fitted: &[Vec<Vec<f64>>], truth: &[Vec<Vec<f64>>], grid: &[f64]) -> Vec<usize> {
    let n = truth.len();
    (0..n)
        .permutations(n)
        .map(|perm| {
            let cost: f64 = (0..n)
                .map(|i| {
                    fitted[perm[i]]
                        .iter()
                        .zip(&truth[i])
                        .map(|(e, t)| integrated_squared_error(grid, e, t).unwrap_or(f64::INFINITY))
                        .sum::<f64>()
                })
                .sum();
            (perm, cost)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, _)| p)
        .unwrap_or_default()
}

fn run_once(config: &ScenarioConfig, r: usize) -> Result<RunRecord> {
    let seed = config.run_seed(r);
    let sim = config.simulate(seed)?;
    let spec = MsGamSpec::new(
        config.family,
        config.n_states(),
        &sim.data,
        &vec![TermChoice::Smooth; config.n_covariates()],
        SpecOptions {
            k: config.k,
            ..SpecOptions::default()
        },
    )?;
    let fitted = select_and_fit(config, &spec, &sim.data, rng::derive_seed(seed, &[1]))?;
    let n = config.n_states();
    let p = config.n_covariates();
    let grid = mise_grid(config.covariate_range);
    let curves: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| (0..p).map(|q| centered_curve(&spec, &fitted.params, i, q, &grid, 0.0)).collect())
        .collect();
    let truth: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| (0..p).map(|q| grid.iter().map(|&x| config.truths[i][q].eval(x)).collect()).collect())
        .collect();
    let matching = match_states(&curves, &truth, &grid);
    let params: MsGamParams = fitted.params.permuted(&matching);
    let lambda = fitted.lambda.permuted(&matching);
    let curves: Vec<Vec<Vec<f64>>> = matching.iter().map(|&k| curves[k].clone()).collect();
    let ise = (0..n)
        .map(|i| (0..p).map(|q| integrated_squared_error(&grid, &curves[i][q], &truth[i][q])).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let zero = vec![0.0; p];
    Ok(RunRecord {
        run: r,
        seed,
        converged: fitted.converged,
        matching,
        lambda,
        tpm: params.chain.tpm_rows(),
        predictor_at_zero: (0..n).map(|i| params.predictor_at(&spec, i, &zero)).collect(),
        dispersions: params.dispersions.clone(),
        ise,
        curves,
        loglik: fitted.loglik_unpenalized,
        edf: fitted.edf,
    })
}

/// Simulate, select, fit and summarize `config.runs` independent runs.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioReport> {
    config.validate()?;
    let results = exec::map_indexed(config.runs, |r| {
        let out = run_once(config, r);
        match &out {
            Ok(rec) => info!("scenario {:?}: run {} done (converged {})", config.id, r + 1, rec.converged),
            Err(e) => warn!("scenario {:?}: run {} failed: {e}", config.id, r + 1),
        }
        out
    });
    let records: Vec<RunRecord> = results.into_iter().filter_map(|r| r.ok()).collect();
    let failures = config.runs - records.iter().filter(|r| r.converged).count();
    if 2 * failures > config.runs {
        return Err(Error::TooManyFailures {
            what: "scenario runs",
            failed: failures,
            total: config.runs,
        });
    }
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.converged).collect();
    let n = config.n_states();
    let p = config.n_covariates();
    let mise = (0..n)
        .map(|i| {
            (0..p)
                .map(|q| ok.iter().map(|r| r.ise[i][q]).sum::<f64>() / ok.len() as f64)
                .collect()
        })
        .collect();
    let mut summaries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if n > 1 {
                let v: Vec<f64> = ok.iter().map(|r| r.tpm[i][j]).collect();
                summaries.push(summarize(format!("gamma_{}{}", i + 1, j + 1), &v));
            }
        }
    }
    for i in 0..n {
        let v: Vec<f64> = ok.iter().map(|r| r.predictor_at_zero[i]).collect();
        summaries.push(summarize(format!("eta0_s{}", i + 1), &v));
    }
    if config.family.has_dispersion() {
        for i in 0..n {
            let v: Vec<f64> = ok.iter().map(|r| r.dispersions[i]).collect();
            summaries.push(summarize(format!("dispersion_s{}", i + 1), &v));
        }
    }
    Ok(ScenarioReport {
        id: config.id,
        runs: config.runs,
        failures,
        mise,
        summaries,
        grid: mise_grid(config.covariate_range),
        records,
    })
}

/// A competing model in a forecast comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastModel {
    pub name: String,
    pub n_states: usize,
    /// One entry per covariate.
    pub terms: Vec<TermChoice>,
}

impl ForecastModel {
    /// LIN, GAM, MS-LIN and MS-GAM for `p` covariates.
    pub fn standard_set(p: usize) -> Vec<Self> {
        let m = |name: &str, n, c| Self {
            name: name.into(),
            n_states: n,
            terms: vec![c; p],
        };
        vec![
            m("LIN", 1, TermChoice::Linear),
            m("GAM", 1, TermChoice::Smooth),
            m("MS-LIN", 2, TermChoice::Linear),
            m("MS-GAM", 2, TermChoice::Smooth),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOptions {
    /// First scored time point (1-based).
    pub u_start: usize,
    /// Refit every `stride` steps, carrying parameters in between.
    pub stride: usize,
    pub k: usize,
    /// Candidate λ values, chosen once by AIC_p on the first window.
    pub grid: Vec<f64>,
    pub tying: Tying,
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self {
            u_start: 301,
            stride: 1,
            k: 15,
            grid: vec![1.0, 16.0, 256.0, 4096.0],
            tying: Tying::None,
            n_restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelForecast {
    pub name: String,
    /// 1-based time points scored.
    pub u: Vec<usize>,
    pub scores: Vec<f64>,
    pub total: f64,
    pub lambda: SmoothingVector,
    pub refits: usize,
    pub failed_refits: usize,
}

/// Log predictive density of observation `u` (1-based) given `1..u-1`,
/// reading responses only up to `u`.
pub fn one_step_score(spec: &MsGamSpec, params: &MsGamParams, data: &TimeSeriesData, u: usize) -> Result<f64> {
    let prefix = data.prefix(u);
    if prefix.missing[u - 1] {
        return Ok(0.0);
    }
    let ld = model::state_log_densities(spec, params, &prefix)?;
    let r = hmm::forward_loglik(&params.chain, &ld, &prefix.missing)?;
    let before: f64 = r.log_scale_factors[..u - 1].iter().sum();
    Ok(r.log_likelihood - before)
}

fn forecast_one(
    family: Family,
    data: &TimeSeriesData,
    model_def: &ForecastModel,
    options: &ForecastOptions,
    index: usize,
) -> Result<ModelForecast> {
    let spec = MsGamSpec::new(
        family,
        model_def.n_states,
        data,
        &model_def.terms,
        SpecOptions {
            k: options.k,
            ..SpecOptions::default()
        },
    )?;
    let t_len = data.len();
    let seed = rng::derive_seed(options.seed, &[index as u64]);
    let fit_opts = FitOptions {
        n_restarts: options.n_restarts,
        seed,
        ..FitOptions::default()
    };
    let first = data.prefix(options.u_start - 1);
    let grid = LambdaGrid::shared(spec.n_states, spec.terms.len(), &options.grid, options.tying)?;
    let sel = aicp_select(&spec, &first, &grid, &fit_opts)?;
    let lambda = sel.lambda.clone();
    let mut current = match sel.chosen_fit {
        Some(f) => f,
        None => fit::fit(&spec, &first, &lambda, &fit_opts)?,
    };
    let refit_opts = FitOptions {
        n_restarts: 1,
        compute_edf: false,
        ..fit_opts
    };
    let mut refits = 1;
    let mut failed = 0;
    let mut us = Vec::new();
    let mut scores = Vec::new();
    for u in options.u_start..=t_len {
        if u > options.u_start && (u - options.u_start) % options.stride == 0 {
            let window = data.prefix(u - 1);
            refits += 1;
            match fit::fit_from(&spec, &window, &lambda, current.working_vector(), &refit_opts) {
                Ok(f) if f.converged => current = f,
                Ok(_) | Err(_) => {
                    failed += 1;
                    warn!("{}: refit at u = {u} did not converge; keeping previous parameters", model_def.name);
                }
            }
        }
        us.push(u);
        scores.push(one_step_score(&spec, &current.params, data, u)?);
    }
    Ok(ModelForecast {
        name: model_def.name.clone(),
        total: scores.iter().sum(),
        u: us,
        scores,
        lambda: current.lambda.clone(),
        refits,
        failed_refits: failed,
    })
}

/// Rolling one-step-ahead log scores for each model, for `u = u_start..=T`.
pub fn forecast_scores(
    family: Family,
    data: &TimeSeriesData,
    models: &[ForecastModel],
    options: &ForecastOptions,
) -> Result<Vec<ModelForecast>> {
    if options.u_start < 2 || options.u_start > data.len() {
        return Err(Error::InvalidInput(format!(
            "u_start {} must lie in 2..={}",
            options.u_start,
            data.len()
        )));
    }
    if options.stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    if models.is_empty() {
        return Err(Error::InvalidInput("no models to compare".into()));
    }
    for m in models {
        if m.terms.len() != data.n_covariates() {
            return Err(Error::DimensionMismatch(format!(
                "model {} lists {} terms for {} covariates",
                m.name,
                m.terms.len(),
                data.n_covariates()
            )));
        }
    }
    exec::map_indexed(models.len(), |k| forecast_one(family, data, &models[k], options, k))
        .into_iter()
        .collect()
}

/// Score trajectories as `model, u, score` rows.
pub fn write_forecast_csv<W: Write>(results: &[ModelForecast], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "u", "score"])?;
    for m in results {
        for (u, s) in m.u.iter().zip(&m.scores) {
            w.write_record([m.name.clone(), u.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Synthetic two-regime Gaussian series with nonlinear effects of one
/// covariate, used for forecast comparisons.
pub fn two_regime_config(t_len: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        id: ScenarioId::Custom,
        family: Family::normal(),
        intercepts: vec![-1.0, 2.0],
        truths: vec![
            vec![TruthCurve::Sine {
                amplitude: 1.5,
                frequency: 1.3,
            }],
            vec![TruthCurve::Quadratic {
                linear: 0.3,
                quadratic: -0.35,
            }],
        ],
        tpm: vec![vec![0.95, 0.05], vec![0.05, 0.95]],
        dispersions: vec![0.8, 0.8],
        t_len,
        runs: 1,
        k: 15,
        grid: vec![1.0, 16.0, 256.0, 4096.0],
        tying: Tying::None,
        selection: SelectionMethod::Aicp,
        cv_folds: 10,
        calib_fraction: 0.9,
        n_restarts: 5,
        seed,
        covariate_range: (-3.0, 3.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truths_pass_through_origin() {
        for cfg in [ScenarioConfig::scenario_i(), ScenarioConfig::scenario_ii(), ScenarioConfig::scenario_iii()] {
            for f in cfg.truths.iter().flatten() {
                assert_eq!(f.eval(0.0), 0.0);
            }
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn scenario_iii_differs_only_in_chain() {
        let a = ScenarioConfig::scenario_i();
        let b = ScenarioConfig::scenario_iii();
        assert_eq!(
            ScenarioConfig {
                id: a.id,
                tpm: a.tpm.clone(),
                seed: a.seed,
                ..b.clone()
            },
            a
        );
        assert_eq!(b.tpm[0][0], 0.6);
    }

    #[test]
    fn ise_examples() {
        let x = mise_grid((-3.0, 3.0));
        let zero = vec![0.0; x.len()];
        assert_eq!(integrated_squared_error(&x, &zero, &zero).unwrap(), 0.0);
        let one = vec![1.0; x.len()];
        assert!((integrated_squared_error(&x, &one, &zero).unwrap() - 6.0).abs() < 1e-12);
        let fine: Vec<f64> = (0..20001).map(|g| -3.0 + 6.0 * g as f64 / 20000.0).collect();
        let z = vec![0.0; fine.len()];
        assert!((integrated_squared_error(&fine, &fine, &z).unwrap() - 18.0).abs() < 1e-3);
        assert!(integrated_squared_error(&x, &one[1..], &zero).is_err());
    }

    #[test]
    fn simulation_shapes() {
        let s1 = ScenarioConfig::scenario_i().simulate(1).unwrap();
        assert_eq!(s1.data.len(), 300);
        assert!(s1.data.response.iter().all(|y| y.fract() == 0.0));
        let s2 = ScenarioConfig::scenario_ii().simulate(1).unwrap();
        assert_eq!(s2.data.len(), 1000);
        assert_eq!(s2.data.n_covariates(), 2);
        assert!(s2.data.covariates.iter().flatten().all(|x| (-3.0..3.0).contains(x)));
    }

    #[test]
    fn matching_recovers_permutation() {
        let grid = mise_grid((-3.0, 3.0));
        let a: Vec<f64> = grid.iter().map(|x| x.sin()).collect();
        let b: Vec<f64> = grid.iter().map(|x| 0.3 * x).collect();
        let truth = vec![vec![a.clone()], vec![b.clone()]];
        let fitted = vec![vec![b], vec![a]];
        assert_eq!(match_states(&fitted, &truth, &grid), vec![1, 0]);
    }
}
