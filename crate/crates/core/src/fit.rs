//! Penalized maximum-likelihood fitting with restarts, observed information
//! and effective degrees of freedom.

use std::path::Path;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesData;
use crate::error::{Error, Result};
use crate::exec;
use crate::family::Link;
use crate::model::{self, MsGamParams, MsGamSpec, SmoothingVector};
use crate::objective::{finite_difference_gradient, Objective, Workspace};
use crate::optim::{self, BfgsOptions};
use crate::rng;

/// How the optimizer obtains gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Exact gradient from the forward–backward recursions.
    #[default]
    Analytic,
    /// Central differences of the objective, step `1e-6 (1 + |θ_k|)`.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Number of starting points (the first is unperturbed).
    pub n_restarts: usize,
    pub seed: u64,
    /// Standard deviation of restart perturbations on the working scale.
    pub restart_sd: f64,
    pub bfgs: BfgsOptions,
    pub gradient: GradientMode,
    /// Compute ν from the observed information after fitting.
    pub compute_edf: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_restarts: 5,
            seed: 0,
            restart_sd: 0.5,
            bfgs: BfgsOptions::default(),
            gradient: GradientMode::Analytic,
            compute_edf: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// States sorted by ascending intercept.
    pub params: MsGamParams,
    /// Smoothing parameters, relabelled together with the states.
    pub lambda: SmoothingVector,
    pub loglik_unpenalized: f64,
    pub loglik_penalized: f64,
    /// Effective degrees of freedom; `None` if the information was singular.
    pub edf: Option<f64>,
    pub converged: bool,
    pub n_restarts_used: usize,
    pub optimizer_iterations: usize,
    /// Optimum in the original (unsorted) labelling, for warm starts.
    #[serde(skip)]
    pub(crate) working: Vec<f64>,
}

impl FitResult {
    /// Packed optimum in the labelling that matches the smoothing vector
    /// originally passed to the fit.
    pub fn working_vector(&self) -> &[f64] {
        &self.working
    }

    /// Rebuild a result from a saved model.
    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let d = &file.diagnostics;
        Ok(Self {
            working: model::pack(&file.params, &file.spec)?,
            params: file.params.clone(),
            lambda: file.lambda.clone(),
            loglik_unpenalized: d.loglik_unpenalized,
            loglik_penalized: d.loglik_penalized,
            edf: d.edf,
            converged: d.converged,
            n_restarts_used: d.n_restarts_used,
            optimizer_iterations: d.optimizer_iterations,
        })
    }

    /// `-2 log L + 2 ν`; infinite when ν is unavailable.
    pub fn aic_p(&self) -> f64 {
        match self.edf {
            Some(nu) => -2.0 * self.loglik_unpenalized + 2.0 * nu,
            None => f64::INFINITY,
        }
    }
}

/// Observed information at a point.
#[derive(Debug, Clone)]
pub struct Information {
    pub penalized: DMatrix<f64>,
    pub unpenalized: DMatrix<f64>,
    /// Largest absolute entry of the penalized gradient; large values mean
    /// the point is not an optimum.
    pub gradient_max_norm: f64,
}

/// Default starting vector: link of the response mean with state offsets,
/// zero smooths, persistent chain, moment-based dispersions.
pub fn initial_vector(spec: &MsGamSpec, data: &TimeSeriesData) -> Vec<f64> {
    let layout = spec.layout();
    let n = spec.n_states;
    let ys: Vec<f64> = data.observed_response().collect();
    let m = ys.len().max(1) as f64;
    let mean = ys.iter().sum::<f64>() / m;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let (centre, scale) = match spec.family.link_kind() {
        Link::Log => (mean.max(1e-3).ln(), 0.5),
        Link::Identity => (mean, 0.5 * var.sqrt().max(1e-3)),
    };
    let mut theta = vec![0.0; layout.len];
    for (i, v) in theta[..n].iter_mut().enumerate() {
        *v = centre + scale * (i as f64 - (n as f64 - 1.0) / 2.0);
    }
    if let Some(d) = layout.dispersion {
        let phi = spec.family.initial_dispersion(mean, var);
        theta[d..d + n].iter_mut().for_each(|v| *v = phi.ln());
    }
    if n > 1 {
        let off = 0.1 / (n as f64 - 1.0);
        let logit = (off / 0.9).ln();
        theta[layout.tpm..layout.tpm + n * (n - 1)].iter_mut().for_each(|v| *v = logit);
    }
    theta
}

/// Penalized negative log-likelihood at a packed vector; the flag is false
/// when the value had to be replaced by the large finite fallback.
pub fn penalized_negloglik(
    theta: &[f64],
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    lambda: &SmoothingVector,
) -> Result<(f64, bool)> {
    lambda.check(spec)?;
    let obj = Objective::new(spec, data, None)?;
    check_len(theta, &obj)?;
    Ok(obj.value(theta, lambda, &mut Workspace::default()))
}

/// Unpenalized log-likelihood of `params` on `data` (missing rows skipped).
pub fn log_likelihood(spec: &MsGamSpec, params: &MsGamParams, data: &TimeSeriesData) -> Result<f64> {
    let theta = model::pack(params, spec)?;
    let obj = Objective::new(spec, data, None)?;
    Ok(obj.loglik(&theta, &mut Workspace::default()))
}

fn check_len(theta: &[f64], obj: &Objective) -> Result<()> {
    if theta.len() != obj.dim() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, model needs {}",
            theta.len(),
            obj.dim()
        )));
    }
    Ok(())
}

struct Attempt {
    theta: Vec<f64>,
    value: f64,
    converged: bool,
    iterations: usize,
}

fn optimize(obj: &Objective, lambda: &SmoothingVector, start: &[f64], options: &FitOptions) -> Attempt {
    let mut ws = Workspace::default();
    let r = match options.gradient {
        GradientMode::Analytic => optim::bfgs(|x, g| obj.value_grad(x, lambda, &mut ws, g), start, &options.bfgs),
        GradientMode::FiniteDifference => {
            let mut ws2 = Workspace::default();
            optim::bfgs(
                |x, g| {
                    let (v, ok) = obj.value(x, lambda, &mut ws);
                    if ok {
                        finite_difference_gradient(|y| obj.value(y, lambda, &mut ws2).0, x, g);
                    } else {
                        g.iter_mut().for_each(|v| *v = 0.0);
                    }
                    (v, ok)
                },
                start,
                &options.bfgs,
            )
        }
    };
    let finite = obj.value(&r.x, lambda, &mut ws).1;
    Attempt {
        converged: r.converged && finite,
        theta: r.x,
        value: r.value,
        iterations: r.iterations,
    }
}

/// Fit with the default starting values.
pub fn fit(spec: &MsGamSpec, data: &TimeSeriesData, lambda: &SmoothingVector, options: &FitOptions) -> Result<FitResult> {
    fit_masked(spec, data, None, lambda, None, options)
}

/// Fit starting from `start` (same labelling as `lambda`), e.g. a previous
/// optimum for a nearby smoothing vector.
pub fn fit_from(
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    lambda: &SmoothingVector,
    start: &[f64],
    options: &FitOptions,
) -> Result<FitResult> {
    fit_masked(spec, data, None, lambda, Some(start), options)
}

/// General entry point: `mask` marks observations withheld from the fit.
pub fn fit_masked(
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    mask: Option<&[bool]>,
    lambda: &SmoothingVector,
    start: Option<&[f64]>,
    options: &FitOptions,
) -> Result<FitResult> {
    lambda.check(spec)?;
    if data.len() < 10 * spec.n_states {
        return Err(Error::InvalidInput(format!(
            "{} observations are too few for {} states (need at least {})",
            data.len(),
            spec.n_states,
            10 * spec.n_states
        )));
    }
    let obj = Objective::new(spec, data, mask)?;
    let base = match start {
        Some(s) => {
            check_len(s, &obj)?;
            s.to_vec()
        }
        None => initial_vector(spec, data),
    };
    let n_starts = options.n_restarts.max(1);
    let noise = Normal::new(0.0, options.restart_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let attempts = exec::map_indexed(n_starts, |r| {
        let mut x0 = base.clone();
        if r > 0 {
            let mut g = rng::stream(options.seed, &[0x5eed, r as u64]);
            x0.iter_mut().for_each(|v| *v += noise.sample(&mut g));
        }
        optimize(&obj, lambda, &x0, options)
    });
    let iterations = attempts.iter().map(|a| a.iterations).sum();
    let best = attempts
        .iter()
        .enumerate()
        .filter(|(_, a)| a.converged)
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .or_else(|| attempts.iter().enumerate().min_by(|a, b| a.1.value.total_cmp(&b.1.value)))
        .map(|(i, _)| i)
        .expect("at least one start");
    let best = &attempts[best];
    if !best.converged {
        warn!("no start converged; returning the best non-converged optimum");
    }
    debug!("fit: best penalized objective {} after {iterations} iterations", best.value);

    let mut ws = Workspace::default();
    let loglik_unpenalized = obj.loglik(&best.theta, &mut ws);
    let loglik_penalized = loglik_unpenalized - obj.penalty(&best.theta, lambda, &mut ws);
    let edf = if options.compute_edf && loglik_unpenalized.is_finite() {
        match information_for(&obj, &best.theta, lambda).and_then(|i| effective_dof(&i.penalized, &i.unpenalized)) {
            Ok(nu) => Some(nu),
            Err(e) => {
                warn!("effective degrees of freedom unavailable: {e}");
                None
            }
        }
    } else {
        None
    };
    let raw = model::unpack(&best.theta, spec)?;
    let perm = raw.intercept_order();
    Ok(FitResult {
        params: raw.permuted(&perm),
        lambda: lambda.permuted(&perm),
        loglik_unpenalized,
        loglik_penalized,
        edf,
        converged: best.converged,
        n_restarts_used: n_starts,
        optimizer_iterations: iterations,
        working: best.theta.clone(),
    })
}

fn information_for(obj: &Objective, theta: &[f64], lambda: &SmoothingVector) -> Result<Information> {
    let mut ws = Workspace::default();
    let unpenalized = optim::hessian_from_gradient(
        |x, g| {
            obj.neg_loglik_grad(x, &mut ws, g);
        },
        theta,
    )?;
    let penalized = &unpenalized + obj.penalty_hessian(lambda);
    let mut g = vec![0.0; theta.len()];
    obj.value_grad(theta, lambda, &mut ws, &mut g);
    let gradient_max_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Information {
        penalized,
        unpenalized,
        gradient_max_norm,
    })
}

/// Observed information of the penalized and unpenalized objectives at
/// `theta`: differences of the analytic gradient for the likelihood part,
/// plus the exact penalty Hessian.
pub fn observed_fisher(
    theta: &[f64],
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    lambda: &SmoothingVector,
) -> Result<Information> {
    lambda.check(spec)?;
    let obj = Objective::new(spec, data, None)?;
    check_len(theta, &obj)?;
    let info = information_for(&obj, theta, lambda)?;
    if info.gradient_max_norm > 1e-2 {
        warn!(
            "information evaluated away from an optimum (gradient max-norm {:.3e})",
            info.gradient_max_norm
        );
    }
    Ok(info)
}

/// `ν = tr(I_pen⁻¹ I_unpen)`.
pub fn effective_dof(penalized: &DMatrix<f64>, unpenalized: &DMatrix<f64>) -> Result<f64> {
    let n = penalized.nrows();
    if penalized.ncols() != n || unpenalized.shape() != (n, n) {
        return Err(Error::DimensionMismatch("information matrices must be square and equal size".into()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let lu = penalized.clone().full_piv_lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(max > 0.0) || min / max < 1e-13 {
        return Err(Error::SingularInformation);
    }
    let x = lu.solve(unpenalized).ok_or(Error::SingularInformation)?;
    let nu = x.trace();
    if nu.is_finite() {
        Ok(nu)
    } else {
        Err(Error::SingularInformation)
    }
}

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: MsGamSpec,
    pub params: MsGamParams,
    pub lambda: SmoothingVector,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub loglik_unpenalized: f64,
    pub loglik_penalized: f64,
    pub edf: Option<f64>,
    pub aic_p: Option<f64>,
    pub converged: bool,
    pub n_restarts_used: usize,
    pub optimizer_iterations: usize,
}

impl ModelFile {
    pub fn new(spec: &MsGamSpec, result: &FitResult) -> Self {
        Self {
            spec: spec.clone(),
            params: result.params.clone(),
            lambda: result.lambda.clone(),
            diagnostics: FitDiagnostics {
                loglik_unpenalized: result.loglik_unpenalized,
                loglik_penalized: result.loglik_penalized,
                edf: result.edf,
                aic_p: result.edf.map(|_| result.aic_p()),
                converged: result.converged,
                n_restarts_used: result.n_restarts_used,
                optimizer_iterations: result.optimizer_iterations,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        model::pack(&m.params, &m.spec)?;
        m.lambda.check(&m.spec)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use crate::hmm::MarkovChain;
    use crate::model::{SpecOptions, TermChoice};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edf_toy_matrices() {
        let u = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 2.0]));
        let p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 4.0]));
        assert!((effective_dof(&p, &u).unwrap() - 1.5).abs() < 1e-14);
        assert!((effective_dof(&u, &u).unwrap() - 2.0).abs() < 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(effective_dof(&s, &u), Err(Error::SingularInformation)));
    }

    fn poisson_data(t: usize, seed: u64) -> TimeSeriesData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fam = Family::poisson();
        let y = x
            .iter()
            .map(|&v| fam.sample((1.0 + 0.4 * v).exp(), None, &mut rng).unwrap())
            .collect();
        TimeSeriesData::unnamed(y, vec![x]).unwrap()
    }

    #[test]
    fn single_state_fit_converges_and_labels_are_sorted() {
        let data = poisson_data(200, 1);
        let spec = MsGamSpec::smooth(Family::poisson(), 1, &data, 5).unwrap();
        let lambda = SmoothingVector::uniform(1, 1, 10.0);
        let r = fit(&spec, &data, &lambda, &FitOptions { n_restarts: 2, ..Default::default() }).unwrap();
        assert!(r.converged);
        assert!(r.loglik_penalized <= r.loglik_unpenalized);
        let nu = r.edf.unwrap();
        assert!(nu > 2.0 && nu < 5.0, "edf {nu}");
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let data = poisson_data(60, 2);
        let spec = MsGamSpec::smooth(Family::poisson(), 2, &data, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = model::unpack(&theta, &spec).unwrap();
        let result = FitResult {
            params,
            lambda: SmoothingVector::uniform(2, 1, 1.0 / 3.0),
            loglik_unpenalized: -123.456789012345678,
            loglik_penalized: -124.1,
            edf: Some(std::f64::consts::PI),
            converged: true,
            n_restarts_used: 5,
            optimizer_iterations: 17,
            working: theta,
        };
        let file = ModelFile::new(&spec, &result);
        let back = ModelFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back, file);
    }

    #[test]
    fn finite_difference_mode_agrees() {
        let data = poisson_data(120, 4);
        let spec = MsGamSpec::new(Family::poisson(), 1, &data, &[TermChoice::Linear], SpecOptions::default()).unwrap();
        let lambda = SmoothingVector::uniform(1, 1, 0.0);
        let a = fit(&spec, &data, &lambda, &FitOptions { n_restarts: 1, ..Default::default() }).unwrap();
        let b = fit(
            &spec,
            &data,
            &lambda,
            &FitOptions {
                n_restarts: 1,
                gradient: GradientMode::FiniteDifference,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((a.loglik_unpenalized - b.loglik_unpenalized).abs() < 1e-6);
    }

    #[test]
    fn too_short_series_is_rejected() {
        let data = poisson_data(15, 5);
        let spec = MsGamSpec::smooth(Family::poisson(), 2, &data, 5).unwrap();
        let lambda = SmoothingVector::uniform(2, 1, 1.0);
        assert!(fit(&spec, &data, &lambda, &FitOptions::default()).is_err());
        let _ = MarkovChain::single();
    }
}
