//! Grid search for smoothing parameters by cross-validation or AIC_p.

use std::io::Write;

use itertools::Itertools;
use log::{debug, warn};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesData;
use crate::error::{Error, Result};
use crate::exec;
use crate::fit::{fit_masked, FitOptions, FitResult};
use crate::model::{MsGamSpec, SmoothingVector};
use crate::objective::{Objective, Workspace};
use crate::rng;

/// Which smoothing parameters share a grid axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    /// One axis per (state, covariate).
    #[default]
    None,
    /// One axis per covariate, shared by all states.
    AcrossStates,
    /// A single axis for every smooth.
    Global,
}

/// Candidate smoothing parameters; the full grid is the Cartesian product
/// over axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    /// `candidates[state][covariate]`, ascending.
    pub candidates: Vec<Vec<Vec<f64>>>,
    pub tying: Tying,
}

#[derive(Debug, Clone, PartialEq)]
struct Axis {
    slots: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(mut candidates: Vec<Vec<Vec<f64>>>, tying: Tying) -> Result<Self> {
        for set in candidates.iter_mut().flatten() {
            if set.is_empty() {
                return Err(Error::InvalidParameter("empty candidate set in smoothing grid".into()));
            }
            if set.iter().any(|&l| !(l >= 0.0) || l.is_infinite()) {
                return Err(Error::InvalidParameter(
                    "smoothing candidates must be finite and non-negative".into(),
                ));
            }
            set.sort_by(f64::total_cmp);
            set.dedup();
        }
        Ok(Self { candidates, tying })
    }

    /// Same candidate set for every (state, covariate).
    pub fn shared(n_states: usize, n_covariates: usize, values: &[f64], tying: Tying) -> Result<Self> {
        Self::new(vec![vec![values.to_vec(); n_covariates]; n_states], tying)
    }

    fn axes(&self, spec: &MsGamSpec) -> Result<Vec<Axis>> {
        if self.candidates.len() != spec.n_states || self.candidates.iter().any(|r| r.len() != spec.terms.len()) {
            return Err(Error::DimensionMismatch(format!(
                "smoothing grid must be {}×{}",
                spec.n_states,
                spec.terms.len()
            )));
        }
        let smooth: Vec<usize> = (0..spec.terms.len()).filter(|&p| spec.terms[p].is_smooth()).collect();
        let n = spec.n_states;
        let axes = match self.tying {
            Tying::None => (0..n)
                .flat_map(|i| smooth.iter().map(move |&p| (i, p)))
                .map(|(i, p)| Axis {
                    slots: vec![(i, p)],
                    values: self.candidates[i][p].clone(),
                })
                .collect(),
            Tying::AcrossStates => smooth
                .iter()
                .map(|&p| Axis {
                    slots: (0..n).map(|i| (i, p)).collect(),
                    values: self.candidates[0][p].clone(),
                })
                .collect(),
            Tying::Global => {
                if smooth.is_empty() {
                    Vec::new()
                } else {
                    vec![Axis {
                        slots: (0..n).flat_map(|i| smooth.iter().map(move |&p| (i, p))).collect(),
                        values: self.candidates[0][smooth[0]].clone(),
                    }]
                }
            }
        };
        Ok(axes)
    }

    /// Grid points in lexicographic order (last axis fastest), each with the
    /// index of the neighbour it is warm-started from.
    pub fn points(&self, spec: &MsGamSpec) -> Result<Vec<GridPoint>> {
        let axes = self.axes(spec)?;
        let dims: Vec<usize> = axes.iter().map(|a| a.values.len()).collect();
        let strides: Vec<usize> = (0..dims.len()).map(|a| dims[a + 1..].iter().product()).collect();
        let combos: Vec<Vec<usize>> = if dims.is_empty() {
            vec![Vec::new()]
        } else {
            dims.iter().map(|&d| 0..d).multi_cartesian_product().collect()
        };
        Ok(combos
            .into_iter()
            .enumerate()
            .map(|(index, idx)| {
                let mut values = vec![vec![0.0; spec.terms.len()]; spec.n_states];
                for (a, axis) in axes.iter().enumerate() {
                    for &(i, p) in &axis.slots {
                        values[i][p] = axis.values[idx[a]];
                    }
                }
                let predecessor = idx.iter().rposition(|&k| k > 0).map(|a| index - strides[a]);
                GridPoint {
                    lambda: SmoothingVector { values },
                    predecessor,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub lambda: SmoothingVector,
    pub predecessor: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Cv,
    Aicp,
}

impl SelectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Cv => "cv",
            SelectionMethod::Aicp => "aicp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub lambda: SmoothingVector,
    pub chosen_index: usize,
    /// Grid points in evaluation order.
    pub points: Vec<SmoothingVector>,
    /// Mean validation log-likelihood (CV, maximized) or AIC_p (minimized).
    pub scores: Vec<f64>,
    /// CV only: `fold_scores[fold][point]`.
    pub fold_scores: Vec<Vec<f64>>,
    pub folds: Option<usize>,
    /// AIC_p only: the fit at the chosen point on the full data.
    pub chosen_fit: Option<FitResult>,
}

/// Fit every grid point in order, warm-starting along the path. The first
/// point uses all restarts; the rest start from their predecessor.
pub(crate) fn fit_path(
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    mask: Option<&[bool]>,
    points: &[GridPoint],
    options: &FitOptions,
) -> Vec<Result<FitResult>> {
    let mut out: Vec<Result<FitResult>> = Vec::with_capacity(points.len());
    for (k, point) in points.iter().enumerate() {
        let start = point
            .predecessor
            .and_then(|q| out[q].as_ref().ok())
            .map(|f| f.working_vector().to_vec());
        let opts = match &start {
            Some(_) => FitOptions {
                n_restarts: 1,
                ..*options
            },
            None => *options,
        };
        let r = fit_masked(spec, data, mask, &point.lambda, start.as_deref(), &opts);
        if let Ok(f) = &r {
            debug!("grid point {k}: logL {:.4}, converged {}", f.loglik_unpenalized, f.converged);
        }
        out.push(r);
    }
    out
}

/// Index of the best score, breaking ties toward larger smoothing.
fn choose(points: &[SmoothingVector], scores: &[f64], maximize: bool) -> usize {
    let total = |s: &SmoothingVector| s.values.iter().flatten().sum::<f64>();
    let mut best = 0;
    for k in 1..scores.len() {
        let (a, b) = if maximize { (scores[k], scores[best]) } else { (-scores[k], -scores[best]) };
        let better = a > b || (a == b && total(&points[k]) >= total(&points[best]));
        if better {
            best = k;
        }
    }
    best
}

/// Select λ by minimizing `AIC_p = −2 log L + 2ν`.
pub fn aicp_select(
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    grid: &LambdaGrid,
    options: &FitOptions,
) -> Result<SelectionResult> {
    spec.check_data(data)?;
    let points = grid.points(spec)?;
    let opts = FitOptions {
        compute_edf: true,
        ..*options
    };
    let fits = fit_path(spec, data, None, &points, &opts);
    let mut scores = Vec::with_capacity(points.len());
    for (k, f) in fits.iter().enumerate() {
        let s = match f {
            Ok(f) if f.converged && f.edf.is_some() => f.aic_p(),
            Ok(f) if f.edf.is_none() => {
                warn!("grid point {k}: singular information, AIC_p set to +inf");
                f64::INFINITY
            }
            Ok(_) => {
                warn!("grid point {k}: fit did not converge, AIC_p set to +inf");
                f64::INFINITY
            }
            Err(e) => {
                warn!("grid point {k}: {e}");
                f64::INFINITY
            }
        };
        scores.push(s);
    }
    let lambdas: Vec<SmoothingVector> = points.into_iter().map(|p| p.lambda).collect();
    let best = choose(&lambdas, &scores, false);
    let chosen_fit = fits.into_iter().nth(best).and_then(|f| f.ok());
    Ok(SelectionResult {
        method: SelectionMethod::Aicp,
        lambda: lambdas[best].clone(),
        chosen_index: best,
        points: lambdas,
        scores,
        fold_scores: Vec::new(),
        folds: None,
        chosen_fit,
    })
}

/// How validation observations are chosen in each fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    /// Uniformly random subset.
    #[default]
    Scatter,
    /// One contiguous block at a random position.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    /// Share of observations in the calibration sample.
    pub calib_fraction: f64,
    pub mode: FoldMode,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            calib_fraction: 0.9,
            mode: FoldMode::Scatter,
            seed: 0,
            fit: FitOptions {
                compute_edf: false,
                ..FitOptions::default()
            },
        }
    }
}

/// Validation masks (`true` = held out), one per fold.
pub fn validation_masks(t_len: usize, folds: usize, calib_fraction: f64, mode: FoldMode, seed: u64) -> Vec<Vec<bool>> {
    let n_valid = (((1.0 - calib_fraction) * t_len as f64).round() as usize).clamp(1, t_len.saturating_sub(1).max(1));
    (0..folds)
        .map(|c| {
            let mut g = rng::stream(seed, &[0xf01d, c as u64]);
            let mut mask = vec![false; t_len];
            match mode {
                FoldMode::Scatter => {
                    for i in sample(&mut g, t_len, n_valid) {
                        mask[i] = true;
                    }
                }
                FoldMode::Block => {
                    let start = g.gen_range(0..=t_len - n_valid);
                    mask[start..start + n_valid].iter_mut().for_each(|m| *m = true);
                }
            }
            mask
        })
        .collect()
}

/// Log-likelihood of the held-out observations, with the calibration sample
/// treated as missing.
pub fn validation_loglik(
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    validation: &[bool],
    theta: &[f64],
) -> Result<f64> {
    let calib: Vec<bool> = validation.iter().map(|v| !v).collect();
    let obj = Objective::new(spec, data, Some(&calib))?;
    if theta.len() != obj.dim() {
        return Err(Error::DimensionMismatch("parameter vector does not match the model".into()));
    }
    Ok(obj.loglik(theta, &mut Workspace::default()))
}

/// Select λ by maximizing the mean validation log-likelihood over folds.
pub fn cv_select(
    spec: &MsGamSpec,
    data: &TimeSeriesData,
    grid: &LambdaGrid,
    options: &CvOptions,
) -> Result<SelectionResult> {
    spec.check_data(data)?;
    if options.folds < 2 {
        return Err(Error::InvalidParameter("cross-validation needs at least 2 folds".into()));
    }
    if !(options.calib_fraction > 0.5 && options.calib_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "calibration fraction {} must lie in (0.5, 1)",
            options.calib_fraction
        )));
    }
    let points = grid.points(spec)?;
    let masks = validation_masks(data.len(), options.folds, options.calib_fraction, options.mode, options.seed);
    let fold_scores: Vec<Vec<f64>> = exec::map_indexed(options.folds, |c| {
        let fit_opts = FitOptions {
            seed: rng::derive_seed(options.fit.seed, &[c as u64]),
            ..options.fit
        };
        let fits = fit_path(spec, data, Some(&masks[c]), &points, &fit_opts);
        fits.iter()
            .enumerate()
            .map(|(k, f)| match f {
                Ok(f) if f.converged => validation_loglik(spec, data, &masks[c], f.working_vector())
                    .ok()
                    .filter(|v| !v.is_nan())
                    .unwrap_or(f64::NEG_INFINITY),
                Ok(_) => {
                    warn!("fold {c}, grid point {k}: fit did not converge, score set to -inf");
                    f64::NEG_INFINITY
                }
                Err(e) => {
                    warn!("fold {c}, grid point {k}: {e}");
                    f64::NEG_INFINITY
                }
            })
            .collect()
    });
    let scores: Vec<f64> = (0..points.len())
        .map(|k| fold_scores.iter().map(|f| f[k]).sum::<f64>() / options.folds as f64)
        .collect();
    let lambdas: Vec<SmoothingVector> = points.into_iter().map(|p| p.lambda).collect();
    let best = choose(&lambdas, &scores, true);
    Ok(SelectionResult {
        method: SelectionMethod::Cv,
        lambda: lambdas[best].clone(),
        chosen_index: best,
        points: lambdas,
        scores,
        fold_scores,
        folds: Some(options.folds),
        chosen_fit: None,
    })
}

impl SelectionResult {
    /// Score table: `method, fold, λ columns..., score`. Per-fold rows come
    /// first (CV), then one summary row per grid point with fold `-`.
    pub fn write_csv<W: Write>(&self, spec: &MsGamSpec, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string(), "fold".to_string()];
        for i in 0..spec.n_states {
            for t in &spec.terms {
                header.push(format!("lambda_s{}_{}", i + 1, t.name));
            }
        }
        header.push("score".into());
        w.write_record(&header)?;
        let row = |fold: String, lambda: &SmoothingVector, score: f64| -> Vec<String> {
            let mut r = vec![self.method.name().to_string(), fold];
            r.extend(lambda.values.iter().flatten().map(|v| v.to_string()));
            r.push(score.to_string());
            r
        };
        for (c, scores) in self.fold_scores.iter().enumerate() {
            for (k, s) in scores.iter().enumerate() {
                w.write_record(row((c + 1).to_string(), &self.points[k], *s))?;
            }
        }
        for (k, s) in self.scores.iter().enumerate() {
            w.write_record(row("-".into(), &self.points[k], *s))?;
        }
        w.flush()?;
        Ok(())
    }
}
