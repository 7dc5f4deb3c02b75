//! Simulation from a fitted model and parametric-bootstrap confidence bands.

use std::io::Write;

use log::{info, warn};
use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::data::TimeSeriesData;
use crate::error::{Error, Result};
use crate::exec;
use crate::family::{Dispersion, Family};
use crate::fit::{self, FitOptions, FitResult};
use crate::hmm::MarkovChain;
use crate::model::{self, MsGamParams, MsGamSpec};
use crate::rng;

/// Simulated responses together with the hidden states (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSeries {
    pub data: TimeSeriesData,
    pub states: Vec<usize>,
}

/// Draw a state path from the chain and responses from the state-dependent
/// family, using the supplied covariate columns (raw scale). Times with a
/// missing covariate get a missing response.
pub fn simulate_series(
    spec: &MsGamSpec,
    params: &MsGamParams,
    covariates: &[Vec<f64>],
    seed: u64,
) -> Result<SimulatedSeries> {
    model::pack(params, spec)?;
    if covariates.len() != spec.terms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} covariate columns for a model with {} covariates",
            covariates.len(),
            spec.terms.len()
        )));
    }
    let t_len = covariates.first().map_or(0, Vec::len);
    if t_len == 0 {
        return Err(Error::InvalidInput("simulation needs the series length from covariates".into()));
    }
    simulate_with_length(spec, params, covariates, t_len, seed)
}

/// Like [`simulate_series`] but usable without covariates.
pub fn simulate_with_length(
    spec: &MsGamSpec,
    params: &MsGamParams,
    covariates: &[Vec<f64>],
    t_len: usize,
    seed: u64,
) -> Result<SimulatedSeries> {
    model::pack(params, spec)?;
    if covariates.iter().any(|c| c.len() != t_len) {
        return Err(Error::DimensionMismatch("covariate columns differ in length".into()));
    }
    let names = spec.terms.iter().map(|t| t.name.clone()).collect();
    let mut x = vec![0.0; covariates.len()];
    simulate_path(
        &params.chain,
        spec.family,
        &params.dispersions,
        covariates,
        names,
        t_len,
        seed,
        |s, t| {
            for (p, c) in covariates.iter().enumerate() {
                x[p] = c[t];
            }
            params.predictor_at(spec, s, &x)
        },
    )
}

/// Shared sampler: states from the chain, then responses given the state
/// predictor `eta(state, t)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_path(
    chain: &MarkovChain,
    family: Family,
    dispersions: &[f64],
    covariates: &[Vec<f64>],
    names: Vec<String>,
    t_len: usize,
    seed: u64,
    mut eta: impl FnMut(usize, usize) -> f64,
) -> Result<SimulatedSeries> {
    let n = chain.n_states();
    let bad = |e: rand::distributions::WeightedError| Error::InvalidParameter(e.to_string());
    let init = WeightedIndex::new(chain.initial()).map_err(bad)?;
    let rows: Vec<WeightedIndex<f64>> = (0..n)
        .map(|i| WeightedIndex::new(&chain.tpm_flat()[i * n..(i + 1) * n]).map_err(bad))
        .collect::<Result<Vec<_>>>()?;
    let phi = |s: usize| dispersions.get(s).map(|&d| Dispersion::new(d)).transpose();
    let mut g = rng::stream(seed, &[]);
    let mut states: Vec<usize> = Vec::with_capacity(t_len);
    let mut response = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let s = match states.last() {
            None => init.sample(&mut g),
            Some(&prev) => rows[prev].sample(&mut g),
        };
        states.push(s);
        if covariates.iter().any(|c| c[t].is_nan()) {
            response.push(f64::NAN);
            continue;
        }
        let mu = family.inverse_link(eta(s, t));
        response.push(family.sample(mu, phi(s)?, &mut g)?);
    }
    Ok(SimulatedSeries {
        data: TimeSeriesData::new(response, covariates.to_vec(), names)?,
        states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub grid_size: usize,
    pub seed: u64,
    /// Options for replicate refits; they start from the original optimum.
    pub fit: FitOptions,
    /// Largest tolerated fraction of non-converged replicate fits.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: 999,
            level: 0.95,
            grid_size: 100,
            seed: 0,
            fit: FitOptions {
                n_restarts: 1,
                compute_edf: false,
                ..FitOptions::default()
            },
            max_failure_rate: 0.2,
        }
    }
}

/// Bands for one (state, covariate) curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub state: usize,
    pub covariate: usize,
    /// Evaluation points on the raw covariate scale.
    pub x: Vec<f64>,
    pub estimate: Vec<f64>,
    pub pointwise_lower: Vec<f64>,
    pub pointwise_upper: Vec<f64>,
    pub simultaneous_lower: Vec<f64>,
    pub simultaneous_upper: Vec<f64>,
    /// Common inflation factor applied to the pointwise half-widths.
    pub scale: f64,
    /// Centred replicate curves, one per converged replicate.
    pub replicates: Vec<Vec<f64>>,
    /// Replicates lying entirely inside the simultaneous band.
    pub inside: usize,
    /// Replicates outside the pointwise band, per grid point.
    pub pointwise_exceedances: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSet {
    pub level: f64,
    pub replicates: usize,
    pub failed: usize,
    pub bands: Vec<CurveBand>,
    /// Bootstrap standard deviation of each state's intercept.
    pub intercept_sd: Vec<f64>,
}

/// Raw covariate value through which all curves of covariate `p` pass.
pub fn centering_point(spec: &MsGamSpec, data: &TimeSeriesData, p: usize) -> f64 {
    let (lo, hi) = finite_range(&data.covariates[p]);
    if lo <= 0.0 && 0.0 <= hi {
        0.0
    } else {
        spec.terms[p].standardizer.mean
    }
}

fn finite_range(v: &[f64]) -> (f64, f64) {
    v.iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Equidistant points spanning the observed range of covariate `p`.
pub fn evaluation_grid(data: &TimeSeriesData, p: usize, size: usize) -> Vec<f64> {
    let (lo, hi) = finite_range(&data.covariates[p]);
    let size = size.max(2);
    (0..size)
        .map(|g| lo + (hi - lo) * g as f64 / (size - 1) as f64)
        .collect()
}

/// Effect of covariate `p` in `state` on `grid`, shifted to be zero at `origin`.
pub fn centered_curve(spec: &MsGamSpec, params: &MsGamParams, state: usize, p: usize, grid: &[f64], origin: f64) -> Vec<f64> {
    let c = params.term_value(spec, state, p, origin);
    grid.iter().map(|&x| params.term_value(spec, state, p, x) - c).collect()
}

fn quantile(values: &[f64], tau: f64) -> f64 {
    let mut d = Data::new(values.to_vec());
    d.quantile(tau)
}

/// Pointwise and simultaneous bands from centred replicate curves.
pub fn band_from_replicates(estimate: &[f64], replicates: &[Vec<f64>], level: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, usize) {
    let g_len = estimate.len();
    let b = replicates.len();
    let mut pw_lo = estimate.to_vec();
    let mut pw_hi = estimate.to_vec();
    if b > 0 {
        let mut column = vec![0.0; b];
        for g in 0..g_len {
            for (r, rep) in replicates.iter().enumerate() {
                column[r] = rep[g];
            }
            pw_lo[g] = quantile(&column, (1.0 - level) / 2.0).min(estimate[g]);
            pw_hi[g] = quantile(&column, (1.0 + level) / 2.0).max(estimate[g]);
        }
    }
    let required = (level * b as f64).ceil() as usize;
    let lower_half: Vec<f64> = (0..g_len).map(|g| estimate[g] - pw_lo[g]).collect();
    let upper_half: Vec<f64> = (0..g_len).map(|g| pw_hi[g] - estimate[g]).collect();
    // smallest factor that puts each replicate inside
    let mut needed: Vec<f64> = replicates
        .iter()
        .map(|rep| {
            (0..g_len).fold(0.0f64, |m, g| {
                let d = rep[g] - estimate[g];
                let f = if d > 0.0 {
                    d / upper_half[g]
                } else if d < 0.0 {
                    -d / lower_half[g]
                } else {
                    0.0
                };
                m.max(f)
            })
        })
        .collect();
    needed.sort_by(f64::total_cmp);
    let mut scale = if required == 0 { 1.0 } else { needed[required - 1].max(1.0) };
    let build = |s: f64| -> (Vec<f64>, Vec<f64>) {
        (
            (0..g_len).map(|g| estimate[g] - s * lower_half[g]).collect(),
            (0..g_len).map(|g| estimate[g] + s * upper_half[g]).collect(),
        )
    };
    let count = |lo: &[f64], hi: &[f64]| -> usize {
        replicates
            .iter()
            .filter(|rep| (0..g_len).all(|g| rep[g] >= lo[g] && rep[g] <= hi[g]))
            .count()
    };
    let (mut sim_lo, mut sim_hi);
    if scale.is_finite() {
        (sim_lo, sim_hi) = build(scale);
        let mut tries = 0;
        while count(&sim_lo, &sim_hi) < required && tries < 60 {
            scale *= 1.0 + 1e-12 * 2f64.powi(tries);
            (sim_lo, sim_hi) = build(scale);
            tries += 1;
        }
    } else {
        // a zero-width pointwise band cannot be inflated: use the envelope
        sim_lo = pw_lo.clone();
        sim_hi = pw_hi.clone();
        for rep in replicates {
            for g in 0..g_len {
                sim_lo[g] = sim_lo[g].min(rep[g]);
                sim_hi[g] = sim_hi[g].max(rep[g]);
            }
        }
    }
    let inside = count(&sim_lo, &sim_hi);
    (pw_lo, pw_hi, sim_lo, sim_hi, scale, inside)
}

/// Parametric bootstrap: simulate from the fit, refit with the same λ,
/// and build bands for every (state, covariate) curve.
pub fn bootstrap_bands(
    spec: &MsGamSpec,
    fitted: &FitResult,
    data: &TimeSeriesData,
    options: &BootstrapOptions,
) -> Result<BandSet> {
    if !(options.level > 0.0 && options.level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {} outside (0, 1)", options.level)));
    }
    if options.replicates == 0 {
        return Err(Error::InvalidParameter("need at least one replicate".into()));
    }
    spec.check_data(data)?;
    if !fitted.converged {
        warn!("bootstrapping a fit that did not converge");
    }
    let start = model::pack(&fitted.params, spec)?;
    let n = spec.n_states;
    let np = spec.terms.len();
    let grids: Vec<Vec<f64>> = (0..np).map(|p| evaluation_grid(data, p, options.grid_size)).collect();
    let origins: Vec<f64> = (0..np).map(|p| centering_point(spec, data, p)).collect();
    let curves_of = |params: &MsGamParams| -> Vec<Vec<f64>> {
        (0..n)
            .flat_map(|i| (0..np).map(move |p| (i, p)))
            .map(|(i, p)| centered_curve(spec, params, i, p, &grids[p], origins[p]))
            .collect()
    };

    let batch = (options.replicates / 10).max(1);
    let results = exec::map_indexed(options.replicates, |r| {
        let seed = rng::derive_seed(options.seed, &[r as u64]);
        let sim = simulate_series(spec, &fitted.params, &data.covariates, seed).and_then(|s| {
            // keep the original missingness pattern
            let y = s
                .data
                .response
                .iter()
                .zip(&data.missing)
                .map(|(&y, &m)| if m { f64::NAN } else { y })
                .collect();
            let sim_data = data.with_response(y);
            fit::fit_from(spec, &sim_data, &fitted.lambda, &start, &FitOptions {
                seed: rng::derive_seed(options.seed, &[r as u64, 1]),
                ..options.fit
            })
        });
        if (r + 1) % batch == 0 {
            info!("bootstrap: replicate {} of {}", r + 1, options.replicates);
        }
        match sim {
            Ok(f) if f.converged => Some((curves_of(&f.params), f.params.intercepts.clone())),
            Ok(_) => None,
            Err(e) => {
                warn!("bootstrap replicate {r} failed: {e}");
                None
            }
        }
    });
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed as f64 > options.max_failure_rate * options.replicates as f64 {
        return Err(Error::TooManyFailures {
            what: "bootstrap replicate fits",
            failed,
            total: options.replicates,
        });
    }
    let ok: Vec<_> = results.into_iter().flatten().collect();
    let estimate = curves_of(&fitted.params);
    let mut bands = Vec::with_capacity(n * np);
    for (slot, est) in estimate.iter().enumerate() {
        let (i, p) = (slot / np, slot % np);
        let reps: Vec<Vec<f64>> = ok.iter().map(|(c, _)| c[slot].clone()).collect();
        let (pw_lo, pw_hi, sim_lo, sim_hi, scale, inside) = band_from_replicates(est, &reps, options.level);
        let pointwise_exceedances = (0..est.len())
            .map(|g| reps.iter().filter(|rep| rep[g] < pw_lo[g] || rep[g] > pw_hi[g]).count())
            .collect();
        bands.push(CurveBand {
            state: i,
            covariate: p,
            x: grids[p].clone(),
            estimate: est.clone(),
            pointwise_lower: pw_lo,
            pointwise_upper: pw_hi,
            simultaneous_lower: sim_lo,
            simultaneous_upper: sim_hi,
            scale,
            replicates: reps,
            inside,
            pointwise_exceedances,
        });
    }
    let intercept_sd = (0..n)
        .map(|i| {
            let v: Vec<f64> = ok.iter().map(|(_, b)| b[i]).collect();
            sample_sd(&v)
        })
        .collect();
    Ok(BandSet {
        level: options.level,
        replicates: options.replicates,
        failed,
        bands,
        intercept_sd,
    })
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// One row of the band CSV (`state` is 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub state: usize,
    pub covariate: String,
    pub x: f64,
    pub estimate: f64,
    pub pw_lo: f64,
    pub pw_hi: f64,
    pub sim_lo: f64,
    pub sim_hi: f64,
}

impl BandSet {
    pub fn rows(&self, spec: &MsGamSpec) -> Vec<BandRow> {
        self.bands
            .iter()
            .flat_map(|b| {
                (0..b.x.len()).map(move |g| BandRow {
                    state: b.state + 1,
                    covariate: spec.terms[b.covariate].name.clone(),
                    x: b.x[g],
                    estimate: b.estimate[g],
                    pw_lo: b.pointwise_lower[g],
                    pw_hi: b.pointwise_upper[g],
                    sim_lo: b.simultaneous_lower[g],
                    sim_hi: b.simultaneous_upper[g],
                })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, spec: &MsGamSpec, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows(spec) {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use crate::hmm::MarkovChain;
    use crate::model::TermChoice;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_state_poisson(t: usize) -> (MsGamSpec, MsGamParams, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..t).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let data = TimeSeriesData::unnamed(vec![1.0; t], vec![x.clone()]).unwrap();
        let spec = MsGamSpec::new(Family::poisson(), 2, &data, &[TermChoice::Linear], Default::default()).unwrap();
        let params = MsGamParams {
            intercepts: vec![0.5, 2.0],
            coefficients: vec![vec![vec![0.3]], vec![vec![-0.2]]],
            dispersions: vec![],
            chain: MarkovChain::stationary(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap(),
        };
        (spec, params, vec![x])
    }

    #[test]
    fn absorbing_start_stays_put() {
        let (spec, mut params, x) = two_state_poisson(50);
        params.chain = MarkovChain::with_initial(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 0.0]).unwrap();
        let sim = simulate_series(&spec, &params, &x, 3).unwrap();
        assert!(sim.states.iter().all(|&s| s == 0));
        assert!(sim.data.response.iter().all(|y| y.fract() == 0.0 && *y >= 0.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let (spec, params, x) = two_state_poisson(80);
        let a = simulate_series(&spec, &params, &x, 9).unwrap();
        let b = simulate_series(&spec, &params, &x, 9).unwrap();
        let c = simulate_series(&spec, &params, &x, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn path_law_matches_enumeration() {
        // T = 4 state paths against exact probabilities
        let chain = MarkovChain::stationary(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let data = TimeSeriesData::unnamed(vec![0.0; 4], vec![]).unwrap();
        let spec = MsGamSpec::new(Family::poisson(), 2, &data, &[], Default::default()).unwrap();
        let params = MsGamParams {
            intercepts: vec![0.0, 0.0],
            coefficients: vec![vec![], vec![]],
            dispersions: vec![],
            chain: chain.clone(),
        };
        let draws = 100_000;
        let mut counts = [0usize; 16];
        for s in 0..draws {
            let sim = simulate_with_length(&spec, &params, &[], 4, s as u64).unwrap();
            let code = sim.states.iter().fold(0, |c, &v| c * 2 + v);
            counts[code] += 1;
        }
        for (code, &count) in counts.iter().enumerate() {
            let path: Vec<usize> = (0..4).map(|k| (code >> (3 - k)) & 1).collect();
            let mut p = chain.initial()[path[0]];
            for w in path.windows(2) {
                p *= chain.transition(w[0], w[1]);
            }
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let f = count as f64 / draws as f64;
            assert!((f - p).abs() < 4.0 * se, "path {path:?}: {f} vs {p}");
        }
    }

    #[test]
    fn identical_replicates_give_zero_width() {
        let est = vec![0.0, 1.0, 2.0];
        let reps = vec![est.clone(); 20];
        let (lo, hi, slo, shi, _, inside) = band_from_replicates(&est, &reps, 0.95);
        assert_eq!(lo, est);
        assert_eq!(hi, est);
        assert_eq!(slo, est);
        assert_eq!(shi, est);
        assert_eq!(inside, 20);
    }

    #[test]
    fn simultaneous_band_contains_required_share() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est: Vec<f64> = (0..30).map(|g| (g as f64 / 5.0).sin()).collect();
        let reps: Vec<Vec<f64>> = (0..199)
            .map(|_| {
                let shift: f64 = rng.gen_range(-0.3..0.3);
                est.iter().map(|e| e + shift + rng.gen_range(-0.1..0.1)).collect()
            })
            .collect();
        let (lo, hi, slo, shi, scale, inside) = band_from_replicates(&est, &reps, 0.95);
        assert!(scale >= 1.0);
        assert!(inside >= 190);
        for g in 0..30 {
            assert!(slo[g] <= lo[g] && hi[g] <= shi[g]);
            assert!(lo[g] <= est[g] && est[g] <= hi[g]);
        }
    }
}
