//! End-to-end checks against independently computed references.

use msgam::bootstrap::{bootstrap_bands, BandRow, BootstrapOptions};
use msgam::experiments::{one_step_score, ScenarioConfig};
use msgam::fit::penalized_negloglik;
use msgam::smoothing::{aicp_select, validation_loglik, validation_masks, FoldMode, LambdaGrid, Tying};
use msgam::{
    fit, observed_fisher, pack, Family, FitOptions, MsGamSpec, SmoothingVector, SpecOptions, TermChoice,
    TimeSeriesData,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn poisson_linear_data(t_len: usize, seed: u64) -> TimeSeriesData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let y = x
        .iter()
        .map(|&v| Family::poisson().sample((0.7 - 0.35 * v).exp(), None, &mut rng).unwrap())
        .collect();
    TimeSeriesData::unnamed(y, vec![x]).unwrap()
}

fn linear_spec(data: &TimeSeriesData) -> MsGamSpec {
    MsGamSpec::new(Family::poisson(), 1, data, &[TermChoice::Linear], SpecOptions::default()).unwrap()
}

/// Poisson GLM on design `[1, z]` by iteratively reweighted least squares.
fn irls(z: &[f64], y: &[f64]) -> [f64; 2] {
    let mut b = [(y.iter().sum::<f64>() / y.len() as f64).ln(), 0.0];
    for _ in 0..200 {
        let (mut a, mut r) = ([0.0; 3], [0.0; 2]);
        for (&zi, &yi) in z.iter().zip(y) {
            let eta = b[0] + b[1] * zi;
            let mu = eta.exp();
            let w = eta + (yi - mu) / mu;
            a[0] += mu;
            a[1] += mu * zi;
            a[2] += mu * zi * zi;
            r[0] += mu * w;
            r[1] += mu * zi * w;
        }
        let det = a[0] * a[2] - a[1] * a[1];
        let next = [(a[2] * r[0] - a[1] * r[1]) / det, (a[0] * r[1] - a[1] * r[0]) / det];
        let done = (next[0] - b[0]).abs().max((next[1] - b[1]).abs()) < 1e-15;
        b = next;
        if done {
            break;
        }
    }
    b
}

#[test]
fn single_state_linear_fit_matches_glm() {
    let data = poisson_linear_data(400, 1);
    let spec = linear_spec(&data);
    let f = fit(&spec, &data, &SmoothingVector::uniform(1, 1, 0.0), &FitOptions::default()).unwrap();
    assert!(f.converged);
    let z: Vec<f64> = data.covariates[0].iter().map(|&x| spec.terms[0].standardizer.apply(x)).collect();
    let b = irls(&z, &data.response);
    let coef = f.params.coefficients[0][0][0];
    let intercept_z0 = f.params.intercepts[0];
    assert!((intercept_z0 - b[0]).abs() < 1e-6, "{intercept_z0} vs {}", b[0]);
    assert!((coef - b[1]).abs() < 1e-6, "{coef} vs {}", b[1]);
}

#[test]
fn information_matches_glm_and_difference_hessian() {
    let data = poisson_linear_data(300, 2);
    let spec = linear_spec(&data);
    let lambda = SmoothingVector::uniform(1, 1, 0.0);
    let f = fit(&spec, &data, &lambda, &FitOptions::default()).unwrap();
    let theta = pack(&f.params, &spec).unwrap();
    let info = observed_fisher(&theta, &spec, &data, &lambda).unwrap();

    // expected information of the GLM: Σ μ [1 z; z z²]
    let mut glm = [0.0; 3];
    for &x in &data.covariates[0] {
        let z = spec.terms[0].standardizer.apply(x);
        let mu = (theta[0] + theta[1] * z).exp();
        glm[0] += mu;
        glm[1] += mu * z;
        glm[2] += mu * z * z;
    }
    // at the MLE the observed and expected information coincide for a canonical link
    let h = &info.unpenalized;
    for (got, want) in [(h[(0, 0)], glm[0]), (h[(0, 1)], glm[1]), (h[(1, 0)], glm[1]), (h[(1, 1)], glm[2])] {
        assert!((got - want).abs() <= 1e-3 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn penalized_information_matches_value_differences() {
    let config = ScenarioConfig::scenario_i();
    let sim = config.simulate(4).unwrap();
    let spec = MsGamSpec::smooth(config.family, 2, &sim.data, 7).unwrap();
    let lambda = SmoothingVector::uniform(2, 1, 30.0);
    let f = fit(&spec, &sim.data, &lambda, &FitOptions::default()).unwrap();
    let theta = pack(&f.params, &spec).unwrap();
    let info = observed_fisher(&theta, &spec, &sim.data, &lambda).unwrap();
    let value = |x: &[f64]| penalized_negloglik(x, &spec, &sim.data, &lambda).unwrap().0;
    let d = theta.len();
    let scale = info.penalized.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in 0..d {
            let (hi, hj) = (1e-4 * (1.0 + theta[i].abs()), 1e-4 * (1.0 + theta[j].abs()));
            let at = |si: f64, sj: f64| {
                let mut x = theta.clone();
                x[i] += si * hi;
                x[j] += sj * hj;
                value(&x)
            };
            let fd = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * hi * hj);
            let got = info.penalized[(i, j)];
            assert!((got - fd).abs() < 1e-4 * scale, "({i}, {j}): {got} vs {fd}");
        }
    }
}

#[test]
fn aic_at_zero_smoothing_counts_every_parameter() {
    let config = ScenarioConfig::scenario_i();
    let sim = config.simulate(6).unwrap();
    let spec = MsGamSpec::smooth(config.family, 2, &sim.data, 9).unwrap();
    let f = fit(&spec, &sim.data, &SmoothingVector::uniform(2, 1, 0.0), &FitOptions::default()).unwrap();
    let nu = f.edf.expect("information is regular");
    assert!((nu - spec.n_params() as f64).abs() < 1e-6);
    let expected = -2.0 * f.loglik_unpenalized + 2.0 * spec.n_params() as f64;
    assert!((f.aic_p() - expected).abs() < 1e-5);
}

#[test]
fn label_permutation_leaves_likelihood_unchanged() {
    let config = ScenarioConfig::scenario_ii();
    let sim = config.simulate(8).unwrap();
    let spec = MsGamSpec::smooth(config.family, 2, &sim.data, 7).unwrap();
    let f = fit(&spec, &sim.data, &SmoothingVector::uniform(2, 2, 10.0), &FitOptions {
        n_restarts: 1,
        ..FitOptions::default()
    })
    .unwrap();
    let swapped = f.params.permuted(&[1, 0]);
    let a = msgam::fit::log_likelihood(&spec, &f.params, &sim.data).unwrap();
    let b = msgam::fit::log_likelihood(&spec, &swapped, &sim.data).unwrap();
    assert!((a - b).abs() < 1e-9 * a.abs());
    // reported states are sorted by intercept
    assert!(f.params.intercepts[0] <= f.params.intercepts[1]);
}

#[test]
fn validation_score_equals_forward_on_masked_series() {
    let config = ScenarioConfig::scenario_i();
    let sim = config.simulate(9).unwrap();
    let spec = MsGamSpec::smooth(config.family, 2, &sim.data, 7).unwrap();
    let f = fit(&spec, &sim.data, &SmoothingVector::uniform(2, 1, 5.0), &FitOptions {
        n_restarts: 1,
        ..FitOptions::default()
    })
    .unwrap();
    let theta = pack(&f.params, &spec).unwrap();
    for mode in [FoldMode::Scatter, FoldMode::Block] {
        let mask = &validation_masks(sim.data.len(), 1, 0.9, mode, 3)[0];
        let got = validation_loglik(&spec, &sim.data, mask, &theta).unwrap();
        // rebuild the series with calibration responses blanked
        let y = sim
            .data
            .response
            .iter()
            .zip(mask)
            .map(|(&v, &held_out)| if held_out { v } else { f64::NAN })
            .collect();
        let masked = sim.data.with_response(y);
        let want = msgam::fit::log_likelihood(&spec, &f.params, &masked).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn single_state_forecast_score_is_the_density() {
    let data = poisson_linear_data(60, 5);
    let spec = linear_spec(&data);
    let f = fit(&spec, &data, &SmoothingVector::uniform(1, 1, 0.0), &FitOptions::default()).unwrap();
    for u in [2, 17, 60] {
        let mu = f.params.predictor_at(&spec, 0, &[data.covariates[0][u - 1]]).exp();
        let y = data.response[u - 1];
        let mut ln_fact = 0.0;
        for k in 2..=(y as u64) {
            ln_fact += (k as f64).ln();
        }
        let want = y * mu.ln() - mu - ln_fact;
        let got = one_step_score(&spec, &f.params, &data, u).unwrap();
        assert!((got - want).abs() < 1e-9, "u = {u}: {got} vs {want}");
    }
}

#[test]
fn single_state_intercept_within_bootstrap_error() {
    let data = poisson_linear_data(300, 12);
    let spec = MsGamSpec::smooth(Family::poisson(), 1, &data, 9).unwrap();
    let f = fit(&spec, &data, &SmoothingVector::uniform(1, 1, 10.0), &FitOptions::default()).unwrap();
    let set = bootstrap_bands(&spec, &f, &data, &BootstrapOptions {
        replicates: 99,
        seed: 4,
        ..BootstrapOptions::default()
    })
    .unwrap();
    // the truth at the standardized origin
    let x0 = spec.terms[0].standardizer.invert(0.0);
    let truth = 0.7 - 0.35 * x0;
    let est = f.params.predictor_at(&spec, 0, &[x0]);
    assert!((est - truth).abs() < 3.0 * set.intercept_sd[0].max(0.02), "{est} vs {truth}");

    let mut buf = Vec::new();
    set.write_csv(&spec, &mut buf).unwrap();
    let back: Vec<BandRow> = csv::Reader::from_reader(&buf[..]).deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(back, set.rows(&spec));
}

#[test]
fn selection_is_reproducible_and_scores_finite() {
    let config = ScenarioConfig::scenario_i();
    let sim = config.simulate(13).unwrap();
    let spec = MsGamSpec::smooth(config.family, 2, &sim.data, 9).unwrap();
    let grid = LambdaGrid::shared(2, 1, &[1.0, 100.0], Tying::None).unwrap();
    let opts = FitOptions {
        n_restarts: 2,
        seed: 5,
        ..FitOptions::default()
    };
    let a = aicp_select(&spec, &sim.data, &grid, &opts).unwrap();
    let b = aicp_select(&spec, &sim.data, &grid, &opts).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.lambda, b.lambda);
    assert!(a.scores.iter().all(|s| s.is_finite()));
    let best = a.scores.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(a.scores[a.chosen_index], best);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalized_objective_grows_with_smoothing(
        coefs in proptest::collection::vec(-2.0f64..2.0, 6),
        l1 in 0.0f64..100.0,
        dl in 0.0f64..100.0,
    ) {
        let data = poisson_linear_data(40, 3);
        let spec = MsGamSpec::smooth(Family::poisson(), 1, &data, 7).unwrap();
        let mut theta = vec![0.5];
        theta.extend(&coefs);
        let lo = penalized_negloglik(&theta, &spec, &data, &SmoothingVector::uniform(1, 1, l1)).unwrap().0;
        let hi = penalized_negloglik(&theta, &spec, &data, &SmoothingVector::uniform(1, 1, l1 + dl)).unwrap().0;
        prop_assert!(hi >= lo - 1e-9 * lo.abs());
    }
}
