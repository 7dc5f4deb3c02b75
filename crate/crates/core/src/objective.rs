//! Penalized log-likelihood on the packed parameter vector, with an analytic
//! gradient from the forward–backward recursions.

use nalgebra::DMatrix;

use crate::basis::PenaltyMatrix;
use crate::data::TimeSeriesData;
use crate::error::Result;
use crate::family::ObservationTerms;
use crate::hmm::{self, ForwardOutcome, ForwardWork};
use crate::model::{self, Design, Layout, MsGamSpec, SmoothingVector};

/// Objective value used in place of a non-finite one.
pub const NON_FINITE_OBJECTIVE: f64 = 1e10;

#[derive(Debug, Default, Clone)]
pub(crate) struct Workspace {
    coef: Vec<f64>,
    eta: Vec<f64>,
    log_dens: Vec<f64>,
    tpm: Vec<f64>,
    init: Vec<f64>,
    fw: ForwardWork,
    post: Vec<f64>,
    trans: Vec<f64>,
    g_eta: Vec<f64>,
    gamma: Vec<f64>,
    pen: Vec<f64>,
}

pub(crate) struct Objective<'a> {
    pub spec: &'a MsGamSpec,
    pub layout: Layout,
    design: Design,
    obs: Vec<ObservationTerms>,
    missing: Vec<bool>,
    penalties: Vec<Option<PenaltyMatrix>>,
    stride: usize,
    /// packed index of each full coefficient, `[state][covariate][k]`, or -1
    free_map: Vec<isize>,
}

impl<'a> Objective<'a> {
    /// `mask` marks extra observations to treat as missing.
    pub fn new(spec: &'a MsGamSpec, data: &TimeSeriesData, mask: Option<&[bool]>) -> Result<Self> {
        spec.check_data(data)?;
        let layout = spec.layout();
        let stride = model::coefficient_stride(spec);
        let n = spec.n_states;
        let np = spec.terms.len();
        let mut free_map = vec![-1isize; n * np * stride];
        for i in 0..n {
            for (p, term) in spec.terms.iter().enumerate() {
                for k in 0..term.n_coefficients() {
                    if let Some(idx) = layout.free_index(term, i, p, k) {
                        free_map[(i * np + p) * stride + k] = idx as isize;
                    }
                }
            }
        }
        let missing = match mask {
            Some(m) => data.missing.iter().zip(m).map(|(a, b)| *a || *b).collect(),
            None => data.missing.clone(),
        };
        Ok(Self {
            spec,
            layout,
            design: Design::new(spec, data),
            obs: data
                .response
                .iter()
                .map(|&y| ObservationTerms::new(spec.family, y))
                .collect(),
            missing,
            penalties: spec.penalties(),
            stride,
            free_map,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.len
    }

    /// Fill densities and chain; returns false if the chain is unusable.
    fn prepare(&self, theta: &[f64], ws: &mut Workspace) -> bool {
        let spec = self.spec;
        let n = spec.n_states;
        model::expand_coefficients(spec, &self.layout, theta, &mut ws.coef, self.stride);
        model::fill_predictor(spec, &self.design, &theta[..n], &ws.coef, self.stride, &mut ws.eta);
        ws.log_dens.clear();
        ws.log_dens.resize(ws.eta.len(), 0.0);
        let family = spec.family;
        for t in 0..self.design.t_len {
            if self.missing[t] {
                continue;
            }
            let obs = &self.obs[t];
            for j in 0..n {
                let phi = self.layout.dispersion.map_or(1.0, |d| theta[d + j].exp());
                ws.log_dens[t * n + j] = family.log_density_eta(obs, ws.eta[t * n + j], phi);
            }
        }
        if n == 1 {
            ws.tpm = vec![1.0];
            ws.init = vec![1.0];
            return true;
        }
        ws.tpm = model::tpm_from_logits(n, &theta[self.layout.tpm..self.layout.tpm + n * (n - 1)]);
        match self.layout.init {
            Some(off) => {
                ws.init = model::softmax_with_reference(&theta[off..off + n - 1]);
                true
            }
            None => match hmm::stationary_flat(&ws.tpm, n) {
                Ok(d) => {
                    ws.init = d;
                    true
                }
                Err(_) => false,
            },
        }
    }

    fn run_forward(&self, ws: &mut Workspace) -> f64 {
        let n = self.spec.n_states;
        match hmm::forward_scaled(n, &ws.tpm, &ws.init, &ws.log_dens, |t| self.missing[t], &mut ws.fw) {
            Ok(ForwardOutcome::Finite(ll)) => ll,
            Ok(ForwardOutcome::Impossible) => f64::NEG_INFINITY,
            Err(_) => f64::NAN,
        }
    }

    /// Unpenalized log-likelihood; `NaN` when it cannot be evaluated.
    pub fn loglik(&self, theta: &[f64], ws: &mut Workspace) -> f64 {
        if theta.iter().any(|v| !v.is_finite()) || !self.prepare(theta, ws) {
            return f64::NAN;
        }
        self.run_forward(ws)
    }

    /// Log-likelihood and its gradient (written to `grad`). On a non-finite
    /// value the gradient is zero.
    pub fn loglik_grad(&self, theta: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let ll = self.loglik(theta, ws);
        if !ll.is_finite() {
            return ll;
        }
        let spec = self.spec;
        let n = spec.n_states;
        let np = spec.terms.len();
        let t_len = self.design.t_len;
        ws.post.resize(t_len * n, 0.0);
        ws.trans.resize(n * n, 0.0);
        hmm::backward_posteriors(n, &ws.tpm, &mut ws.fw, &mut ws.post, &mut ws.trans);

        ws.g_eta.clear();
        ws.g_eta.resize(t_len * n, 0.0);
        let family = spec.family;
        for t in 0..t_len {
            if self.missing[t] {
                continue;
            }
            let obs = &self.obs[t];
            for j in 0..n {
                let w = ws.post[t * n + j];
                let phi = self.layout.dispersion.map_or(1.0, |d| theta[d + j].exp());
                let (s_eta, s_phi) = family.score_eta(obs, ws.eta[t * n + j], phi);
                ws.g_eta[t * n + j] = w * s_eta;
                grad[j] += w * s_eta;
                if let Some(d) = self.layout.dispersion {
                    grad[d + j] += w * s_phi;
                }
            }
        }
        for (p, td) in self.design.terms.iter().enumerate() {
            match td {
                model::TermDesign::Smooth { start, values } => {
                    for t in 0..t_len {
                        if self.missing[t] {
                            continue;
                        }
                        let s = start[t] as usize;
                        let v = &values[t];
                        for j in 0..n {
                            let ge = ws.g_eta[t * n + j];
                            let map = &self.free_map[(j * np + p) * self.stride + s..];
                            for r in 0..4 {
                                if map[r] >= 0 {
                                    grad[map[r] as usize] += ge * v[r];
                                }
                            }
                        }
                    }
                }
                model::TermDesign::Linear { z } => {
                    for j in 0..n {
                        let idx = self.layout.coef_offset[j][p];
                        let mut s = 0.0;
                        for t in 0..t_len {
                            if !self.missing[t] {
                                s += ws.g_eta[t * n + j] * z[t];
                            }
                        }
                        grad[idx] += s;
                    }
                }
            }
        }
        if n > 1 {
            self.chain_gradient(ws, grad);
        }
        ll
    }

    fn chain_gradient(&self, ws: &Workspace, grad: &mut [f64]) {
        let n = self.spec.n_states;
        let tpm = &ws.tpm;
        // d logL / d Γ_ij through δ, for the stationary case
        let mut via_init = vec![0.0; n * n];
        match self.layout.init {
            None => {
                if let Ok((delta, a_inv)) = hmm::stationary_system(tpm, n) {
                    let w: Vec<f64> = (0..n)
                        .map(|k| if delta[k] > 0.0 { ws.post[k] / delta[k] } else { 0.0 })
                        .collect();
                    for j in 0..n {
                        let v: f64 = (0..n).map(|k| a_inv[(j, k)] * w[k]).sum();
                        for i in 0..n {
                            via_init[i * n + j] = delta[i] * v;
                        }
                    }
                }
            }
            Some(off) => {
                for j in 1..n {
                    grad[off + j - 1] = ws.post[j] - ws.init[j];
                }
            }
        }
        let mut at = self.layout.tpm;
        for i in 0..n {
            let row_counts: f64 = (0..n).map(|k| ws.trans[i * n + k]).sum();
            let row_init: f64 = (0..n).map(|k| tpm[i * n + k] * via_init[i * n + k]).sum();
            for j in (0..n).filter(|&j| j != i) {
                let g = tpm[i * n + j];
                grad[at] = ws.trans[i * n + j] - g * row_counts + g * (via_init[i * n + j] - row_init);
                at += 1;
            }
        }
    }

    fn for_each_smooth(&self, theta: &[f64], ws: &mut Workspace, mut f: impl FnMut(usize, usize, &PenaltyMatrix, &[f64])) {
        let n = self.spec.n_states;
        for i in 0..n {
            for (p, term) in self.spec.terms.iter().enumerate() {
                if let Some(pm) = &self.penalties[p] {
                    ws.gamma.clear();
                    ws.gamma.extend((0..term.n_coefficients()).map(|k| {
                        self.layout.free_index(term, i, p, k).map_or(0.0, |idx| theta[idx])
                    }));
                    f(i, p, pm, &ws.gamma);
                }
            }
        }
    }

    /// `Σ λ/2 γᵀ M γ`.
    pub fn penalty(&self, theta: &[f64], lambda: &SmoothingVector, ws: &mut Workspace) -> f64 {
        let mut total = 0.0;
        self.for_each_smooth(theta, ws, |i, p, pm, gamma| {
            let l = lambda.get(i, p);
            if l > 0.0 {
                total += 0.5 * l * pm.quadratic_form(gamma);
            }
        });
        total
    }

    /// Adds the penalty gradient to `grad`.
    fn add_penalty_grad(&self, theta: &[f64], lambda: &SmoothingVector, ws: &mut Workspace, grad: &mut [f64]) {
        let mut pen = std::mem::take(&mut ws.pen);
        self.for_each_smooth(theta, ws, |i, p, pm, gamma| {
            let l = lambda.get(i, p);
            if l == 0.0 {
                return;
            }
            pen.clear();
            pen.resize(gamma.len(), 0.0);
            pm.apply(gamma, &mut pen);
            let term = &self.spec.terms[p];
            for (k, v) in pen.iter().enumerate() {
                if let Some(idx) = self.layout.free_index(term, i, p, k) {
                    grad[idx] += l * v;
                }
            }
        });
        ws.pen = pen;
    }

    /// Hessian of the penalty: `λ M` blocks on the free coefficients.
    pub fn penalty_hessian(&self, lambda: &SmoothingVector) -> DMatrix<f64> {
        let dim = self.dim();
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..self.spec.n_states {
            for (p, term) in self.spec.terms.iter().enumerate() {
                let (Some(pm), l) = (&self.penalties[p], lambda.get(i, p)) else {
                    continue;
                };
                for a in 0..pm.dim() {
                    let Some(ia) = self.layout.free_index(term, i, p, a) else { continue };
                    for b in 0..pm.dim() {
                        if let Some(ib) = self.layout.free_index(term, i, p, b) {
                            h[(ia, ib)] += l * pm.matrix[(a, b)];
                        }
                    }
                }
            }
        }
        h
    }

    /// Penalized negative log-likelihood and its gradient.
    /// Returns `(value, finite)`; non-finite values become
    /// [`NON_FINITE_OBJECTIVE`] with a zero gradient.
    pub fn value_grad(
        &self,
        theta: &[f64],
        lambda: &SmoothingVector,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> (f64, bool) {
        let ll = self.loglik_grad(theta, ws, grad);
        if !ll.is_finite() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return (NON_FINITE_OBJECTIVE, false);
        }
        grad.iter_mut().for_each(|g| *g = -*g);
        self.add_penalty_grad(theta, lambda, ws, grad);
        let v = -ll + self.penalty(theta, lambda, ws);
        if v.is_finite() && grad.iter().all(|g| g.is_finite()) {
            (v, true)
        } else {
            grad.iter_mut().for_each(|g| *g = 0.0);
            (NON_FINITE_OBJECTIVE, false)
        }
    }

    /// Penalized negative log-likelihood only.
    pub fn value(&self, theta: &[f64], lambda: &SmoothingVector, ws: &mut Workspace) -> (f64, bool) {
        let ll = self.loglik(theta, ws);
        let v = -ll + self.penalty(theta, lambda, ws);
        if v.is_finite() {
            (v, true)
        } else {
            (NON_FINITE_OBJECTIVE, false)
        }
    }

    /// Gradient of the unpenalized negative log-likelihood, for Hessians.
    pub fn neg_loglik_grad(&self, theta: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        let ll = self.loglik_grad(theta, ws, grad);
        grad.iter_mut().for_each(|g| *g = -*g);
        -ll
    }
}

/// Central-difference gradient of `f` with step `1e-6 (1 + |x_k|)`.
pub fn finite_difference_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &mut [f64]) {
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-6 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        grad[k] = (fp - fm) / (2.0 * h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use crate::hmm::InitMode;
    use crate::model::{unpack, SpecOptions, TermChoice};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data_for(family: Family, t: usize, seed: u64, missing_every: usize) -> TimeSeriesData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1: Vec<f64> = (0..t).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x2: Vec<f64> = (0..t).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = (0..t)
            .map(|s| {
                if missing_every > 0 && s % missing_every == 3 {
                    return f64::NAN;
                }
                match family.kind() {
                    crate::family::FamilyKind::Poisson => rng.gen_range(0..8) as f64,
                    crate::family::FamilyKind::Normal => rng.gen_range(-3.0..3.0),
                    crate::family::FamilyKind::Gamma => rng.gen_range(0.2..4.0),
                }
            })
            .collect();
        TimeSeriesData::unnamed(y, vec![x1, x2]).unwrap()
    }

    fn check_gradient(family: Family, n: usize, init_mode: InitMode, seed: u64) {
        let data = data_for(family, 60, seed, 7);
        let spec = MsGamSpec::new(
            family,
            n,
            &data,
            &[TermChoice::Smooth, TermChoice::Linear],
            SpecOptions {
                k: 7,
                init_mode,
                ..Default::default()
            },
        )
        .unwrap();
        let obj = Objective::new(&spec, &data, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let theta: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let lambda = SmoothingVector::uniform(n, 2, 3.0);
        let mut ws = Workspace::default();
        let mut g = vec![0.0; obj.dim()];
        let (v, ok) = obj.value_grad(&theta, &lambda, &mut ws, &mut g);
        assert!(ok);
        let (v2, _) = obj.value(&theta, &lambda, &mut ws);
        assert!((v - v2).abs() < 1e-10);
        let mut fd = vec![0.0; obj.dim()];
        finite_difference_gradient(|x| obj.value(x, &lambda, &mut Workspace::default()).0, &theta, &mut fd);
        for k in 0..obj.dim() {
            assert!(
                (g[k] - fd[k]).abs() < 1e-5 * (1.0 + fd[k].abs()),
                "{family:?} n={n} {init_mode:?} k={k}: analytic {} vs fd {}",
                g[k],
                fd[k]
            );
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for (s, family) in [Family::poisson(), Family::normal(), Family::gamma()].into_iter().enumerate() {
            for n in 1..=3 {
                check_gradient(family, n, InitMode::Stationary, s as u64 * 10 + n as u64);
                check_gradient(family, n, InitMode::Estimated, s as u64 * 10 + n as u64 + 50);
            }
        }
    }

    #[test]
    fn likelihood_matches_public_forward() {
        let family = Family::poisson();
        let data = data_for(family, 40, 9, 5);
        let spec = MsGamSpec::smooth(family, 2, &data, 5).unwrap();
        let obj = Objective::new(&spec, &data, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let params = unpack(&theta, &spec).unwrap();
        let ld = model::state_log_densities(&spec, &params, &data).unwrap();
        let r = hmm::forward_loglik(&params.chain, &ld, &data.missing).unwrap();
        let mut ws = Workspace::default();
        assert!((obj.loglik(&theta, &mut ws) - r.log_likelihood).abs() < 1e-10);
    }

    #[test]
    fn penalty_hessian_matches_gradient_differences() {
        let family = Family::normal();
        let data = data_for(family, 30, 4, 0);
        let spec = MsGamSpec::smooth(family, 2, &data, 7).unwrap();
        let obj = Objective::new(&spec, &data, None).unwrap();
        let lambda = SmoothingVector::new(vec![vec![1.0, 2.0], vec![3.0, 0.5]]).unwrap();
        let h = obj.penalty_hessian(&lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut ws = Workspace::default();
        // quadratic: penalty = θᵀHθ / 2
        let p = obj.penalty(&theta, &lambda, &mut ws);
        let tv = nalgebra::DVector::from_vec(theta.clone());
        assert!((p - 0.5 * (tv.transpose() * &h * &tv)[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn mask_drops_observations() {
        let family = Family::normal();
        let data = data_for(family, 30, 4, 0);
        let spec = MsGamSpec::smooth(family, 1, &data, 5).unwrap();
        let mut mask = vec![false; 30];
        mask[10] = true;
        let full = Objective::new(&spec, &data, None).unwrap();
        let masked = Objective::new(&spec, &data, Some(&mask)).unwrap();
        let theta = vec![0.1; full.dim()];
        let mut ws = Workspace::default();
        let params = unpack(&theta, &spec).unwrap();
        let eta = model::predictor_matrix(&spec, &params, &data).unwrap();
        let d10 = family
            .log_density(data.response[10], eta[10], params.dispersion(0))
            .unwrap();
        let diff = full.loglik(&theta, &mut ws) - masked.loglik(&theta, &mut ws);
        assert!((diff - d10).abs() < 1e-10);
    }
}
