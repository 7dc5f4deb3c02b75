//! Model specification, parameters, and the unconstrained parameter vector.
//!
//! Packed layout, in order:
//! intercepts (N) | free coefficients per state, per covariate |
//! log dispersions (N, if the family has one) |
//! t.p.m. logits (N·(N−1), diagonal is the reference category) |
//! initial-distribution logits (N−1, estimated mode only; state 0 is the reference).
//!
//! Smooth terms store all `K` coefficients, but the centre one is fixed at
//! zero and not part of the packed vector.

use serde::{Deserialize, Serialize};

use crate::basis::{PenaltyMatrix, SplineBasis, Standardizer, DEFAULT_K, DEFAULT_PENALTY_ORDER};
use crate::data::TimeSeriesData;
use crate::error::{Error, Result};
use crate::family::{Dispersion, Family, ObservationTerms};
use crate::hmm::{self, InitMode, MarkovChain};

/// How a covariate enters the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TermChoice {
    #[default]
    Smooth,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TermKind {
    Smooth { basis: SplineBasis },
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTerm {
    pub name: String,
    pub standardizer: Standardizer,
    pub kind: TermKind,
}

impl CovariateTerm {
    /// Stored coefficients per state (`K` for smooths, 1 for linear terms).
    pub fn n_coefficients(&self) -> usize {
        match &self.kind {
            TermKind::Smooth { basis } => basis.k,
            TermKind::Linear => 1,
        }
    }

    pub fn n_free(&self) -> usize {
        match &self.kind {
            TermKind::Smooth { basis } => basis.k - 1,
            TermKind::Linear => 1,
        }
    }

    pub fn center(&self) -> Option<usize> {
        match &self.kind {
            TermKind::Smooth { basis } => Some(basis.center_index()),
            TermKind::Linear => None,
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(self.kind, TermKind::Smooth { .. })
    }

    /// Contribution of this term at raw covariate value `x`.
    pub fn evaluate(&self, coefficients: &[f64], x: f64) -> f64 {
        let z = self.standardizer.apply(x);
        match &self.kind {
            TermKind::Smooth { basis } => {
                let (start, v) = basis.eval_local(z);
                v.iter().enumerate().map(|(r, b)| b * coefficients[start + r]).sum()
            }
            TermKind::Linear => coefficients[0] * z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecOptions {
    pub k: usize,
    pub penalty_order: usize,
    pub init_mode: InitMode,
}

impl Default for SpecOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            penalty_order: DEFAULT_PENALTY_ORDER,
            init_mode: InitMode::Stationary,
        }
    }
}

/// Model skeleton: one additive predictor per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsGamSpec {
    pub family: Family,
    pub n_states: usize,
    pub terms: Vec<CovariateTerm>,
    pub init_mode: InitMode,
    pub penalty_order: usize,
}

impl MsGamSpec {
    /// Build standardizers and bases from the data's covariates.
    pub fn new(
        family: Family,
        n_states: usize,
        data: &TimeSeriesData,
        choices: &[TermChoice],
        options: SpecOptions,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidParameter("need at least one state".into()));
        }
        if choices.len() != data.n_covariates() {
            return Err(Error::DimensionMismatch(format!(
                "{} term choices for {} covariates",
                choices.len(),
                data.n_covariates()
            )));
        }
        let mut terms = Vec::with_capacity(choices.len());
        for (p, choice) in choices.iter().enumerate() {
            let name = data.covariate_names[p].clone();
            let values = &data.covariates[p];
            let standardizer = Standardizer::fit(values).map_err(|e| match e {
                Error::DegenerateCovariate { .. } => Error::DegenerateCovariate { name: name.clone() },
                other => other,
            })?;
            let kind = match choice {
                TermChoice::Smooth => {
                    let z: Vec<f64> = values.iter().map(|&x| standardizer.apply(x)).collect();
                    let basis = SplineBasis::for_standardized(options.k, &z)?;
                    PenaltyMatrix::new(basis.k, options.penalty_order)?;
                    TermKind::Smooth { basis }
                }
                TermChoice::Linear => TermKind::Linear,
            };
            terms.push(CovariateTerm {
                name,
                standardizer,
                kind,
            });
        }
        Ok(Self {
            family,
            n_states,
            terms,
            init_mode: options.init_mode,
            penalty_order: options.penalty_order,
        })
    }

    /// All covariates as smooths with `k` basis functions.
    pub fn smooth(family: Family, n_states: usize, data: &TimeSeriesData, k: usize) -> Result<Self> {
        let choices = vec![TermChoice::Smooth; data.n_covariates()];
        Self::new(
            family,
            n_states,
            data,
            &choices,
            SpecOptions {
                k,
                ..SpecOptions::default()
            },
        )
    }

    pub fn n_covariates(&self) -> usize {
        self.terms.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn n_params(&self) -> usize {
        self.layout().len
    }

    /// Parameter count of the same model with every smooth replaced by a
    /// linear term (the large-λ limit).
    pub fn parametric_param_count(&self) -> usize {
        let n = self.n_states;
        let disp = if self.family.has_dispersion() { n } else { 0 };
        let init = if self.init_mode == InitMode::Estimated { n - 1 } else { 0 };
        n + n * self.terms.len() + disp + n * (n - 1) + init
    }

    pub fn penalties(&self) -> Vec<Option<PenaltyMatrix>> {
        self.terms
            .iter()
            .map(|t| match &t.kind {
                TermKind::Smooth { basis } => Some(
                    PenaltyMatrix::new(basis.k, self.penalty_order).expect("validated at construction"),
                ),
                TermKind::Linear => None,
            })
            .collect()
    }

    pub fn check_data(&self, data: &TimeSeriesData) -> Result<()> {
        if data.n_covariates() != self.terms.len() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} covariates, data has {}",
                self.terms.len(),
                data.n_covariates()
            )));
        }
        data.validate_for(self.family)
    }
}

/// Index bookkeeping for the packed vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub n_states: usize,
    pub intercepts: usize,
    /// `coef_offset[i][p]` is where state `i`, covariate `p` starts.
    pub coef_offset: Vec<Vec<usize>>,
    pub dispersion: Option<usize>,
    pub tpm: usize,
    pub init: Option<usize>,
    pub len: usize,
}

impl Layout {
    fn new(spec: &MsGamSpec) -> Self {
        let n = spec.n_states;
        let mut at = n;
        let mut coef_offset = vec![Vec::with_capacity(spec.terms.len()); n];
        for offsets in coef_offset.iter_mut() {
            for term in &spec.terms {
                offsets.push(at);
                at += term.n_free();
            }
        }
        let dispersion = if spec.family.has_dispersion() {
            let d = at;
            at += n;
            Some(d)
        } else {
            None
        };
        let tpm = at;
        at += n * (n - 1);
        let init = if spec.init_mode == InitMode::Estimated && n > 1 {
            let d = at;
            at += n - 1;
            Some(d)
        } else {
            None
        };
        Self {
            n_states: n,
            intercepts: 0,
            coef_offset,
            dispersion,
            tpm,
            init,
            len: at,
        }
    }

    /// Indices of the free smooth coefficients, used to place penalty blocks.
    pub fn free_index(&self, term: &CovariateTerm, state: usize, p: usize, k: usize) -> Option<usize> {
        let off = self.coef_offset[state][p];
        match term.center() {
            Some(c) if k == c => None,
            Some(c) if k > c => Some(off + k - 1),
            _ => Some(off + k),
        }
    }
}

/// Non-negative smoothing parameters, one per (state, covariate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingVector {
    pub values: Vec<Vec<f64>>,
}

impl SmoothingVector {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().flatten().any(|&l| !(l >= 0.0) || l.is_infinite()) {
            return Err(Error::InvalidParameter(
                "smoothing parameters must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn uniform(n_states: usize, n_covariates: usize, lambda: f64) -> Self {
        Self {
            values: vec![vec![lambda; n_covariates]; n_states],
        }
    }

    pub fn get(&self, state: usize, p: usize) -> f64 {
        self.values[state][p]
    }

    pub fn check(&self, spec: &MsGamSpec) -> Result<()> {
        if self.values.len() != spec.n_states || self.values.iter().any(|r| r.len() != spec.terms.len()) {
            return Err(Error::DimensionMismatch(format!(
                "smoothing vector must be {}×{}",
                spec.n_states,
                spec.terms.len()
            )));
        }
        Ok(())
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            values: perm.iter().map(|&k| self.values[k].clone()).collect(),
        }
    }
}

/// Natural-scale parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsGamParams {
    pub intercepts: Vec<f64>,
    /// `coefficients[state][covariate]`; smooth centre entries are zero.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    /// Per-state dispersion; empty for Poisson.
    pub dispersions: Vec<f64>,
    pub chain: MarkovChain,
}

impl MsGamParams {
    pub fn n_states(&self) -> usize {
        self.intercepts.len()
    }

    pub fn dispersion(&self, state: usize) -> Option<Dispersion> {
        self.dispersions.get(state).map(|&d| Dispersion::new(d).expect("positive dispersion"))
    }

    /// Relabel states: new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            intercepts: perm.iter().map(|&k| self.intercepts[k]).collect(),
            coefficients: perm.iter().map(|&k| self.coefficients[k].clone()).collect(),
            dispersions: if self.dispersions.is_empty() {
                Vec::new()
            } else {
                perm.iter().map(|&k| self.dispersions[k]).collect()
            },
            chain: self.chain.permuted(perm),
        }
    }

    /// Permutation that sorts states by ascending intercept (stable).
    pub fn intercept_order(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.n_states()).collect();
        perm.sort_by(|&a, &b| self.intercepts[a].total_cmp(&self.intercepts[b]));
        perm
    }

    /// Smooth (or linear) effect of covariate `p` in `state` at raw value `x`.
    pub fn term_value(&self, spec: &MsGamSpec, state: usize, p: usize, x: f64) -> f64 {
        spec.terms[p].evaluate(&self.coefficients[state][p], x)
    }

    /// Predictor of `state` at a raw covariate vector.
    pub fn predictor_at(&self, spec: &MsGamSpec, state: usize, x: &[f64]) -> f64 {
        self.intercepts[state]
            + (0..spec.terms.len())
                .map(|p| self.term_value(spec, state, p, x[p]))
                .sum::<f64>()
    }
}

/// Map natural parameters to the unconstrained vector.
pub fn pack(params: &MsGamParams, spec: &MsGamSpec) -> Result<Vec<f64>> {
    let n = spec.n_states;
    let layout = spec.layout();
    if params.intercepts.len() != n || params.coefficients.len() != n || params.chain.n_states() != n {
        return Err(Error::DimensionMismatch(format!("parameters are not for {n} states")));
    }
    let mut theta = vec![0.0; layout.len];
    theta[..n].copy_from_slice(&params.intercepts);
    for i in 0..n {
        if params.coefficients[i].len() != spec.terms.len() {
            return Err(Error::DimensionMismatch(format!(
                "state {i} has {} coefficient blocks for {} covariates",
                params.coefficients[i].len(),
                spec.terms.len()
            )));
        }
        for (p, term) in spec.terms.iter().enumerate() {
            let c = &params.coefficients[i][p];
            if c.len() != term.n_coefficients() {
                return Err(Error::DimensionMismatch(format!(
                    "state {i} covariate {p}: {} coefficients, expected {}",
                    c.len(),
                    term.n_coefficients()
                )));
            }
            if let Some(center) = term.center() {
                if c[center] != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "centre coefficient of state {i} covariate {p} must be zero"
                    )));
                }
            }
            for (k, &v) in c.iter().enumerate() {
                if let Some(idx) = layout.free_index(term, i, p, k) {
                    theta[idx] = v;
                }
            }
        }
    }
    if let Some(d) = layout.dispersion {
        if params.dispersions.len() != n {
            return Err(Error::DimensionMismatch("one dispersion per state required".into()));
        }
        for (i, &phi) in params.dispersions.iter().enumerate() {
            theta[d + i] = Dispersion::new(phi)?.value().ln();
        }
    }
    let mut at = layout.tpm;
    for i in 0..n {
        let diag = params.chain.transition(i, i);
        for j in (0..n).filter(|&j| j != i) {
            theta[at] = (params.chain.transition(i, j) / diag).ln();
            at += 1;
        }
    }
    if let Some(off) = layout.init {
        let init = params.chain.initial();
        for j in 1..n {
            theta[off + j - 1] = (init[j] / init[0]).ln();
        }
    }
    Ok(theta)
}

/// Transition matrix (row-major) from its logits.
pub(crate) fn tpm_from_logits(n: usize, logits: &[f64]) -> Vec<f64> {
    let mut tpm = vec![0.0; n * n];
    let mut at = 0;
    for i in 0..n {
        let row = &mut tpm[i * n..(i + 1) * n];
        let mut m = 0.0f64;
        for j in (0..n).filter(|&j| j != i) {
            m = m.max(logits[at + j - usize::from(j > i)]);
        }
        let mut s = 0.0;
        for j in 0..n {
            let v = if j == i {
                (-m).exp()
            } else {
                (logits[at + j - usize::from(j > i)] - m).exp()
            };
            row[j] = v;
            s += v;
        }
        row.iter_mut().for_each(|v| *v /= s);
        at += n - 1;
    }
    tpm
}

pub(crate) fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(0.0f64, f64::max);
    let mut out: Vec<f64> = std::iter::once((-m).exp())
        .chain(logits.iter().map(|l| (l - m).exp()))
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Chain parameters encoded in `theta`.
pub(crate) fn chain_from_vector(spec: &MsGamSpec, layout: &Layout, theta: &[f64]) -> Result<MarkovChain> {
    let n = spec.n_states;
    if n == 1 {
        return Ok(MarkovChain::single());
    }
    let tpm = tpm_from_logits(n, &theta[layout.tpm..layout.tpm + n * (n - 1)]);
    let init = match layout.init {
        Some(off) => softmax_with_reference(&theta[off..off + n - 1]),
        None => hmm::stationary_flat(&tpm, n)?,
    };
    Ok(MarkovChain::from_parts(n, tpm, init, spec.init_mode))
}

/// Inverse of [`pack`].
pub fn unpack(theta: &[f64], spec: &MsGamSpec) -> Result<MsGamParams> {
    let layout = spec.layout();
    if theta.len() != layout.len {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} entries, model needs {}",
            theta.len(),
            layout.len
        )));
    }
    let n = spec.n_states;
    let intercepts = theta[..n].to_vec();
    let coefficients = (0..n)
        .map(|i| {
            spec.terms
                .iter()
                .enumerate()
                .map(|(p, term)| {
                    (0..term.n_coefficients())
                        .map(|k| layout.free_index(term, i, p, k).map_or(0.0, |idx| theta[idx]))
                        .collect()
                })
                .collect()
        })
        .collect();
    let dispersions = match layout.dispersion {
        Some(d) => theta[d..d + n].iter().map(|v| v.exp()).collect(),
        None => Vec::new(),
    };
    let chain = chain_from_vector(spec, &layout, theta)?;
    Ok(MsGamParams {
        intercepts,
        coefficients,
        dispersions,
        chain,
    })
}

/// Basis rows evaluated once per data set.
#[derive(Debug, Clone)]
pub(crate) enum TermDesign {
    Smooth { start: Vec<u32>, values: Vec<[f64; 4]> },
    Linear { z: Vec<f64> },
}

#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub terms: Vec<TermDesign>,
    pub t_len: usize,
}

impl Design {
    pub fn new(spec: &MsGamSpec, data: &TimeSeriesData) -> Self {
        let t_len = data.len();
        let terms = spec
            .terms
            .iter()
            .zip(&data.covariates)
            .map(|(term, x)| {
                let z = x.iter().map(|&v| {
                    let z = term.standardizer.apply(v);
                    if z.is_finite() {
                        z
                    } else {
                        0.0
                    }
                });
                match &term.kind {
                    TermKind::Smooth { basis } => {
                        let (start, values) = z
                            .map(|zv| {
                                let (s, v) = basis.eval_local(zv);
                                (s as u32, v)
                            })
                            .unzip();
                        TermDesign::Smooth { start, values }
                    }
                    TermKind::Linear => TermDesign::Linear { z: z.collect() },
                }
            })
            .collect();
        Self { terms, t_len }
    }
}

/// Full coefficient blocks `[state][covariate][k]` flattened with a fixed
/// stride, plus the intercepts, read straight from `theta`.
pub(crate) fn expand_coefficients(spec: &MsGamSpec, layout: &Layout, theta: &[f64], out: &mut Vec<f64>, stride: usize) {
    let n = spec.n_states;
    let np = spec.terms.len();
    out.clear();
    out.resize(n * np * stride, 0.0);
    for i in 0..n {
        for (p, term) in spec.terms.iter().enumerate() {
            let base = (i * np + p) * stride;
            for k in 0..term.n_coefficients() {
                if let Some(idx) = layout.free_index(term, i, p, k) {
                    out[base + k] = theta[idx];
                }
            }
        }
    }
}

pub(crate) fn coefficient_stride(spec: &MsGamSpec) -> usize {
    spec.terms.iter().map(CovariateTerm::n_coefficients).max().unwrap_or(1)
}

/// `eta[t * N + i]` for every time and state.
pub(crate) fn fill_predictor(
    spec: &MsGamSpec,
    design: &Design,
    intercepts: &[f64],
    coef: &[f64],
    stride: usize,
    eta: &mut Vec<f64>,
) {
    let n = spec.n_states;
    let np = spec.terms.len();
    eta.clear();
    eta.resize(design.t_len * n, 0.0);
    for t in 0..design.t_len {
        eta[t * n..(t + 1) * n].copy_from_slice(intercepts);
    }
    for (p, td) in design.terms.iter().enumerate() {
        match td {
            TermDesign::Smooth { start, values } => {
                for t in 0..design.t_len {
                    let s = start[t] as usize;
                    let v = &values[t];
                    for i in 0..n {
                        let c = &coef[(i * np + p) * stride + s..];
                        eta[t * n + i] += v[0] * c[0] + v[1] * c[1] + v[2] * c[2] + v[3] * c[3];
                    }
                }
            }
            TermDesign::Linear { z } => {
                for t in 0..design.t_len {
                    for i in 0..n {
                        eta[t * n + i] += coef[(i * np + p) * stride] * z[t];
                    }
                }
            }
        }
    }
}

/// `T × N` matrix (row-major) of state predictors.
pub fn predictor_matrix(spec: &MsGamSpec, params: &MsGamParams, data: &TimeSeriesData) -> Result<Vec<f64>> {
    if data.n_covariates() != spec.terms.len() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} covariates, data has {}",
            spec.terms.len(),
            data.n_covariates()
        )));
    }
    let theta = pack(params, spec)?;
    let layout = spec.layout();
    let stride = coefficient_stride(spec);
    let mut coef = Vec::new();
    expand_coefficients(spec, &layout, &theta, &mut coef, stride);
    let design = Design::new(spec, data);
    let mut eta = Vec::new();
    fill_predictor(spec, &design, &params.intercepts, &coef, stride, &mut eta);
    Ok(eta)
}

/// `T × N` state log-densities; missing rows are zero.
pub fn state_log_densities(spec: &MsGamSpec, params: &MsGamParams, data: &TimeSeriesData) -> Result<Vec<f64>> {
    spec.check_data(data)?;
    let eta = predictor_matrix(spec, params, data)?;
    let n = spec.n_states;
    let mut out = vec![0.0; eta.len()];
    for t in 0..data.len() {
        if data.missing[t] {
            continue;
        }
        let obs = ObservationTerms::new(spec.family, data.response[t]);
        for i in 0..n {
            let phi = params.dispersions.get(i).copied().unwrap_or(1.0);
            out[t * n + i] = spec.family.log_density_eta(&obs, eta[t * n + i], phi);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(t: usize, p: usize, seed: u64) -> TimeSeriesData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov: Vec<Vec<f64>> = (0..p).map(|_| (0..t).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let y = (0..t).map(|_| rng.gen_range(0..10) as f64).collect();
        TimeSeriesData::unnamed(y, cov).unwrap()
    }

    #[test]
    fn two_state_logit() {
        let chain = MarkovChain::stationary(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let data = toy_data(30, 0, 1);
        let spec = MsGamSpec::new(Family::poisson(), 2, &data, &[], SpecOptions::default()).unwrap();
        let params = MsGamParams {
            intercepts: vec![1.0, 2.0],
            coefficients: vec![vec![], vec![]],
            dispersions: vec![],
            chain,
        };
        let theta = pack(&params, &spec).unwrap();
        assert_abs_diff_eq!(theta[2], (0.1f64 / 0.9).ln(), epsilon = 1e-15);
        let back = unpack(&theta, &spec).unwrap();
        assert_abs_diff_eq!(back.chain.transition(0, 0), 0.9, epsilon = 1e-14);
        assert_abs_diff_eq!(back.chain.transition(0, 1), 0.1, epsilon = 1e-14);
    }

    #[test]
    fn zero_vector_maps_to_origin() {
        let data = toy_data(40, 1, 2);
        let spec = MsGamSpec::new(
            Family::normal(),
            2,
            &data,
            &[TermChoice::Smooth],
            SpecOptions { k: 5, ..Default::default() },
        )
        .unwrap();
        let p = unpack(&vec![0.0; spec.n_params()], &spec).unwrap();
        assert_eq!(p.chain.tpm_rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(p.dispersions, vec![1.0, 1.0]);
        assert!(p.coefficients.iter().flatten().flatten().all(|&c| c == 0.0));
        assert_eq!(spec.n_params(), 2 + 2 * 4 + 2 + 2);
    }

    #[test]
    fn centre_must_be_zero_and_dims_checked() {
        let data = toy_data(40, 1, 3);
        let spec = MsGamSpec::smooth(Family::poisson(), 1, &data, 5).unwrap();
        let mut p = unpack(&vec![0.1; spec.n_params()], &spec).unwrap();
        assert_eq!(p.coefficients[0][0][2], 0.0);
        p.coefficients[0][0][2] = 1.0;
        assert!(pack(&p, &spec).is_err());
        assert!(unpack(&[0.0; 3], &spec).is_err());
    }

    #[test]
    fn constant_predictor_and_line() {
        let data = toy_data(50, 1, 4);
        let spec = MsGamSpec::smooth(Family::poisson(), 2, &data, 7).unwrap();
        let mut p = unpack(&vec![0.0; spec.n_params()], &spec).unwrap();
        p.intercepts = vec![0.7, 0.7];
        let eta = predictor_matrix(&spec, &p, &data).unwrap();
        assert!(eta.iter().all(|&e| (e - 0.7).abs() < 1e-15));

        // coefficients linear in k (through zero at the centre) give an affine predictor
        let basis = match &spec.terms[0].kind {
            TermKind::Smooth { basis } => basis.clone(),
            _ => unreachable!(),
        };
        let c = basis.center_index() as f64;
        p.coefficients[1][0] = (0..7).map(|k| 0.3 * (k as f64 - c)).collect();
        let eta = predictor_matrix(&spec, &p, &data).unwrap();
        let g = basis.greville();
        for t in 0..data.len() {
            let z = spec.terms[0].standardizer.apply(data.covariates[0][t]);
            let direct: f64 = basis.eval(z).iter().zip(&p.coefficients[1][0]).map(|(b, c)| b * c).sum();
            assert_abs_diff_eq!(eta[t * 2 + 1], 0.7 + direct, epsilon = 1e-12);
            let slope = 0.3 / (g[1] - g[0]);
            assert_abs_diff_eq!(eta[t * 2 + 1], 0.7 + slope * (z - g[basis.center_index()]), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(seed in 0u64..1000, n in 1usize..4, estimated in proptest::bool::ANY) {
            let data = toy_data(30, 2, seed);
            let spec = MsGamSpec::new(
                Family::gamma(),
                n,
                &data,
                &[TermChoice::Smooth, TermChoice::Linear],
                SpecOptions { k: 5, init_mode: if estimated { InitMode::Estimated } else { InitMode::Stationary }, ..Default::default() },
            ).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let params = unpack(&theta, &spec).unwrap();
            let again = pack(&params, &spec).unwrap();
            for (a, b) in theta.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let params2 = unpack(&again, &spec).unwrap();
            for (a, b) in params.chain.tpm_flat().iter().zip(params2.chain.tpm_flat()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
