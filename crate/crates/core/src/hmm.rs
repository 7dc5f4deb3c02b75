//! Markov chain parameters, scaled forward likelihood, and Viterbi decoding.
//!
//! State log-densities are passed as a row-major `T × N` slice. Rows flagged
//! missing contribute a factor of one for every state, so the same routines
//! serve calibration/validation masking and gaps in the response.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Initial distribution is the stationary distribution of the t.p.m.
    #[default]
    Stationary,
    /// Initial distribution is a free parameter.
    Estimated,
}

/// Homogeneous `N`-state chain: row-stochastic t.p.m. and initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainRepr", into = "ChainRepr")]
pub struct MarkovChain {
    n_states: usize,
    tpm: Vec<f64>,
    init: Vec<f64>,
    init_mode: InitMode,
}

#[derive(Serialize, Deserialize)]
struct ChainRepr {
    tpm: Vec<Vec<f64>>,
    init: Vec<f64>,
    init_mode: InitMode,
}

impl TryFrom<ChainRepr> for MarkovChain {
    type Error = Error;
    fn try_from(r: ChainRepr) -> Result<Self> {
        let n = r.tpm.len();
        let flat = flatten_square(&r.tpm)?;
        let chain = Self {
            n_states: n,
            tpm: flat,
            init: r.init,
            init_mode: r.init_mode,
        };
        chain.validate()?;
        Ok(chain)
    }
}

impl From<MarkovChain> for ChainRepr {
    fn from(c: MarkovChain) -> Self {
        ChainRepr {
            tpm: c.tpm_rows(),
            init: c.init,
            init_mode: c.init_mode,
        }
    }
}

fn flatten_square(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty transition matrix".into()));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "transition matrix must be {n}×{n}"
        )));
    }
    Ok(rows.iter().flatten().copied().collect())
}

impl MarkovChain {
    /// Chain with the stationary distribution as initial distribution.
    pub fn stationary(tpm: &[Vec<f64>]) -> Result<Self> {
        let n = tpm.len();
        let flat = flatten_square(tpm)?;
        check_stochastic_rows(&flat, n)?;
        let init = stationary_flat(&flat, n)?;
        Ok(Self {
            n_states: n,
            tpm: flat,
            init,
            init_mode: InitMode::Stationary,
        })
    }

    /// Chain with an explicitly supplied initial distribution.
    pub fn with_initial(tpm: &[Vec<f64>], init: Vec<f64>) -> Result<Self> {
        let chain = Self {
            n_states: tpm.len(),
            tpm: flatten_square(tpm)?,
            init,
            init_mode: InitMode::Estimated,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// The trivial one-state chain.
    pub fn single() -> Self {
        Self {
            n_states: 1,
            tpm: vec![1.0],
            init: vec![1.0],
            init_mode: InitMode::Stationary,
        }
    }

    pub(crate) fn from_parts(n: usize, tpm: Vec<f64>, init: Vec<f64>, init_mode: InitMode) -> Self {
        Self {
            n_states: n,
            tpm,
            init,
            init_mode,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_states;
        check_stochastic_rows(&self.tpm, n)?;
        if self.init.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "initial distribution has {} entries for {n} states",
                self.init.len()
            )));
        }
        let s: f64 = self.init.iter().sum();
        if self.init.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > ROW_TOL * n as f64 {
            return Err(Error::InvalidParameter(
                "initial distribution must be a probability vector".into(),
            ));
        }
        if self.init_mode == InitMode::Stationary {
            let d = stationary_flat(&self.tpm, n)?;
            if d.iter().zip(&self.init).any(|(a, b)| (a - b).abs() > 1e-10) {
                return Err(Error::InvalidParameter(
                    "initial distribution is not stationary for the transition matrix".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn transition(&self, i: usize, j: usize) -> f64 {
        self.tpm[i * self.n_states + j]
    }

    pub fn tpm_flat(&self) -> &[f64] {
        &self.tpm
    }

    pub fn tpm_rows(&self) -> Vec<Vec<f64>> {
        self.tpm.chunks(self.n_states).map(<[f64]>::to_vec).collect()
    }

    pub fn initial(&self) -> &[f64] {
        &self.init
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    /// Relabel states so that new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_states;
        let mut tpm = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                tpm[a * n + b] = self.tpm[perm[a] * n + perm[b]];
            }
        }
        Self {
            n_states: n,
            tpm,
            init: perm.iter().map(|&k| self.init[k]).collect(),
            init_mode: self.init_mode,
        }
    }
}

fn check_stochastic_rows(tpm: &[f64], n: usize) -> Result<()> {
    for (i, row) in tpm.chunks(n).enumerate() {
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::InvalidParameter(format!(
                "row {i} of the transition matrix has entries outside [0, 1]"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_TOL * n as f64 {
            return Err(Error::InvalidParameter(format!(
                "row {i} of the transition matrix sums to {s}"
            )));
        }
    }
    Ok(())
}

/// Solve `δ Γ = δ`, `Σ δ = 1`.
pub fn stationary_distribution(tpm: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = tpm.len();
    let flat = flatten_square(tpm)?;
    check_stochastic_rows(&flat, n)?;
    stationary_flat(&flat, n)
}

/// `δ = 1ᵀ (I − Γ + U)⁻¹`; also returns the LU-factored system for
/// derivative computations.
pub(crate) fn stationary_system(tpm: &[f64], n: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if n == 1 {
        return Ok((vec![1.0], DMatrix::from_element(1, 1, 1.0)));
    }
    let a = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - tpm[i * n + j] + 1.0
    });
    let lu = a.clone().full_piv_lu();
    let pivots = lu.u().diagonal();
    let max_piv = pivots.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let min_piv = pivots.iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    if !(min_piv > 1e-12 * max_piv.max(1.0)) {
        return Err(Error::ReducibleChain);
    }
    // δ A = 1ᵀ  <=>  Aᵀ δᵀ = 1
    let at_lu = a.transpose().full_piv_lu();
    let delta = at_lu
        .solve(&DVector::from_element(n, 1.0))
        .ok_or(Error::ReducibleChain)?;
    let inv = lu.try_inverse().ok_or(Error::ReducibleChain)?;
    let mut d: Vec<f64> = delta.iter().copied().collect();
    if d.iter().any(|&p| !p.is_finite() || p < -1e-9) {
        return Err(Error::ReducibleChain);
    }
    for p in &mut d {
        *p = p.max(0.0);
    }
    let s: f64 = d.iter().sum();
    d.iter_mut().for_each(|p| *p /= s);
    Ok((d, inv))
}

pub(crate) fn stationary_flat(tpm: &[f64], n: usize) -> Result<Vec<f64>> {
    stationary_system(tpm, n).map(|(d, _)| d)
}

/// Output of the scaled forward recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub log_likelihood: f64,
    /// `log c_t`; these sum to the log-likelihood.
    pub log_scale_factors: Vec<f64>,
    /// Normalized forward probabilities, row-major `T × N`.
    pub forward: Vec<f64>,
    pub n_states: usize,
}

impl ForwardResult {
    pub fn forward_row(&self, t: usize) -> &[f64] {
        &self.forward[t * self.n_states..(t + 1) * self.n_states]
    }
}

/// Scratch buffers for the forward/backward passes.
#[derive(Debug, Default, Clone)]
pub(crate) struct ForwardWork {
    /// normalized forward probabilities
    pub alpha: Vec<f64>,
    /// exp(l_t(j) − m_t)
    pub q: Vec<f64>,
    /// normalizer of each step on the shifted scale
    pub c: Vec<f64>,
    /// log c_t + m_t
    pub log_scale: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) enum ForwardOutcome {
    Finite(f64),
    /// the observed sequence has zero probability
    Impossible,
}

/// Scaled forward recursion into `work`. `Err(t)` on a NaN or +∞ density at
/// a non-missing time `t`.
pub(crate) fn forward_scaled(
    n: usize,
    tpm: &[f64],
    init: &[f64],
    log_dens: &[f64],
    missing: impl Fn(usize) -> bool,
    work: &mut ForwardWork,
) -> std::result::Result<ForwardOutcome, usize> {
    let t_len = log_dens.len() / n;
    work.alpha.resize(t_len * n, 0.0);
    work.q.resize(t_len * n, 0.0);
    work.c.resize(t_len, 0.0);
    work.log_scale.resize(t_len, 0.0);

    let mut log_l = 0.0;
    let mut pred = [0.0f64; 16];
    let mut pred_vec;
    let pred_buf: &mut [f64] = if n <= 16 {
        &mut pred[..n]
    } else {
        pred_vec = vec![0.0; n];
        &mut pred_vec
    };

    for t in 0..t_len {
        let row = &log_dens[t * n..(t + 1) * n];
        let q = &mut work.q[t * n..(t + 1) * n];
        let shift = if missing(t) {
            q.iter_mut().for_each(|v| *v = 1.0);
            0.0
        } else {
            let mut m = f64::NEG_INFINITY;
            for &l in row {
                if l.is_nan() || l == f64::INFINITY {
                    return Err(t);
                }
                m = m.max(l);
            }
            if m == f64::NEG_INFINITY {
                return Ok(ForwardOutcome::Impossible);
            }
            for (qj, &l) in q.iter_mut().zip(row) {
                *qj = (l - m).exp();
            }
            m
        };

        if t == 0 {
            pred_buf.copy_from_slice(init);
        } else {
            let prev = &work.alpha[(t - 1) * n..t * n];
            for j in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    s += prev[i] * tpm[i * n + j];
                }
                pred_buf[j] = s;
            }
        }
        let mut c = 0.0;
        let a = &mut work.alpha[t * n..(t + 1) * n];
        for j in 0..n {
            a[j] = pred_buf[j] * q[j];
            c += a[j];
        }
        if !(c > 0.0) {
            return Ok(ForwardOutcome::Impossible);
        }
        a.iter_mut().for_each(|v| *v /= c);
        work.c[t] = c;
        work.log_scale[t] = c.ln() + shift;
        log_l += work.log_scale[t];
    }
    Ok(ForwardOutcome::Finite(log_l))
}

/// Backward pass after a finite [`forward_scaled`]. Fills `post` (`T × N`
/// state posteriors) and `trans` (`N × N` expected transition counts).
pub(crate) fn backward_posteriors(n: usize, tpm: &[f64], work: &mut ForwardWork, post: &mut [f64], trans: &mut [f64]) {
    let t_len = work.c.len();
    work.beta.resize(t_len * n, 0.0);
    trans.iter_mut().for_each(|v| *v = 0.0);
    let last = t_len - 1;
    work.beta[last * n..].iter_mut().for_each(|v| *v = 1.0);
    for t in (0..last).rev() {
        let (head, tail) = work.beta.split_at_mut((t + 1) * n);
        let next = &tail[..n];
        let cur = &mut head[t * n..];
        let q = &work.q[(t + 1) * n..(t + 2) * n];
        let c = work.c[t + 1];
        let alpha = &work.alpha[t * n..(t + 1) * n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                let w = tpm[i * n + j] * q[j] * next[j] / c;
                s += w;
                trans[i * n + j] += alpha[i] * w;
            }
            cur[i] = s;
        }
    }
    for t in 0..t_len {
        for j in 0..n {
            post[t * n + j] = work.alpha[t * n + j] * work.beta[t * n + j];
        }
    }
}

/// Log-likelihood of the matrix product `δ Q(y₁) Γ Q(y₂) ⋯ Γ Q(y_T) 1`,
/// evaluated with per-step normalization.
pub fn forward_loglik(chain: &MarkovChain, log_densities: &[f64], missing: &[bool]) -> Result<ForwardResult> {
    let n = chain.n_states();
    check_shapes(n, log_densities, missing)?;
    let t_len = missing.len();
    if missing.iter().all(|&m| m) {
        return Ok(ForwardResult {
            log_likelihood: 0.0,
            log_scale_factors: vec![0.0; t_len],
            forward: vec![1.0 / n as f64; t_len * n],
            n_states: n,
        });
    }
    let mut work = ForwardWork::default();
    match forward_scaled(n, &chain.tpm, &chain.init, log_densities, |t| missing[t], &mut work) {
        Err(index) => Err(Error::NonFiniteDensity { index }),
        Ok(ForwardOutcome::Finite(ll)) => Ok(ForwardResult {
            log_likelihood: ll,
            log_scale_factors: work.log_scale,
            forward: work.alpha,
            n_states: n,
        }),
        Ok(ForwardOutcome::Impossible) => Ok(ForwardResult {
            log_likelihood: f64::NEG_INFINITY,
            log_scale_factors: work.log_scale,
            forward: work.alpha,
            n_states: n,
        }),
    }
}

fn check_shapes(n: usize, log_densities: &[f64], missing: &[bool]) -> Result<()> {
    if missing.is_empty() {
        return Err(Error::InvalidInput("empty series".into()));
    }
    if log_densities.len() != missing.len() * n {
        return Err(Error::DimensionMismatch(format!(
            "expected {}×{n} state log-densities, got {} values",
            missing.len(),
            log_densities.len()
        )));
    }
    Ok(())
}

/// Most probable state sequence (0-based labels). Ties go to the lower
/// state index.
pub fn viterbi_decode(chain: &MarkovChain, log_densities: &[f64], missing: &[bool]) -> Result<Vec<usize>> {
    let n = chain.n_states();
    check_shapes(n, log_densities, missing)?;
    let t_len = missing.len();
    let log_tpm: Vec<f64> = chain.tpm.iter().map(|p| p.ln()).collect();
    let emit = |t: usize, j: usize| -> Result<f64> {
        if missing[t] {
            return Ok(0.0);
        }
        let l = log_densities[t * n + j];
        if l.is_nan() || l == f64::INFINITY {
            Err(Error::NonFiniteDensity { index: t })
        } else {
            Ok(l)
        }
    };

    let mut score: Vec<f64> = (0..n)
        .map(|j| Ok(chain.init[j].ln() + emit(0, j)?))
        .collect::<Result<_>>()?;
    let mut back = vec![0usize; t_len * n];
    let mut next = vec![0.0; n];
    for t in 1..t_len {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..n {
                let v = score[i] + log_tpm[i * n + j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            back[t * n + j] = arg;
            next[j] = best + emit(t, j)?;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut state = 0;
    for j in 1..n {
        if score[j] > score[state] {
            state = j;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = state;
    for t in (1..t_len).rev() {
        state = back[t * n + state];
        path[t - 1] = state;
    }
    Ok(path)
}
