//! Cubic B-spline bases, covariate standardization and difference penalties.
//!
//! Bases use equidistant knots extended beyond the domain on both sides, so
//! exactly `k` cubic B-splines are supported on the domain and they form a
//! partition of unity there. Evaluation clamps to the domain.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CUBIC: usize = 3;
pub const DEFAULT_K: usize = 15;
pub const DEFAULT_PENALTY_ORDER: usize = 2;
/// Margin added on both sides of the standardized covariate range.
pub const DOMAIN_MARGIN: f64 = 0.5;

/// Centering and scaling of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub sd: f64,
}

impl Standardizer {
    /// Fit mean and sample standard deviation (n - 1 denominator).
    pub fn fit(values: &[f64]) -> Result<Self> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "standardization needs at least 2 finite values, got {}",
                finite.len()
            )));
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let ss: f64 = finite.iter().map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n - 1.0)).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::DegenerateCovariate {
                name: String::new(),
            });
        }
        Ok(Self { mean, sd })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Fit a standardizer and return the standardized sequence.
pub fn standardize(values: &[f64]) -> Result<(Standardizer, Vec<f64>)> {
    let s = Standardizer::fit(values)?;
    let z = values.iter().map(|&v| s.apply(v)).collect();
    Ok((s, z))
}

/// Cubic B-spline basis with `k` functions on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub k: usize,
    pub degree: usize,
    pub lower: f64,
    pub upper: f64,
    /// Full knot vector, `k + degree + 1` entries.
    pub knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(k: usize, lower: f64, upper: f64) -> Result<Self> {
        if k < 5 {
            return Err(Error::InvalidBasis(format!(
                "need at least 5 cubic B-splines, got {k}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidBasis(format!(
                "number of basis functions must be odd so a centre coefficient exists, got {k}"
            )));
        }
        if !(lower.is_finite() && upper.is_finite() && upper > lower) {
            return Err(Error::InvalidBasis(format!(
                "degenerate domain [{lower}, {upper}]"
            )));
        }
        let degree = CUBIC;
        let intervals = k - degree;
        let h = (upper - lower) / intervals as f64;
        let knots = (0..k + degree + 1)
            .map(|j| {
                let j = j as i64 - degree as i64;
                if j == intervals as i64 {
                    upper
                } else {
                    lower + j as f64 * h
                }
            })
            .collect();
        Ok(Self {
            k,
            degree,
            lower,
            upper,
            knots,
        })
    }

    /// Basis over the standardized range of `z`, widened by [`DOMAIN_MARGIN`].
    pub fn for_standardized(k: usize, z: &[f64]) -> Result<Self> {
        let (lo, hi) = z
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Self::new(k, lo - DOMAIN_MARGIN, hi + DOMAIN_MARGIN)
    }

    /// Index of the coefficient fixed at zero for identifiability.
    pub fn center_index(&self) -> usize {
        (self.k - 1) / 2
    }

    fn clamp(&self, x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        x.clamp(self.lower, self.upper)
    }

    /// The `degree + 1` possibly nonzero basis values at `x` and the index of
    /// the first one.
    pub fn eval_local(&self, x: f64) -> (usize, [f64; 4]) {
        let x = self.clamp(x);
        let p = self.degree;
        let t = &self.knots;
        // knot span: t[mu] <= x < t[mu+1], with mu in [p, k-1]
        let h = (self.upper - self.lower) / (self.k - p) as f64;
        let mut mu = p + ((x - self.lower) / h).floor().max(0.0) as usize;
        mu = mu.min(self.k - 1);
        while mu > p && x < t[mu] {
            mu -= 1;
        }
        while mu < self.k - 1 && x >= t[mu + 1] {
            mu += 1;
        }

        let mut n = [0.0; 4];
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (mu - p, n)
    }

    /// Dense vector of all `k` basis values at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let (start, local) = self.eval_local(x);
        let mut out = vec![0.0; self.k];
        for (r, v) in local.iter().enumerate() {
            out[start + r] = *v;
        }
        out
    }

    /// Greville abscissae (knot averages); a coefficient sequence linear in
    /// these reproduces the corresponding linear function exactly.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| self.knots[i + 1..i + 1 + self.degree].iter().sum::<f64>() / self.degree as f64)
            .collect()
    }
}

/// Validated constructor mirroring [`SplineBasis::new`].
pub fn build_basis(k: usize, lower: f64, upper: f64) -> Result<SplineBasis> {
    SplineBasis::new(k, lower, upper)
}

pub fn eval_basis(basis: &SplineBasis, x: f64) -> Vec<f64> {
    basis.eval(x)
}

/// `Dᵀ D` for the `order`-th difference operator on `k` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub order: usize,
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn new(k: usize, order: usize) -> Result<Self> {
        if order < 1 || order + 1 > k {
            return Err(Error::InvalidPenaltyOrder { order, k });
        }
        let d = difference_operator(k, order);
        Ok(Self {
            order,
            matrix: d.transpose() * d,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `γᵀ M γ`, summed as squared differences so that polynomials in the
    /// null space give exactly zero rather than cancellation noise.
    pub fn quadratic_form(&self, gamma: &[f64]) -> f64 {
        debug_assert_eq!(gamma.len(), self.dim());
        let mut d = gamma.to_vec();
        for _ in 0..self.order {
            for i in 0..d.len() - 1 {
                d[i] = d[i + 1] - d[i];
            }
            d.pop();
        }
        d.iter().map(|v| v * v).sum()
    }

    /// `M γ`, written into `out`.
    pub fn apply(&self, gamma: &[f64], out: &mut [f64]) {
        let k = self.dim();
        for i in 0..k {
            out[i] = (0..k).map(|j| self.matrix[(i, j)] * gamma[j]).sum();
        }
    }
}

pub fn penalty_matrix(k: usize, order: usize) -> Result<PenaltyMatrix> {
    PenaltyMatrix::new(k, order)
}

fn difference_operator(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows();
        let mut next = DMatrix::<f64>::zeros(rows - 1, k);
        for r in 0..rows - 1 {
            for c in 0..k {
                next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
            }
        }
        d = next;
    }
    d
}
