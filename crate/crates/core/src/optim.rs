//! Quasi-Newton minimization and numerical second derivatives.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when `|f_k - f_{k+1}| / max(1, |f_k|)` falls below this.
    pub relative_tolerance: f64,
    /// Stop when the largest absolute gradient entry falls below this.
    pub gradient_tolerance: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            relative_tolerance: 1e-8,
            gradient_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Some trial point produced a non-finite objective.
    pub hit_non_finite: bool,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Trial {
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    slope0: f64,
    evals: usize,
    non_finite: bool,
}

impl<F: FnMut(&[f64], &mut [f64]) -> (f64, bool)> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Trial {
        let x: Vec<f64> = self.x.iter().zip(self.dir).map(|(a, d)| a + alpha * d).collect();
        let mut grad = vec![0.0; x.len()];
        let (value, ok) = (self.f)(&x, &mut grad);
        self.evals += 1;
        self.non_finite |= !ok;
        Trial {
            value,
            slope: dot(&grad, self.dir),
            x,
            grad,
        }
    }

    fn sufficient(&self, alpha: f64, value: f64) -> bool {
        value <= self.f0 + C1 * alpha * self.slope0
    }

    fn curvature(&self, slope: f64) -> bool {
        slope.abs() <= -C2 * self.slope0
    }

    /// Strong Wolfe step; falls back to the best decreasing point seen.
    fn run(&mut self, alpha0: f64) -> Option<Trial> {
        let mut prev = (0.0, self.f0, self.slope0);
        let mut alpha = alpha0;
        let mut best: Option<Trial> = None;
        for it in 0..MAX_LINE_EVALS {
            let t = self.eval(alpha);
            if !self.sufficient(alpha, t.value) || (it > 0 && t.value >= prev.1) {
                return self.zoom(prev, (alpha, t.value), best);
            }
            if self.curvature(t.slope) {
                return Some(t);
            }
            if t.slope >= 0.0 {
                let lo = (alpha, t.value, t.slope);
                return self.zoom(lo, (prev.0, prev.1), Some(t));
            }
            prev = (alpha, t.value, t.slope);
            best = Some(t);
            alpha *= 2.0;
        }
        best
    }

    fn zoom(&mut self, lo: (f64, f64, f64), hi: (f64, f64), mut best: Option<Trial>) -> Option<Trial> {
        let (mut a_lo, mut f_lo, mut s_lo) = lo;
        let (mut a_hi, mut f_hi) = hi;
        for _ in 0..MAX_LINE_EVALS {
            let d = a_hi - a_lo;
            if d.abs() <= 1e-14 * (1.0 + a_lo.abs()) {
                break;
            }
            // minimizer of the quadratic matching f_lo, s_lo and f_hi
            let denom = 2.0 * (f_hi - f_lo - s_lo * d);
            let mut a = if denom > 0.0 && denom.is_finite() {
                a_lo - s_lo * d * d / denom
            } else {
                a_lo + 0.5 * d
            };
            let (lb, ub) = if d > 0.0 { (a_lo, a_hi) } else { (a_hi, a_lo) };
            let margin = 0.1 * (ub - lb);
            if !a.is_finite() || a < lb + margin || a > ub - margin {
                a = a_lo + 0.5 * d;
            }
            let t = self.eval(a);
            if !self.sufficient(a, t.value) || t.value >= f_lo {
                a_hi = a;
                f_hi = t.value;
            } else {
                if self.curvature(t.slope) {
                    return Some(t);
                }
                if t.slope * (a_hi - a_lo) >= 0.0 {
                    a_hi = a_lo;
                    f_hi = f_lo;
                }
                a_lo = a;
                f_lo = t.value;
                s_lo = t.slope;
                best = Some(t);
            }
        }
        let f0 = self.f0;
        best.filter(|b| b.value < f0)
    }
}

/// Minimize `f` from `x0`. `f(x, grad)` returns `(value, finite)` and writes
/// the gradient.
pub fn bfgs<F>(mut f: F, x0: &[f64], options: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> (f64, bool),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let (mut fx, ok) = f(&x, &mut g);
    let mut evaluations = 1;
    let mut hit_non_finite = !ok;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut converged = false;
    let mut iterations = 0;

    if n == 0 || max_abs(&g) < options.gradient_tolerance {
        return BfgsResult {
            gradient_norm: max_abs(&g),
            x,
            value: fx,
            iterations,
            evaluations,
            converged: ok,
            hit_non_finite,
        };
    }
    if !ok {
        return BfgsResult {
            gradient_norm: f64::INFINITY,
            x,
            value: fx,
            iterations,
            evaluations,
            converged: false,
            hit_non_finite,
        };
    }

    while iterations < options.max_iterations {
        iterations += 1;
        let mut dir: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[(i, j)] * g[j]).sum::<f64>()).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            h.fill_with_identity();
            fresh = true;
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }
        let alpha0 = if fresh { 1.0 / max_abs(&g).max(1.0) } else { 1.0 };
        let mut ls = LineSearch {
            f: &mut f,
            x: &x,
            dir: &dir,
            f0: fx,
            slope0: slope,
            evals: 0,
            non_finite: false,
        };
        let step = ls.run(alpha0);
        evaluations += ls.evals;
        hit_non_finite |= ls.non_finite;
        let Some(t) = step else {
            if fresh {
                // no progress even along steepest descent
                converged = max_abs(&g) < 1e3 * options.gradient_tolerance;
                break;
            }
            h.fill_with_identity();
            fresh = true;
            continue;
        };

        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let rel = (fx - t.value).abs() / fx.abs().max(1.0);
        x = t.x;
        g = t.grad;
        fx = t.value;

        if max_abs(&g) < options.gradient_tolerance || rel < options.relative_tolerance {
            converged = true;
            break;
        }

        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.fill_with_identity();
                h *= scale;
            }
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[(i, j)] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
    }

    BfgsResult {
        gradient_norm: max_abs(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        converged,
        hit_non_finite,
    }
}

/// Hessian by central second differences of function values.
pub fn hessian_central(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut xp = x.to_vec();
    let mut out = DMatrix::zeros(n, n);
    let mut eval = |xp: &mut Vec<f64>, moves: &[(usize, f64)]| {
        for &(k, d) in moves {
            xp[k] += d;
        }
        let v = f(xp);
        for &(k, d) in moves {
            xp[k] -= d;
        }
        v
    };
    for i in 0..n {
        let fp = eval(&mut xp, &[(i, h[i])]);
        let fm = eval(&mut xp, &[(i, -h[i])]);
        out[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = eval(&mut xp, &[(i, h[i]), (j, h[j])]);
            let fpm = eval(&mut xp, &[(i, h[i]), (j, -h[j])]);
            let fmp = eval(&mut xp, &[(i, -h[i]), (j, h[j])]);
            let fmm = eval(&mut xp, &[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    check_finite(&out)?;
    Ok(out)
}

/// Hessian by central differences of an analytic gradient, symmetrized.
pub fn hessian_from_gradient(mut grad: impl FnMut(&[f64], &mut [f64]), x: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-5 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        grad(&xp, &mut gp);
        xp[k] = x[k] - h;
        grad(&xp, &mut gm);
        xp[k] = x[k];
        for i in 0..n {
            out[(i, k)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let sym = (&out + out.transpose()) * 0.5;
    check_finite(&sym)?;
    Ok(sym)
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFiniteHessian { row: i, col: j });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> (f64, bool) {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        ((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2), true)
    }

    #[test]
    fn minimizes_rosenbrock() {
        let opts = BfgsOptions {
            relative_tolerance: 0.0,
            gradient_tolerance: 1e-8,
            ..Default::default()
        };
        let r = bfgs(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn quadratic_minimum() {
        // f = ½ xᵀ A x − bᵀ x
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let b = [1.0, -2.0, 0.5];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..3 {
                let ax: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
                g[i] = ax - b[i];
                v += 0.5 * x[i] * ax - b[i] * x[i];
            }
            (v, true)
        };
        let r = bfgs(f, &[0.0; 3], &BfgsOptions { relative_tolerance: 0.0, gradient_tolerance: 1e-10, ..Default::default() });
        let am = DMatrix::from_fn(3, 3, |i, j| a[i][j]);
        let sol = am.lu().solve(&nalgebra::DVector::from_row_slice(&b)).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(r.x[i], sol[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn non_finite_region_is_avoided() {
        // log barrier: undefined for x <= 0
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                g[0] = 0.0;
                return (1e10, false);
            }
            g[0] = 1.0 - 1.0 / x[0];
            (x[0] - x[0].ln(), true)
        };
        let r = bfgs(f, &[5.0], &BfgsOptions::default());
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn hessians_of_quadratic() {
        let q = |x: &[f64]| 2.0 * x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1] + x[0];
        let h = hessian_central(q, &[0.3, -1.2]).unwrap();
        let exact = DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, -2.0]);
        assert!((h - &exact).abs().max() < 1e-5);
        let g = |x: &[f64], out: &mut [f64]| {
            out[0] = 4.0 * x[0] + 3.0 * x[1] + 1.0;
            out[1] = 3.0 * x[0] - 2.0 * x[1];
        };
        let h2 = hessian_from_gradient(g, &[0.3, -1.2]).unwrap();
        assert!((h2 - exact).abs().max() < 1e-8);
    }

    #[test]
    fn non_finite_hessian_reports_entry() {
        let f = |x: &[f64]| if x[1] > 0.0 { f64::NAN } else { x[0] * x[0] };
        match hessian_central(f, &[0.0, 0.0]) {
            Err(Error::NonFiniteHessian { row, col }) => assert!(row == 1 || col == 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
