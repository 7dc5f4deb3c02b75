//! State-dependent observation distributions and their links.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Normal as NormalDist, Poisson as PoissonDist};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Poisson,
    Normal,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Log,
    Identity,
}

/// Distribution plus link. Supported pairs: Poisson/log, Normal/identity,
/// Gamma/log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FamilyRepr", into = "FamilyRepr")]
pub struct Family {
    kind: FamilyKind,
    link: Link,
}

#[derive(Serialize, Deserialize)]
struct FamilyRepr {
    kind: FamilyKind,
    link: Link,
}

impl TryFrom<FamilyRepr> for Family {
    type Error = Error;
    fn try_from(r: FamilyRepr) -> Result<Self> {
        Family::new(r.kind, r.link)
    }
}

impl From<Family> for FamilyRepr {
    fn from(f: Family) -> Self {
        FamilyRepr {
            kind: f.kind,
            link: f.link,
        }
    }
}

/// Positive dispersion: standard deviation for Normal, shape for Gamma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion(f64);

impl Dispersion {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::InvalidParameter(format!(
                "dispersion must be positive and finite, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Family {
    pub fn new(kind: FamilyKind, link: Link) -> Result<Self> {
        match (kind, link) {
            (FamilyKind::Poisson, Link::Log)
            | (FamilyKind::Normal, Link::Identity)
            | (FamilyKind::Gamma, Link::Log) => Ok(Self { kind, link }),
            _ => Err(Error::InvalidFamily(format!("{kind:?} with {link:?} link"))),
        }
    }

    pub fn canonical(kind: FamilyKind) -> Self {
        let link = match kind {
            FamilyKind::Normal => Link::Identity,
            FamilyKind::Poisson | FamilyKind::Gamma => Link::Log,
        };
        Self { kind, link }
    }

    pub fn poisson() -> Self {
        Self::canonical(FamilyKind::Poisson)
    }

    pub fn normal() -> Self {
        Self::canonical(FamilyKind::Normal)
    }

    pub fn gamma() -> Self {
        Self::canonical(FamilyKind::Gamma)
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn link_kind(&self) -> Link {
        self.link
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            FamilyKind::Poisson => "poisson",
            FamilyKind::Normal => "normal",
            FamilyKind::Gamma => "gamma",
        }
    }

    pub fn has_dispersion(&self) -> bool {
        !matches!(self.kind, FamilyKind::Poisson)
    }

    #[inline]
    pub fn inverse_link(&self, eta: f64) -> f64 {
        match self.link {
            Link::Log => eta.exp(),
            Link::Identity => eta,
        }
    }

    #[inline]
    pub fn link(&self, mu: f64) -> f64 {
        match self.link {
            Link::Log => mu.ln(),
            Link::Identity => mu,
        }
    }

    pub fn check_response(&self, index: usize, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            FamilyKind::Normal => y.is_finite(),
            FamilyKind::Gamma => y > 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidResponse {
                index,
                value: y,
                family: self.name().to_string(),
            })
        }
    }

    fn check_mean(&self, mu: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Normal => mu.is_finite(),
            FamilyKind::Poisson | FamilyKind::Gamma => mu > 0.0 && mu.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "mean {mu} outside the {} mean domain",
                self.name()
            )))
        }
    }

    fn dispersion_value(&self, phi: Option<Dispersion>) -> Result<f64> {
        if self.has_dispersion() {
            phi.map(Dispersion::value).ok_or_else(|| {
                Error::InvalidParameter(format!("{} family needs a dispersion", self.name()))
            })
        } else {
            Ok(1.0)
        }
    }

    /// Log-density of `y` at mean `mu`.
    pub fn log_density(&self, y: f64, mu: f64, phi: Option<Dispersion>) -> Result<f64> {
        self.check_response(0, y)?;
        self.check_mean(mu)?;
        let phi = self.dispersion_value(phi)?;
        let obs = ObservationTerms::new(*self, y);
        Ok(self.log_density_eta(&obs, self.link(mu), phi))
    }

    /// Log-density on the predictor scale, using precomputed response terms.
    /// No validation; callers check responses once up front.
    #[inline]
    pub(crate) fn log_density_eta(&self, obs: &ObservationTerms, eta: f64, phi: f64) -> f64 {
        let y = obs.y;
        match self.kind {
            FamilyKind::Poisson => y * eta - eta.exp() - obs.constant,
            FamilyKind::Normal => {
                let r = (y - eta) / phi;
                -0.5 * r * r - phi.ln() - LN_SQRT_2PI
            }
            FamilyKind::Gamma => {
                let a = phi;
                // a ln a - a eta + (a - 1) ln y - a y / mu - ln Γ(a)
                a * a.ln() - a * eta + (a - 1.0) * obs.constant - a * y * (-eta).exp() - ln_gamma(a)
            }
        }
    }

    /// Derivatives of the log-density with respect to eta and log(phi).
    #[inline]
    pub(crate) fn score_eta(&self, obs: &ObservationTerms, eta: f64, phi: f64) -> (f64, f64) {
        let y = obs.y;
        match self.kind {
            FamilyKind::Poisson => (y - eta.exp(), 0.0),
            FamilyKind::Normal => {
                let r = (y - eta) / phi;
                (r / phi, r * r - 1.0)
            }
            FamilyKind::Gamma => {
                let a = phi;
                let ratio = y * (-eta).exp();
                let d_eta = a * (ratio - 1.0);
                let d_log_a = a * (a.ln() + 1.0 - eta + obs.constant - ratio - digamma(a));
                (d_eta, d_log_a)
            }
        }
    }

    /// Draw one observation with mean `mu`.
    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, phi: Option<Dispersion>, rng: &mut R) -> Result<f64> {
        self.check_mean(mu)?;
        let phi = self.dispersion_value(phi)?;
        let bad = |e: String| Error::InvalidParameter(e);
        Ok(match self.kind {
            FamilyKind::Poisson => PoissonDist::new(mu)
                .map_err(|e| bad(format!("poisson mean {mu}: {e}")))?
                .sample(rng),
            FamilyKind::Normal => NormalDist::new(mu, phi)
                .map_err(|e| bad(format!("normal({mu}, {phi}): {e}")))?
                .sample(rng),
            FamilyKind::Gamma => GammaDist::new(phi, mu / phi)
                .map_err(|e| bad(format!("gamma(mean {mu}, shape {phi}): {e}")))?
                .sample(rng),
        })
    }

    /// Starting value for the dispersion, from response moments.
    pub(crate) fn initial_dispersion(&self, mean: f64, var: f64) -> f64 {
        match self.kind {
            FamilyKind::Poisson => 1.0,
            FamilyKind::Normal => var.sqrt().max(1e-3),
            FamilyKind::Gamma => (mean * mean / var.max(1e-12)).clamp(1e-2, 1e4),
        }
    }
}

/// Per-observation constants that do not depend on parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ObservationTerms {
    pub y: f64,
    /// Poisson: ln Γ(y+1); Gamma: ln y; Normal: unused.
    pub constant: f64,
}

impl ObservationTerms {
    pub fn new(family: Family, y: f64) -> Self {
        let constant = if !y.is_finite() {
            0.0
        } else {
            match family.kind {
                FamilyKind::Poisson => ln_gamma(y + 1.0),
                FamilyKind::Gamma => y.ln(),
                FamilyKind::Normal => 0.0,
            }
        };
        Self { y, constant }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(v: f64) -> Option<Dispersion> {
        Some(Dispersion::new(v).unwrap())
    }

    #[test]
    fn log_density_examples() {
        let p = Family::poisson();
        assert_abs_diff_eq!(p.log_density(0.0, 2.0, None).unwrap(), -2.0, epsilon = 1e-14);
        let n = Family::normal();
        assert_abs_diff_eq!(
            n.log_density(1.7, 1.7, d(1.0)).unwrap(),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
        // Gamma(shape 2, rate 2) at y = 1: 2^2 * 1 * e^-2 / Γ(2)
        let g = Family::gamma();
        let direct = (4.0f64 * (-2.0f64).exp() / 1.0).ln();
        assert_abs_diff_eq!(g.log_density(1.0, 1.0, d(2.0)).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn invalid_combinations_and_values() {
        assert!(Family::new(FamilyKind::Gamma, Link::Identity).is_err());
        assert!(Family::new(FamilyKind::Poisson, Link::Identity).is_err());
        assert!(Family::new(FamilyKind::Normal, Link::Log).is_err());
        assert!(Family::poisson().log_density(-1.0, 2.0, None).is_err());
        assert!(Family::poisson().log_density(1.5, 2.0, None).is_err());
        assert!(Family::gamma().log_density(0.0, 2.0, d(1.0)).is_err());
        assert!(Family::poisson().log_density(1.0, -2.0, None).is_err());
        assert!(Family::normal().log_density(1.0, 0.0, None).is_err());
        assert!(Dispersion::new(0.0).is_err());
    }

    #[test]
    fn inverse_link_examples() {
        assert_eq!(Family::poisson().inverse_link(0.0), 1.0);
        assert_eq!(Family::normal().inverse_link(-1.3), -1.3);
        assert_abs_diff_eq!(Family::gamma().inverse_link(2.0), 7.389_056_098_930_65, epsilon = 1e-12);
    }

    #[test]
    fn log_link_round_trip() {
        let f = Family::poisson();
        for e in -6..=6 {
            let mu = 10f64.powi(e);
            assert_relative_eq!(f.inverse_link(f.link(mu)), mu, max_relative = 1e-12);
        }
    }

    #[test]
    fn densities_normalize() {
        // Poisson: sum over counts
        let p = Family::poisson();
        let s: f64 = (0..200).map(|y| p.log_density(y as f64, 7.5, None).unwrap().exp()).sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        // Normal and Gamma: midpoint quadrature
        let n = Family::normal();
        let h = 1e-3;
        let s: f64 = (0..40_000)
            .map(|i| -20.0 + (i as f64 + 0.5) * h)
            .map(|y| n.log_density(y, 0.4, d(2.0)).unwrap().exp() * h)
            .sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        let g = Family::gamma();
        let s: f64 = (0..100_000)
            .map(|i| (i as f64 + 0.5) * h)
            .map(|y| g.log_density(y, 3.0, d(2.5)).unwrap().exp() * h)
            .sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn scores_match_finite_differences() {
        for (fam, y, phi) in [
            (Family::poisson(), 4.0, 1.0),
            (Family::normal(), -0.7, 1.8),
            (Family::gamma(), 2.2, 3.1),
        ] {
            let obs = ObservationTerms::new(fam, y);
            let eta = 0.35;
            let (de, dp) = fam.score_eta(&obs, eta, phi);
            let h = 1e-6;
            let fd_e = (fam.log_density_eta(&obs, eta + h, phi) - fam.log_density_eta(&obs, eta - h, phi)) / (2.0 * h);
            let fd_p = (fam.log_density_eta(&obs, eta, phi * h.exp()) - fam.log_density_eta(&obs, eta, phi * (-h).exp()))
                / (2.0 * h);
            assert_abs_diff_eq!(de, fd_e, epsilon = 1e-6);
            if fam.has_dispersion() {
                assert_abs_diff_eq!(dp, fd_p, epsilon = 1e-6);
            }
        }
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn sampler_moments() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Poisson(2): mean 2, var 2
        let xs: Vec<f64> = (0..n).map(|_| Family::poisson().sample(2.0, None, &mut rng).unwrap()).collect();
        let (m, v) = moments(&xs);
        assert!((m - 2.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
        // var of the sample variance: (mu4 - sigma^4) / n with mu4 = λ(1 + 3λ)
        assert!((v - 2.0).abs() < 4.0 * (10.0 / n as f64).sqrt());
        // Normal(1, 3): sd 3, se(sd) ≈ σ / sqrt(2n)
        let xs: Vec<f64> = (0..n).map(|_| Family::normal().sample(1.0, d(3.0), &mut rng).unwrap()).collect();
        let (m, v) = moments(&xs);
        assert!((m - 1.0).abs() < 4.0 * 3.0 / (n as f64).sqrt());
        assert!((v.sqrt() - 3.0).abs() < 3.0 * 3.0 / (2.0 * n as f64).sqrt());
        // Gamma(mean 2, shape 4): var = mu^2 / shape = 1
        let xs: Vec<f64> = (0..n).map(|_| Family::gamma().sample(2.0, d(4.0), &mut rng).unwrap()).collect();
        let (m, v) = moments(&xs);
        assert!((m - 2.0).abs() < 4.0 * (1.0 / n as f64).sqrt());
        // var of sample variance for gamma: (mu4 - sigma^4)/n, mu4 = 3σ^4 + 6σ^4/shape
        let se_v = ((3.0 + 6.0 / 4.0 - 1.0) / n as f64).sqrt();
        assert!((v - 1.0).abs() < 4.0 * se_v);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = Family::normal().sample(0.0, d(1.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Family::normal().sample(0.0, d(1.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
