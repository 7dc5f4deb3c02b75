//! Markov-switching generalized additive models for time series.
//!
//! A hidden Markov chain selects, at each time point, one of several
//! generalized additive predictors. Smooth terms are penalized cubic
//! B-splines; the penalty strength is chosen by cross-validation or a
//! penalized AIC, and uncertainty is summarized by parametric-bootstrap
//! confidence bands.

pub mod basis;
pub mod bootstrap;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod family;
pub mod fit;
pub mod hmm;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod smoothing;

pub use basis::{PenaltyMatrix, SplineBasis, Standardizer};
pub use data::TimeSeriesData;
pub use error::{Error, Result};
pub use family::{Dispersion, Family, FamilyKind, Link};
pub use hmm::{forward_loglik, stationary_distribution, viterbi_decode, ForwardResult, InitMode, MarkovChain};
pub use model::{pack, unpack, MsGamParams, MsGamSpec, SmoothingVector, SpecOptions, TermChoice};
pub use fit::{effective_dof, fit, fit_from, observed_fisher, FitOptions, FitResult, GradientMode, ModelFile};
