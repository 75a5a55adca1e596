//! Count regression models used as bandit reward models.
//!
//! Four families share one log-linear mean `μ = exp(φᵀβ)`:
//!
//! | kind    | extra parameters                          |
//! |---------|-------------------------------------------|
//! | Poisson | none                                      |
//! | NB      | inverse dispersion `r`                    |
//! | ZIP     | zero-state logit `γ`, `p = sigmoid(φᵀγ)`  |
//! | ZINB    | `γ` and `r`                               |
//!
//! [`loglik`], [`score`] and [`information`] are exact observed-data
//! quantities. [`fit`] maximizes the (optionally ridge-penalized)
//! log-likelihood by damped Newton for Poisson/NB and by EM for the
//! zero-inflated kinds.

mod dispersion;
mod fit;
mod likelihood;

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub use fit::{fit, penalized_score_norm, EM_ASCENT_SLACK};
pub use likelihood::{complete_loglik, e_step, information, loglik, mean_reward, score};

/// Lower clamp for the NB inverse dispersion.
pub const R_MIN: f64 = 1e-2;
/// Upper clamp for the NB inverse dispersion.
pub const R_MAX: f64 = 1e3;
/// Linear predictors for the count mean above this value are rejected.
pub const MAX_LOG_MEAN: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CountModelError {
    #[error("observation {index}: feature dimension {found} does not match parameter dimension {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("parameters do not match model kind {0}")]
    ParamsMismatch(ModelKind),
    #[error("observation {index}: non-finite intermediate (log-mean {log_mean})")]
    NonFinite { index: usize, log_mean: f64 },
    #[error("responsibilities must lie in [0, 1] and match the data length")]
    InvalidResponsibilities,
    #[error("{0} is only defined for zero-inflated models")]
    NotZeroInflated(&'static str),
    #[error("empty dataset requires a ridge prior with lambda > 0")]
    EmptyDataset,
    #[error("prior centre has dimension {found}, expected {expected}")]
    PriorDimension { expected: usize, found: usize },
    #[error("diverged: objective not finite after {0} step halvings")]
    Diverged(usize),
}

pub type Result<T, E = CountModelError> = std::result::Result<T, E>;

/// Which count distribution the reward model assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Poisson,
    #[serde(rename = "nb")]
    NegBinomial,
    #[serde(rename = "zip")]
    ZeroInflatedPoisson,
    #[serde(rename = "zinb")]
    ZeroInflatedNegBinomial,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Poisson,
        ModelKind::NegBinomial,
        ModelKind::ZeroInflatedPoisson,
        ModelKind::ZeroInflatedNegBinomial,
    ];

    pub fn is_zero_inflated(self) -> bool {
        matches!(
            self,
            ModelKind::ZeroInflatedPoisson | ModelKind::ZeroInflatedNegBinomial
        )
    }

    pub fn has_dispersion(self) -> bool {
        matches!(self, ModelKind::NegBinomial | ModelKind::ZeroInflatedNegBinomial)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Poisson => "poisson",
            ModelKind::NegBinomial => "nb",
            ModelKind::ZeroInflatedPoisson => "zip",
            ModelKind::ZeroInflatedNegBinomial => "zinb",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(ModelKind::Poisson),
            "nb" | "negbinomial" => Ok(ModelKind::NegBinomial),
            "zip" => Ok(ModelKind::ZeroInflatedPoisson),
            "zinb" => Ok(ModelKind::ZeroInflatedNegBinomial),
            other => Err(format!("unknown model '{other}' (expected poisson, nb, zip or zinb)")),
        }
    }
}

/// Feature vector φ(a, x). Any finite vector is accepted here; the
/// environments and feature map keep it inside the unit ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector<T>(pub Vec<T>);

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![T::zero(); d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        crate::linalg::norm(&self.0)
    }

    /// Divides by `max(1, ‖φ‖)` so the result lies in the unit ball.
    pub fn project_to_unit_ball(mut self) -> Self {
        let n = self.norm();
        if n > T::one() {
            for v in &mut self.0 {
                *v = *v / n;
            }
        }
        self
    }

    pub fn scaled(&self, c: T) -> Self {
        Self(self.0.iter().map(|&v| v * c).collect())
    }
}

impl<T> Deref for FeatureVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> From<Vec<T>> for FeatureVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation<T> {
    pub phi: FeatureVector<T>,
    pub y: u64,
}

impl<T: Scalar> Observation<T> {
    pub fn new(phi: impl Into<FeatureVector<T>>, y: u64) -> Self {
        Self { phi: phi.into(), y }
    }
}

/// Observation history `D_t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub observations: Vec<Observation<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new() -> Self {
        Self {
            observations: Vec::new(),
        }
    }

    pub fn from_observations(observations: Vec<Observation<T>>) -> Self {
        Self { observations }
    }

    pub fn push(&mut self, phi: FeatureVector<T>, y: u64) {
        self.observations.push(Observation { phi, y });
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation<T>> {
        self.observations.iter()
    }
}

/// `(β, γ, r)`; `γ` is present iff the kind is zero-inflated and `r` iff it
/// carries dispersion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub beta: Vec<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<T>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Canonical starting point: `β = 0`, `γ = 0`, `r = 1`.
    pub fn zeros(kind: ModelKind, d: usize) -> Self {
        Self {
            beta: vec![T::zero(); d],
            gamma: kind.is_zero_inflated().then(|| vec![T::zero(); d]),
            r: kind.has_dispersion().then(T::one),
        }
    }

    pub fn poisson(beta: Vec<T>) -> Self {
        Self {
            beta,
            gamma: None,
            r: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn matches(&self, kind: ModelKind) -> bool {
        let gamma_ok = match &self.gamma {
            Some(g) => kind.is_zero_inflated() && g.len() == self.beta.len(),
            None => !kind.is_zero_inflated(),
        };
        let r_ok = match self.r {
            Some(r) => kind.has_dispersion() && r > T::zero() && r.is_finite(),
            None => !kind.has_dispersion(),
        };
        gamma_ok && r_ok
    }

    pub(crate) fn check(&self, kind: ModelKind) -> Result<()> {
        if self.matches(kind) {
            Ok(())
        } else {
            Err(CountModelError::ParamsMismatch(kind))
        }
    }

    /// Reshapes parameters to `kind`, filling missing blocks with defaults and
    /// dropping blocks the kind does not use.
    pub fn coerce(&self, kind: ModelKind) -> Self {
        let d = self.dim();
        Self {
            beta: self.beta.clone(),
            gamma: kind
                .is_zero_inflated()
                .then(|| self.gamma.clone().unwrap_or_else(|| vec![T::zero(); d])),
            r: kind
                .has_dispersion()
                .then(|| self.r.unwrap_or_else(T::one).max(T::of(R_MIN)).min(T::of(R_MAX))),
        }
    }
}

/// Ridge prior `λ‖β − β₀‖² + λ‖γ − γ₀‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec<T> {
    pub center_beta: Vec<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_gamma: Option<Vec<T>>,
    pub lambda: T,
}

impl<T: Scalar> PriorSpec<T> {
    pub fn centered_at_zero(d: usize, lambda: T) -> Self {
        Self {
            center_beta: vec![T::zero(); d],
            center_gamma: None,
            lambda,
        }
    }

    pub fn centered_at(params: &ModelParams<T>, lambda: T) -> Self {
        Self {
            center_beta: params.beta.clone(),
            center_gamma: params.gamma.clone(),
            lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions<T> {
    /// Iteration cap for the Newton solvers (Poisson / NB).
    pub newton_max_iter: usize,
    /// Iteration cap for EM (ZIP / ZINB).
    pub em_max_iter: usize,
    pub grad_tol: T,
    pub loglik_rel_tol: T,
    pub jitter: T,
    pub step_halving_max: usize,
    /// Newton steps allowed per M-step block.
    pub m_step_max_iter: usize,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            newton_max_iter: 200,
            em_max_iter: 500,
            grad_tol: T::of(1e-8),
            loglik_rel_tol: T::of(1e-9),
            jitter: T::of(1e-6),
            step_halving_max: 30,
            m_step_max_iter: 25,
        }
    }
}

/// Point estimate plus the observed information used by the Laplace sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub kind: ModelKind,
    pub params: ModelParams<T>,
    pub info_beta: Matrix<T>,
    pub info_gamma: Option<Matrix<T>>,
    /// Observed-data log-likelihood at `params` (without penalty).
    pub loglik: T,
    /// Log-likelihood minus the ridge penalty.
    pub penalized_objective: T,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized observed-data objective after each EM iteration, starting
    /// with the value at the initial point. Empty for Newton fits.
    pub objective_trace: Vec<T>,
    /// EM iterations whose objective fell by more than `1e-9`.
    pub ascent_violations: usize,
}

/// Gradient blocks returned by [`score`].
#[derive(Debug, Clone, PartialEq)]
pub struct Score<T> {
    pub beta: Vec<T>,
    pub gamma: Option<Vec<T>>,
}

impl<T: Scalar> Score<T> {
    pub fn norm(&self) -> T {
        let mut s = crate::linalg::dot(&self.beta, &self.beta);
        if let Some(g) = &self.gamma {
            s = s + crate::linalg::dot(g, g);
        }
        s.sqrt()
    }
}

/// Information blocks returned by [`information`].
#[derive(Debug, Clone, PartialEq)]
pub struct Information<T> {
    pub beta: Matrix<T>,
    pub gamma: Option<Matrix<T>>,
}
