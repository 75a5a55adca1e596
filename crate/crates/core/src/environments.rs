//! Synthetic count-outcome environments: gamma-mixed Poisson with optional
//! structural zeros, plus truth generation and oracle values.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::count_models::{FeatureVector, ModelParams, MAX_LOG_MEAN};
use crate::linalg::dot;
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("log mean {0} exceeds the overflow cap")]
    Overflow(f64),
    #[error("feature dimension {found} does not match truth dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no candidate actions")]
    NoActions,
    #[error("invalid environment: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Outcome generator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvFamily {
    /// `Y ~ Poisson(μ)`.
    Poisson,
    /// Overdispersed Poisson: `Y ~ Poisson(λμ)`, `λ ~ Gamma(ω, 1/ω)`.
    Op,
    /// Zero-inflated Poisson.
    Zip,
    /// Zero-inflated overdispersed Poisson.
    Ziop,
}

impl EnvFamily {
    pub fn is_zero_inflated(self) -> bool {
        matches!(self, EnvFamily::Zip | EnvFamily::Ziop)
    }

    pub fn is_overdispersed(self) -> bool {
        matches!(self, EnvFamily::Op | EnvFamily::Ziop)
    }
}

impl std::str::FromStr for EnvFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(EnvFamily::Poisson),
            "op" => Ok(EnvFamily::Op),
            "zip" => Ok(EnvFamily::Zip),
            "ziop" => Ok(EnvFamily::Ziop),
            other => Err(format!("unknown environment family `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    FreshGaussian,
    /// Contexts are supplied by the caller.
    FromLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec<T> {
    pub family: EnvFamily,
    /// Gamma shape; ignored by the Poisson and ZIP families.
    pub omega: T,
    pub truth: ModelParams<T>,
    pub k: usize,
    pub d: usize,
    pub feature_mode: FeatureMode,
}

impl<T: Scalar> EnvSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.truth.dim() != self.d {
            return Err(EnvError::DimensionMismatch {
                expected: self.d,
                found: self.truth.dim(),
            });
        }
        if self.family.is_zero_inflated() != self.truth.gamma.is_some() {
            return Err(EnvError::Invalid(
                "zero-inflated families need gamma in the truth, others must not have it".into(),
            ));
        }
        if !(self.omega > T::zero()) {
            return Err(EnvError::Invalid("omega must be positive".into()));
        }
        if self.k == 0 || self.d == 0 {
            return Err(EnvError::Invalid("K and d must be positive".into()));
        }
        Ok(())
    }

    fn check(&self, phi: &[T]) -> Result<()> {
        if phi.len() != self.d {
            return Err(EnvError::DimensionMismatch {
                expected: self.d,
                found: phi.len(),
            });
        }
        Ok(())
    }

    fn log_mean(&self, phi: &[T]) -> Result<T> {
        self.check(phi)?;
        let eta = dot(phi, &self.truth.beta);
        if !eta.is_finite() || eta > T::of(MAX_LOG_MEAN) {
            return Err(EnvError::Overflow(eta.f64()));
        }
        Ok(eta)
    }

    /// Probability of a structural zero; zero for families without one.
    fn zero_prob(&self, phi: &[T]) -> T {
        match &self.truth.gamma {
            Some(g) if self.family.is_zero_inflated() => sigmoid(dot(phi, g)),
            _ => T::zero(),
        }
    }
}

/// Standard normal vector projected onto the unit ball.
fn ball_gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, d: usize) -> FeatureVector<T> {
    let v: Vec<T> = (0..d).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    FeatureVector::new(v).project_to_unit_ball()
}

/// `K` independent feature vectors, each `N(0, I_d)` divided by `max(1, ‖·‖)`.
pub fn gen_features<T: Scalar, R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize) -> Vec<FeatureVector<T>> {
    (0..k).map(|_| ball_gaussian(rng, d)).collect()
}

/// True parameters drawn like the features; `r` is left unset.
pub fn gen_truth<T: Scalar, R: Rng + ?Sized>(rng: &mut R, d: usize, needs_gamma: bool) -> ModelParams<T> {
    let beta = ball_gaussian(rng, d).0;
    let gamma = needs_gamma.then(|| ball_gaussian(rng, d).0);
    ModelParams { beta, gamma, r: None }
}

/// One outcome at `phi`.
pub fn draw_outcome<T: Scalar, R: Rng + ?Sized>(spec: &EnvSpec<T>, phi: &[T], rng: &mut R) -> Result<u64> {
    let mu = spec.log_mean(phi)?.f64().exp();
    let lambda = if spec.family.is_overdispersed() {
        let omega = spec.omega.f64();
        Gamma::new(omega, 1.0 / omega)
            .map_err(|e| EnvError::Invalid(e.to_string()))?
            .sample(rng)
    } else {
        1.0
    };
    let rate = lambda * mu;
    let count = if rate > 0.0 {
        Poisson::new(rate)
            .map_err(|e| EnvError::Invalid(e.to_string()))?
            .sample(rng) as u64
    } else {
        0
    };
    if spec.family.is_zero_inflated() {
        let p = spec.zero_prob(phi).f64();
        // Z ~ Bernoulli(1 − p); Y = Z·C.
        let z = rng.random::<f64>() >= p;
        return Ok(if z { count } else { 0 });
    }
    Ok(count)
}

/// `E[Y | φ]`: `μ`, times `1 − sigmoid(φᵀγ*)` for zero-inflated families.
pub fn expected_reward<T: Scalar>(spec: &EnvSpec<T>, phi: &[T]) -> Result<T> {
    let mu = spec.log_mean(phi)?.exp();
    Ok((T::one() - spec.zero_prob(phi)) * mu)
}

/// Best action and its expected reward; lowest index on ties.
pub fn oracle_action<T: Scalar>(spec: &EnvSpec<T>, features: &[FeatureVector<T>]) -> Result<(usize, T)> {
    if features.is_empty() {
        return Err(EnvError::NoActions);
    }
    let mut best = (0, T::neg_infinity());
    for (i, phi) in features.iter().enumerate() {
        let h = expected_reward(spec, phi)?;
        if h > best.1 {
            best = (i, h);
        }
    }
    Ok(best)
}

/// `max_{p ∈ [p_min, p_max]} p·h_active + (1 − p)·h_null`.
pub fn clipped_value<T: Scalar>(h_active: T, h_null: T, p_min: T, p_max: T) -> T {
    let p = if h_active >= h_null { p_max } else { p_min };
    p * h_active + (T::one() - p) * h_null
}

/// Clipped oracle for a null action and the non-null candidates. Returns the
/// oracle value and the index (into `phi_active`) of the best non-null action.
pub fn clipped_oracle_value<T: Scalar>(
    spec: &EnvSpec<T>,
    phi_null: &[T],
    phi_active: &[FeatureVector<T>],
    p_min: T,
    p_max: T,
) -> Result<(T, usize)> {
    let (best, h_active) = oracle_action(spec, phi_active)?;
    let h_null = expected_reward(spec, phi_null)?;
    Ok((clipped_value(h_active, h_null, p_min, p_max), best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(family: EnvFamily, omega: f64) -> EnvSpec<f64> {
        EnvSpec {
            family,
            omega,
            truth: ModelParams {
                beta: vec![0.0, 2f64.ln()],
                gamma: family.is_zero_inflated().then(|| vec![0.0, 0.0]),
                r: None,
            },
            k: 2,
            d: 2,
            feature_mode: FeatureMode::FreshGaussian,
        }
    }

    #[test]
    fn expected_reward_examples() {
        let phi = [1.0, 0.0];
        assert_eq!(expected_reward(&spec(EnvFamily::Poisson, 1.0), &phi).unwrap(), 1.0);
        let a = expected_reward(&spec(EnvFamily::Op, 0.25), &phi).unwrap();
        let b = expected_reward(&spec(EnvFamily::Op, 25.0), &phi).unwrap();
        assert_eq!(a, b);
        let z = expected_reward(&spec(EnvFamily::Ziop, 1.0), &[0.0, 1.0]).unwrap();
        assert!((z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clipped_value_examples() {
        assert!((clipped_value(2.0_f64, 1.0, 0.01, 0.99) - 1.99).abs() < 1e-12);
        assert!((clipped_value(1.0_f64, 2.0, 0.01, 0.99) - 1.99).abs() < 1e-12);
        assert_eq!(clipped_value(1.0, 2.0, 0.0, 1.0), 2.0);
        assert_eq!(clipped_value(3.0, 2.0, 0.0, 1.0), 3.0);
    }

    #[test]
    fn oracle_ties_and_single_action() {
        let s = spec(EnvFamily::Poisson, 1.0);
        let f = vec![FeatureVector::new(vec![0.2, 0.1]); 3];
        assert_eq!(oracle_action(&s, &f).unwrap().0, 0);
        let (i, v) = oracle_action(&s, &f[..1]).unwrap();
        assert_eq!(i, 0);
        assert_eq!(v, expected_reward(&s, &f[0]).unwrap());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut s = spec(EnvFamily::Poisson, 1.0);
        s.truth.beta = vec![100.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            draw_outcome(&s, &[1.0, 0.0], &mut rng),
            Err(EnvError::Overflow(_))
        ));
    }

    #[test]
    fn validate_catches_missing_gamma() {
        let mut s = spec(EnvFamily::Zip, 1.0);
        assert!(s.validate().is_ok());
        s.truth.gamma = None;
        assert!(s.validate().is_err());
    }
}
