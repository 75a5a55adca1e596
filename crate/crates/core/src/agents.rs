//! Thompson-sampling policies for count outcomes, with Linear TS and a
//! constant-probability baseline.
//!
//! An [`AgentState`] owns its history and random streams; decisions and
//! updates on one agent are sequential.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::count_models::{
    fit, CountModelError, Dataset, FeatureVector, FitOptions, FitResult, ModelKind, ModelParams, PriorSpec,
};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::scalar::{softplus, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("clipping requires binary actions (got K = {0})")]
    ClippingRequiresBinary(usize),
    #[error("the static policy requires binary actions (got K = {0})")]
    StaticRequiresBinary(usize),
    #[error("no candidate actions")]
    NoActions,
    #[error("feature dimension {found} does not match agent dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("information matrix is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Fit(#[from] CountModelError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Decision rule of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Thompson sampling on a count model with a Laplace posterior.
    Ts(ModelKind),
    /// Bayesian linear regression on `ln(1 + y)`.
    LinearTs,
    /// Intervene (action 1) with a fixed probability.
    Static,
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::Ts(kind) => format!("ts-{kind}"),
            Policy::LinearTs => "linear-ts".to_string(),
            Policy::Static => "static".to_string(),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    /// Parses the labels produced by [`Policy::label`].
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear-ts" => Ok(Policy::LinearTs),
            "static" => Ok(Policy::Static),
            other => match other.strip_prefix("ts-") {
                Some(kind) => kind.parse().map(Policy::Ts),
                None => Err(format!(
                    "unknown agent '{other}' (expected ts-poisson, ts-nb, ts-zip, ts-zinb, linear-ts or static)"
                )),
            },
        }
    }
}

/// When forced exploration ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration<T> {
    /// Explore while `t ≤ τ`.
    FixedTau(usize),
    /// Explore until `λ_min(G_t) ≥ B`.
    MinEigen(T),
}

/// How actions are picked during exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationOrder {
    #[default]
    Uniform,
    /// Action `(t − 1) mod K`, so each arm is pulled once in the first K steps.
    RoundRobin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig<T> {
    pub policy: Policy,
    pub alpha_beta: T,
    pub alpha_gamma: T,
    pub exploration: Exploration<T>,
    pub exploration_order: ExplorationOrder,
    /// `(p_min, p_max)` applied to the probability of action 1.
    pub clip: Option<(T, T)>,
    pub prior: Option<PriorSpec<T>>,
    pub refit_every: usize,
    pub static_p: T,
    /// Posterior draws used for Monte Carlo propensities.
    pub propensity_draws: usize,
    /// Report Monte Carlo propensities even when no clipping is applied.
    pub report_propensity: bool,
    pub fit_options: FitOptions<T>,
}

impl<T: Scalar> AgentConfig<T> {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            alpha_beta: T::one(),
            alpha_gamma: T::one(),
            exploration: Exploration::FixedTau(0),
            exploration_order: ExplorationOrder::Uniform,
            clip: None,
            prior: None,
            refit_every: 1,
            static_p: T::of(0.6),
            propensity_draws: 1000,
            report_propensity: false,
            fit_options: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.alpha_beta >= T::zero()) || !(self.alpha_gamma >= T::zero()) {
            return bad("alpha values must be nonnegative");
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo > T::zero() && lo < hi && hi < T::one()) {
                return bad("clip bounds must satisfy 0 < p_min < p_max < 1");
            }
        }
        if let Exploration::MinEigen(b) = self.exploration {
            if !(b > T::zero()) {
                return bad("min-eigenvalue threshold must be positive");
            }
        }
        if self.refit_every == 0 {
            return bad("refit_every must be positive");
        }
        if !(self.static_p > T::zero() && self.static_p < T::one()) {
            return bad("static_p must lie in (0, 1)");
        }
        if self.propensity_draws == 0 {
            return bad("propensity_draws must be positive");
        }
        if let Some(p) = &self.prior {
            if !(p.lambda >= T::zero()) {
                return bad("prior lambda must be nonnegative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision<T> {
    pub action: usize,
    /// Probability the policy assigned to `action`; `1.0` when the rule is
    /// deterministic given the posterior draw and no estimate was requested.
    pub propensity: T,
    /// Full action distribution when the policy computed one.
    pub action_probs: Option<Vec<T>>,
    /// Posterior draw behind the decision, when consistent with `action`.
    pub sampled: Option<ModelParams<T>>,
    pub explored: bool,
}

#[derive(Debug, Clone)]
pub struct AgentState<T> {
    pub config: AgentConfig<T>,
    pub history: Dataset<T>,
    pub gram: Matrix<T>,
    pub cached_fit: Option<FitResult<T>>,
    /// Index of the next decision, starting at 1.
    pub t: usize,
    /// EM ascent violations summed over every fit this agent has run.
    pub em_violations: usize,
    pub fits: usize,
    pub unconverged_fits: usize,
    d: usize,
    updates_since_fit: usize,
    /// `Σ φ ln(1 + y)` for Linear TS.
    lin_target: Vec<T>,
    rng: ChaCha8Rng,
    propensity_rng: ChaCha8Rng,
}

/// Laplace posterior draw `θ̂ + α L⁻ᵀ u` for each block, `u ~ N(0, I)`.
pub fn laplace_sample<T: Scalar, R: Rng + ?Sized>(
    fit: &FitResult<T>,
    alpha_beta: T,
    alpha_gamma: T,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    let beta = gaussian_draw(&fit.params.beta, &fit.info_beta, alpha_beta, rng)?;
    let gamma = match (&fit.params.gamma, &fit.info_gamma) {
        (Some(g), Some(info)) => Some(gaussian_draw(g, info, alpha_gamma, rng)?),
        _ => None,
    };
    Ok(ModelParams {
        beta,
        gamma,
        r: fit.params.r,
    })
}

fn gaussian_draw<T: Scalar, R: Rng + ?Sized>(
    center: &[T],
    precision: &Matrix<T>,
    alpha: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    let chol = Cholesky::new(precision).ok_or(AgentError::NotPositiveDefinite)?;
    Ok(draw_with(center, &chol, alpha, rng))
}

fn draw_with<T: Scalar, R: Rng + ?Sized>(center: &[T], chol: &Cholesky<T>, alpha: T, rng: &mut R) -> Vec<T> {
    let u: Vec<T> = (0..center.len())
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let z = chol.solve_upper(&u);
    center.iter().zip(z).map(|(&c, zi)| c + alpha * zi).collect()
}

/// Log of the expected reward under `params` (no `exp`, so no overflow).
fn log_h<T: Scalar>(kind: ModelKind, params: &ModelParams<T>, phi: &[T]) -> T {
    let eta = dot(phi, &params.beta);
    match (&params.gamma, kind.is_zero_inflated()) {
        (Some(g), true) => eta - softplus(dot(phi, g)),
        _ => eta,
    }
}

fn argmax<T: Scalar>(values: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Index maximizing the expected reward `h(φ_a)` under `sampled`; lowest
/// index on ties.
pub fn select_action<T: Scalar>(kind: ModelKind, sampled: &ModelParams<T>, features: &[FeatureVector<T>]) -> usize {
    argmax(features.iter().map(|phi| log_h(kind, sampled, phi)))
}

pub fn clip<T: Scalar>(p: T, p_min: T, p_max: T) -> T {
    p.min(p_max).max(p_min)
}

/// Exact draw of a Bernoulli with success probability `p` using one uniform.
fn bernoulli<T: Scalar, R: Rng + ?Sized>(rng: &mut R, p: T) -> bool {
    rng.random::<f64>() < p.f64()
}

impl<T: Scalar> AgentState<T> {
    pub fn new(config: AgentConfig<T>, d: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(p) = &config.prior {
            if p.center_beta.len() != d {
                return Err(AgentError::DimensionMismatch {
                    expected: d,
                    found: p.center_beta.len(),
                });
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut propensity_rng = ChaCha8Rng::seed_from_u64(seed);
        propensity_rng.set_stream(1);
        Ok(Self {
            config,
            history: Dataset::new(),
            gram: Matrix::zeros(d),
            cached_fit: None,
            t: 1,
            em_violations: 0,
            fits: 0,
            unconverged_fits: 0,
            d,
            updates_since_fit: 0,
            lin_target: vec![T::zero(); d],
            rng,
            propensity_rng,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn exploration_done(&self) -> bool {
        match self.config.exploration {
            Exploration::FixedTau(tau) => self.t > tau,
            Exploration::MinEigen(b) => self.gram.min_eigenvalue() >= b,
        }
    }

    fn check_features(&self, features: &[FeatureVector<T>]) -> Result<()> {
        if features.is_empty() {
            return Err(AgentError::NoActions);
        }
        for f in features {
            if f.dim() != self.d {
                return Err(AgentError::DimensionMismatch {
                    expected: self.d,
                    found: f.dim(),
                });
            }
        }
        if self.config.clip.is_some() && features.len() != 2 {
            return Err(AgentError::ClippingRequiresBinary(features.len()));
        }
        Ok(())
    }

    /// Chooses an action for the given per-action feature vectors.
    pub fn decide(&mut self, features: &[FeatureVector<T>]) -> Result<Decision<T>> {
        match self.config.policy {
            Policy::Ts(_) => self.ts_step(features),
            Policy::LinearTs => self.linear_ts_step(features),
            Policy::Static => self.static_step(features),
        }
    }

    fn explore(&mut self, k: usize) -> Decision<T> {
        let action = match self.config.exploration_order {
            ExplorationOrder::Uniform => self.rng.random_range(0..k),
            ExplorationOrder::RoundRobin => (self.t - 1) % k,
        };
        let p = T::one() / T::of_usize(k);
        Decision {
            action,
            propensity: p,
            action_probs: Some(vec![p; k]),
            sampled: None,
            explored: true,
        }
    }

    fn refit_if_due(&mut self) -> Result<()> {
        let Policy::Ts(kind) = self.config.policy else {
            return Ok(());
        };
        if self.cached_fit.is_some() && self.updates_since_fit < self.config.refit_every {
            return Ok(());
        }
        let init = self.cached_fit.as_ref().map(|f| f.params.clone());
        let result = fit(
            kind,
            &self.history,
            self.config.prior.as_ref(),
            &self.config.fit_options,
            init.as_ref(),
        )?;
        self.fits += 1;
        self.em_violations += result.ascent_violations;
        if !result.converged {
            self.unconverged_fits += 1;
        }
        log::trace!(
            "refit {} at t={} (n={}, converged={})",
            kind,
            self.t,
            self.history.len(),
            result.converged
        );
        self.cached_fit = Some(result);
        self.updates_since_fit = 0;
        Ok(())
    }

    /// Thompson-sampling step for count-model policies.
    pub fn ts_step(&mut self, features: &[FeatureVector<T>]) -> Result<Decision<T>> {
        let Policy::Ts(kind) = self.config.policy else {
            return Err(AgentError::InvalidConfig("ts_step needs a count-model policy".into()));
        };
        self.check_features(features)?;
        if !self.exploration_done() {
            return Ok(self.explore(features.len()));
        }
        self.refit_if_due()?;
        let fit = self.cached_fit.as_ref().expect("refit_if_due stores a fit");
        let sampled = laplace_sample(fit, self.config.alpha_beta, self.config.alpha_gamma, &mut self.rng)?;
        let greedy = select_action(kind, &sampled, features);
        self.finish(features, greedy, sampled)
    }

    /// Shared tail of the TS policies: optional propensity estimate and
    /// clipping around the argmax of one posterior draw.
    fn finish(&mut self, features: &[FeatureVector<T>], greedy: usize, sampled: ModelParams<T>) -> Result<Decision<T>> {
        if let Some((lo, hi)) = self.config.clip {
            let probs = self.action_propensity(features, self.config.propensity_draws)?;
            let p1 = clip(probs[1], lo, hi);
            let action = usize::from(bernoulli(&mut self.rng, p1));
            let propensity = if action == 1 { p1 } else { T::one() - p1 };
            return Ok(Decision {
                action,
                propensity,
                action_probs: Some(vec![T::one() - p1, p1]),
                sampled: (action == greedy).then_some(sampled),
                explored: false,
            });
        }
        let (propensity, action_probs) = if self.config.report_propensity {
            let probs = self.action_propensity(features, self.config.propensity_draws)?;
            (probs[greedy], Some(probs))
        } else {
            (T::one(), None)
        };
        Ok(Decision {
            action: greedy,
            propensity,
            action_probs,
            sampled: Some(sampled),
            explored: false,
        })
    }

    /// Monte Carlo estimate of `P(A = a)` over `m` posterior draws, from a
    /// dedicated random stream.
    pub fn action_propensity(&mut self, features: &[FeatureVector<T>], m: usize) -> Result<Vec<T>> {
        let k = features.len();
        if k == 1 {
            return Ok(vec![T::one()]);
        }
        let mut counts = vec![0usize; k];
        match self.config.policy {
            Policy::Ts(kind) => {
                let fit = self
                    .cached_fit
                    .as_ref()
                    .ok_or_else(|| AgentError::InvalidConfig("propensity requested before any fit".into()))?;
                let cb = Cholesky::new(&fit.info_beta).ok_or(AgentError::NotPositiveDefinite)?;
                let cg = match &fit.info_gamma {
                    Some(m) => Some(Cholesky::new(m).ok_or(AgentError::NotPositiveDefinite)?),
                    None => None,
                };
                for _ in 0..m {
                    let beta = draw_with(&fit.params.beta, &cb, self.config.alpha_beta, &mut self.propensity_rng);
                    let gamma = match (&fit.params.gamma, &cg) {
                        (Some(g), Some(c)) => Some(draw_with(g, c, self.config.alpha_gamma, &mut self.propensity_rng)),
                        _ => None,
                    };
                    let p = ModelParams { beta, gamma, r: None };
                    counts[select_action(kind, &p, features)] += 1;
                }
            }
            Policy::LinearTs => {
                let (theta, chol) = self.linear_posterior()?;
                for _ in 0..m {
                    let draw = draw_with(&theta, &chol, self.config.alpha_beta, &mut self.propensity_rng);
                    counts[argmax(features.iter().map(|phi| dot(phi, &draw)))] += 1;
                }
            }
            Policy::Static => {
                if k != 2 {
                    return Err(AgentError::StaticRequiresBinary(k));
                }
                let p = self.config.static_p;
                return Ok(vec![T::one() - p, p]);
            }
        }
        let total = T::of_usize(m);
        Ok(counts.into_iter().map(|c| T::of_usize(c) / total).collect())
    }

    /// Posterior mean and Cholesky factor of `V = I + Σ φφᵀ`.
    fn linear_posterior(&self) -> Result<(Vec<T>, Cholesky<T>)> {
        let mut v = self.gram.clone();
        v.add_diagonal(T::one());
        let chol = Cholesky::new(&v).ok_or(AgentError::NotPositiveDefinite)?;
        Ok((chol.solve(&self.lin_target), chol))
    }

    /// Linear TS on `ln(1 + y)` with a unit ridge prior.
    pub fn linear_ts_step(&mut self, features: &[FeatureVector<T>]) -> Result<Decision<T>> {
        self.check_features(features)?;
        if !self.exploration_done() {
            return Ok(self.explore(features.len()));
        }
        let (theta, chol) = self.linear_posterior()?;
        let draw = draw_with(&theta, &chol, self.config.alpha_beta, &mut self.rng);
        let greedy = argmax(features.iter().map(|phi| dot(phi, &draw)));
        self.finish(features, greedy, ModelParams::poisson(draw))
    }

    /// Intervenes (action 1) with probability `static_p`.
    pub fn static_step(&mut self, features: &[FeatureVector<T>]) -> Result<Decision<T>> {
        if features.len() != 2 {
            return Err(AgentError::StaticRequiresBinary(features.len()));
        }
        let p = self.config.static_p;
        let action = usize::from(bernoulli(&mut self.rng, p));
        Ok(Decision {
            action,
            propensity: if action == 1 { p } else { T::one() - p },
            action_probs: Some(vec![T::one() - p, p]),
            sampled: None,
            explored: false,
        })
    }

    /// Records the outcome of the chosen action.
    pub fn update(&mut self, phi: FeatureVector<T>, y: u64) {
        debug_assert_eq!(phi.dim(), self.d);
        self.gram.add_outer(T::one(), &phi);
        if self.config.policy == Policy::LinearTs {
            let target = T::of((y as f64).ln_1p());
            for (b, &x) in self.lin_target.iter_mut().zip(phi.iter()) {
                *b = *b + target * x;
            }
        }
        self.history.push(phi, y);
        self.t += 1;
        self.updates_since_fit += 1;
    }
}
