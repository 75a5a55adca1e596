//! Regret against expected rewards, clipped regret, and replay-based
//! off-policy evaluation with self-normalized importance weights.

use serde::{Deserialize, Serialize};

use crate::agents::{AgentError, AgentState};
use crate::count_models::FeatureVector;
use crate::environments::{clipped_value, expected_reward, oracle_action, EnvError, EnvSpec};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty log")]
    EmptyLog,
    #[error("importance weights sum to zero")]
    ZeroWeight,
    #[error("logging propensity {0} outside (0, 1]")]
    InvalidPropensity(f64),
    #[error("action {action} out of range for {k} candidates")]
    ActionOutOfRange { action: usize, k: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-step regret and its running sum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegretTrace<T> {
    pub instant: Vec<T>,
    pub cumulative: Vec<T>,
}

impl<T: Scalar> RegretTrace<T> {
    pub fn new() -> Self {
        Self {
            instant: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn from_instant(instant: Vec<T>) -> Self {
        let mut trace = Self::new();
        for r in instant {
            trace.push(r);
        }
        trace
    }

    pub fn push(&mut self, r: T) {
        let last = self.cumulative.last().copied().unwrap_or_else(T::zero);
        self.instant.push(r);
        self.cumulative.push(last + r);
    }

    pub fn len(&self) -> usize {
        self.instant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instant.is_empty()
    }

    pub fn total(&self) -> T {
        self.cumulative.last().copied().unwrap_or_else(T::zero)
    }
}

/// Oracle expected reward minus that of `chosen`.
pub fn instant_regret<T: Scalar>(spec: &EnvSpec<T>, features: &[FeatureVector<T>], chosen: usize) -> Result<T> {
    let phi = features.get(chosen).ok_or(EvalError::ActionOutOfRange {
        action: chosen,
        k: features.len(),
    })?;
    let (_, best) = oracle_action(spec, features)?;
    Ok(best - expected_reward(spec, phi)?)
}

/// Clipped regret from expected rewards: the clipped oracle value minus
/// `p̃·h_chosen + (1 − p̃)·h_null`.
pub fn clipped_regret_from_rewards<T: Scalar>(
    h_best_active: T,
    h_chosen_active: T,
    h_null: T,
    p_tilde: T,
    p_min: T,
    p_max: T,
) -> T {
    clipped_value(h_best_active, h_null, p_min, p_max) - (p_tilde * h_chosen_active + (T::one() - p_tilde) * h_null)
}

/// Clipped regret for a binary-intention decision: `p̃` is the probability
/// the policy put on intervening with the non-null action `chosen_active`.
pub fn clipped_instant_regret<T: Scalar>(
    spec: &EnvSpec<T>,
    phi_null: &[T],
    phi_active: &[FeatureVector<T>],
    p_tilde: T,
    chosen_active: usize,
    p_min: T,
    p_max: T,
) -> Result<T> {
    let phi = phi_active.get(chosen_active).ok_or(EvalError::ActionOutOfRange {
        action: chosen_active,
        k: phi_active.len(),
    })?;
    let (_, h_best) = oracle_action(spec, phi_active)?;
    let h_null = expected_reward(spec, phi_null)?;
    let h_chosen = expected_reward(spec, phi)?;
    Ok(clipped_regret_from_rewards(
        h_best, h_chosen, h_null, p_tilde, p_min, p_max,
    ))
}

/// Pointwise mean of `run_once` traces over `n_draws` truths from `draw_truth`.
pub fn bayes_regret<T, P, D, F, E>(
    n_draws: usize,
    mut draw_truth: D,
    mut run_once: F,
) -> std::result::Result<RegretTrace<T>, E>
where
    T: Scalar,
    D: FnMut(usize) -> P,
    F: FnMut(usize, P) -> std::result::Result<RegretTrace<T>, E>,
{
    let mut sum: Vec<T> = Vec::new();
    for i in 0..n_draws {
        let trace = run_once(i, draw_truth(i))?;
        if sum.is_empty() {
            sum = vec![T::zero(); trace.len()];
        }
        for (s, &r) in sum.iter_mut().zip(&trace.instant) {
            *s = *s + r;
        }
    }
    let n = T::of_usize(n_draws.max(1));
    Ok(RegretTrace::from_instant(sum.into_iter().map(|s| s / n).collect()))
}

/// One SNIPW input: target-policy propensity of the logged action, logging
/// propensity, outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedOutcome<T> {
    pub target: T,
    pub logged: T,
    pub y: u64,
}

/// `Σ w y / Σ w` with `w = target / logged`.
pub fn snipw<T: Scalar>(log: &[WeightedOutcome<T>]) -> Result<T> {
    if log.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for w in log {
        if !(w.logged > T::zero()) {
            return Err(EvalError::InvalidPropensity(w.logged.f64()));
        }
        let weight = w.target / w.logged;
        num = num + weight * T::of(w.y as f64);
        den = den + weight;
    }
    if !(den > T::zero()) {
        return Err(EvalError::ZeroWeight);
    }
    Ok(num / den)
}

pub fn reward_improvement<T: Scalar>(agent_estimate: T, baseline_estimate: T) -> T {
    agent_estimate - baseline_estimate
}

/// One logged decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayTuple<T> {
    pub features: Vec<FeatureVector<T>>,
    pub logged_action: usize,
    pub logged_propensity: T,
    pub outcome: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayOutcome<T> {
    /// Indices of retained tuples.
    pub retained: Vec<usize>,
    /// SNIPW inputs of the retained tuples.
    pub weighted: Vec<WeightedOutcome<T>>,
}

impl<T> ReplayOutcome<T> {
    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpeResult<T> {
    pub snipw_estimate: T,
    pub retained_count: usize,
    pub reward_improvement: T,
}

/// Rejection replay: the agent proposes an action for each tuple in order;
/// matching tuples are kept and fed back to the agent, the rest are skipped
/// without updating it. The agent's propensity for the logged action is
/// recorded before the match is known.
pub fn replay<T: Scalar>(log: &[ReplayTuple<T>], agent: &mut AgentState<T>) -> Result<ReplayOutcome<T>> {
    agent.config.report_propensity = true;
    let mut out = ReplayOutcome {
        retained: Vec::new(),
        weighted: Vec::new(),
    };
    for (i, tuple) in log.iter().enumerate() {
        let k = tuple.features.len();
        if tuple.logged_action >= k {
            return Err(EvalError::ActionOutOfRange {
                action: tuple.logged_action,
                k,
            });
        }
        if !(tuple.logged_propensity > T::zero() && tuple.logged_propensity <= T::one()) {
            return Err(EvalError::InvalidPropensity(tuple.logged_propensity.f64()));
        }
        let decision = agent.decide(&tuple.features)?;
        let target = match &decision.action_probs {
            Some(p) => p[tuple.logged_action],
            None if decision.action == tuple.logged_action => decision.propensity,
            None => T::zero(),
        };
        if decision.action == tuple.logged_action {
            agent.update(tuple.features[tuple.logged_action].clone(), tuple.outcome);
            out.retained.push(i);
            out.weighted.push(WeightedOutcome {
                target,
                logged: tuple.logged_propensity,
                y: tuple.outcome,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wo(target: f64, logged: f64, y: u64) -> WeightedOutcome<f64> {
        WeightedOutcome { target, logged, y }
    }

    #[test]
    fn snipw_examples() {
        let same = [wo(0.6, 0.6, 1), wo(0.3, 0.3, 2), wo(0.9, 0.9, 3)];
        assert_eq!(snipw(&same).unwrap(), 2.0);
        assert_eq!(snipw(&[wo(0.2, 0.7, 5)]).unwrap(), 5.0);
        let w = [wo(1.0, 0.5, 1), wo(0.25, 0.5, 3)];
        assert!((snipw(&w).unwrap() - 1.4).abs() < 1e-15);
        assert!(snipw::<f64>(&[]).is_err());
        assert!(matches!(snipw(&[wo(0.0, 0.5, 1)]), Err(EvalError::ZeroWeight)));
    }

    #[test]
    fn reward_improvement_examples() {
        assert_eq!(reward_improvement(2.0, 1.5), 0.5);
        assert_eq!(reward_improvement(1.0, 1.0), 0.0);
        assert_eq!(reward_improvement(0.5, 1.0), -0.5);
    }

    #[test]
    fn clipped_regret_examples() {
        let r = clipped_regret_from_rewards(2.0_f64, 2.0, 1.0, 0.6, 0.01, 0.99);
        assert!((r - 0.39).abs() < 1e-12);
        assert!(clipped_regret_from_rewards(2.0_f64, 2.0, 1.0, 0.99, 0.01, 0.99).abs() < 1e-15);
    }

    #[test]
    fn trace_prefix_sums() {
        let t = RegretTrace::from_instant(vec![0.5, 0.0, 1.25]);
        assert_eq!(t.cumulative, vec![0.5, 0.5, 1.75]);
        assert_eq!(t.total(), 1.75);
    }

    #[test]
    fn bayes_regret_averages_pointwise() {
        let traces = [vec![1.0, 2.0], vec![3.0, 0.0]];
        let avg: RegretTrace<f64> = bayes_regret(
            2,
            |i| i,
            |_, i| Ok::<_, ()>(RegretTrace::from_instant(traces[i].clone())),
        )
        .unwrap();
        assert_eq!(avg.instant, vec![2.0, 1.0]);
        let one: RegretTrace<f64> = bayes_regret(
            1,
            |i| i,
            |_, i| Ok::<_, ()>(RegretTrace::from_instant(traces[i].clone())),
        )
        .unwrap();
        assert_eq!(one.instant, traces[0]);
    }
}
