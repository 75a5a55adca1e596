//! Seeded multi-replication experiments: synthetic bandit runs, per-user
//! MRT simulations, aggregation into mean ± standard-error curves, and
//! CSV/JSON export.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, AgentError, AgentState, Exploration, ExplorationOrder, Policy};
use crate::count_models::{fit, Dataset, FeatureVector, FitOptions, ModelKind, ModelParams, PriorSpec};
use crate::environments::{
    draw_outcome, expected_reward, gen_features, gen_truth, oracle_action, EnvError, EnvFamily, EnvSpec, FeatureMode,
};
use crate::evaluation::{
    clipped_regret_from_rewards, instant_regret, replay, reward_improvement, snipw, EvalError, RegretTrace, ReplayTuple,
};
use crate::mrt::{
    cohort_scaler, gen_covariates, perturb_truth, reference_center, row_for, user_env, user_id, CovariateScaler,
    MrtLog, UserLog, MRT_FEATURE_DIM,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "agent,t,mean_cum_regret,se";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("replication {rep}: {source}")]
    Replication {
        rep: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed results file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Mixes two words into a well-spread 64-bit seed (SplitMix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a hash of a name; stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

const STREAM_TRUTH: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_OUTCOMES: u64 = 3;
const STREAM_POLICY: u64 = 4;
const STREAM_COVARIATES: u64 = 5;

pub fn replication_seed(base_seed: u64, rep: usize) -> u64 {
    mix_seed(base_seed, rep as u64)
}

fn agent_seed(seed: u64, name: &str) -> u64 {
    mix_seed(seed, name_hash(name))
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tag))
}

/// A contender in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contender {
    Learner(AgentConfig<f64>),
    /// Always plays the best action; used to check the regret plumbing.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAgent {
    pub name: String,
    pub contender: Contender,
}

impl NamedAgent {
    pub fn learner(name: impl Into<String>, config: AgentConfig<f64>) -> Self {
        Self {
            name: name.into(),
            contender: Contender::Learner(config),
        }
    }

    pub fn oracle() -> Self {
        Self {
            name: "oracle".into(),
            contender: Contender::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerUser {
    pub n_users: usize,
    /// Standard deviation of per-user truths around the population center.
    pub heterogeneity: f64,
    /// Ridge weight of the per-user prior centered at the population truth.
    pub lambda: f64,
    /// Population truth; per-user truths are drawn around it.
    pub center: ModelParams<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub family: EnvFamily,
    pub omega: f64,
    pub k: usize,
    pub d: usize,
    pub horizon: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub agents: Vec<NamedAgent>,
    /// `(p_min, p_max)`; `(0, 1)` means no clipping.
    pub clip: Option<(f64, f64)>,
    pub per_user: Option<PerUser>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidScenario(m));
        if self.horizon == 0 || self.k == 0 || self.d == 0 || self.replications == 0 {
            return bad("T, K, d and R must be positive".into());
        }
        if self.agents.is_empty() {
            return bad("no agents".into());
        }
        let mut names: Vec<&str> = self.agents.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("agent names must be unique".into());
        }
        if !(self.omega > 0.0) {
            return bad("omega must be positive".into());
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
                return bad(format!("clip bounds ({lo}, {hi}) must satisfy 0 ≤ p_min < p_max ≤ 1"));
            }
        }
        if let Some(pu) = &self.per_user {
            if pu.n_users == 0 {
                return bad("n_users must be positive".into());
            }
            if self.k != 2 || self.d != MRT_FEATURE_DIM {
                return bad(format!("per-user scenarios need K = 2 and d = {MRT_FEATURE_DIM}"));
            }
            if pu.center.dim() != self.d || pu.center.gamma.is_some() != self.family.is_zero_inflated() {
                return bad("population center does not match the family and dimension".into());
            }
        }
        for a in &self.agents {
            if let Contender::Learner(cfg) = &a.contender {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// Clip bounds the agents should apply; `(0, 1)` disables clipping.
    fn agent_clip(&self) -> Option<(f64, f64)> {
        self.clip.filter(|&(lo, hi)| lo > 0.0 || hi < 1.0)
    }

    fn regret_bounds(&self) -> (f64, f64) {
        self.clip.unwrap_or((0.0, 1.0))
    }
}

/// Agents of the synthetic studies: four count-model TS variants and
/// Linear TS on the log outcome, each exploring round-robin for `tau` steps.
pub fn standard_agents(tau: usize, kinds: &[ModelKind], with_linear: bool) -> Vec<NamedAgent> {
    let make = |policy| {
        let mut cfg = AgentConfig::new(policy);
        cfg.exploration = Exploration::FixedTau(tau);
        cfg.exploration_order = ExplorationOrder::RoundRobin;
        cfg
    };
    let mut out: Vec<NamedAgent> = kinds
        .iter()
        .map(|&k| NamedAgent::learner(Policy::Ts(k).label(), make(Policy::Ts(k))))
        .collect();
    if with_linear {
        out.push(NamedAgent::learner(Policy::LinearTs.label(), make(Policy::LinearTs)));
    }
    out
}

/// The eight synthetic settings: Poisson, OP with ω ∈ {25, 1, 0.25}, ZIP,
/// and ZIOP with ω ∈ {25, 1, 0.25}. K = 20, d = 4, T = 1000, τ = 20.
///
/// A `-desk` suffix (e.g. `setting1-desk`) selects the same setting with 50
/// replications instead of 200.
pub fn preset(name: &str) -> Option<Scenario> {
    let (base, replications) = match name.strip_suffix("-desk") {
        Some(base) => (base, 50),
        None => (name, 200),
    };
    let (family, omega) = match base {
        "setting1" => (EnvFamily::Poisson, 1.0),
        "setting2" => (EnvFamily::Op, 25.0),
        "setting3" => (EnvFamily::Op, 1.0),
        "setting4" => (EnvFamily::Op, 0.25),
        "setting5" => (EnvFamily::Zip, 1.0),
        "setting6" => (EnvFamily::Ziop, 25.0),
        "setting7" => (EnvFamily::Ziop, 1.0),
        "setting8" => (EnvFamily::Ziop, 0.25),
        _ => return None,
    };
    let k = 20;
    Some(Scenario {
        name: name.to_string(),
        family,
        omega,
        k,
        d: 4,
        horizon: 1000,
        replications,
        base_seed: 0,
        agents: standard_agents(k, &ModelKind::ALL, true),
        clip: None,
        per_user: None,
    })
}

pub const PRESETS: [&str; 8] = [
    "setting1", "setting2", "setting3", "setting4", "setting5", "setting6", "setting7", "setting8",
];

/// Drink-Less-style per-user simulation: K = 2, T = 200, clipping
/// (0.01, 0.99), ridge λ = 1 at the population truth, no forced exploration.
pub fn mrt_preset(family: EnvFamily, n_users: usize, days: usize) -> Scenario {
    let agents = mrt_agents();
    Scenario {
        name: format!("mrt-{}", family_name(family)),
        family,
        omega: 1.0,
        k: 2,
        d: MRT_FEATURE_DIM,
        horizon: days,
        replications: 1,
        base_seed: 0,
        agents,
        clip: Some((0.01, 0.99)),
        per_user: Some(PerUser {
            n_users,
            heterogeneity: 0.1,
            lambda: 1.0,
            center: reference_center(family),
        }),
    }
}

fn family_name(f: EnvFamily) -> &'static str {
    match f {
        EnvFamily::Poisson => "poisson",
        EnvFamily::Op => "op",
        EnvFamily::Zip => "zip",
        EnvFamily::Ziop => "ziop",
    }
}

/// Diagnostics collected from one agent over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentStats {
    pub fits: usize,
    pub unconverged_fits: usize,
    pub em_violations: usize,
    /// Smallest and largest emitted propensity (`None` for the oracle).
    pub propensity_range: Option<(f64, f64)>,
}

impl AgentStats {
    fn absorb(&mut self, other: &AgentStats) {
        self.fits += other.fits;
        self.unconverged_fits += other.unconverged_fits;
        self.em_violations += other.em_violations;
        self.propensity_range = match (self.propensity_range, other.propensity_range) {
            (Some((a, b)), Some((c, d))) => Some((a.min(c), b.max(d))),
            (x, None) => x,
            (None, y) => y,
        };
    }

    fn observe(&mut self, p: f64) {
        self.propensity_range = Some(match self.propensity_range {
            Some((lo, hi)) => (lo.min(p), hi.max(p)),
            None => (p, p),
        });
    }

    fn collect(&mut self, agent: &AgentState<f64>) {
        self.fits += agent.fits;
        self.unconverged_fits += agent.unconverged_fits;
        self.em_violations += agent.em_violations;
    }
}

/// Regret trace of one agent in one unit (replication, or user within a
/// replication).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRun {
    pub name: String,
    pub trace: RegretTrace<f64>,
    pub stats: AgentStats,
    /// Ordinary regret against the best of the two actions (MRT runs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unclipped: Option<RegretTrace<f64>>,
}

/// Per-agent aggregate across units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub name: String,
    pub mean_cum_regret: Vec<f64>,
    pub se: Vec<f64>,
    /// Final cumulative regret of each unit, in unit order.
    pub finals: Vec<f64>,
    pub stats: AgentStats,
    /// Per-user final regret averaged over replications (MRT runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_user_finals: Option<Vec<f64>>,
}

impl AgentSummary {
    pub fn final_mean(&self) -> f64 {
        self.mean_cum_regret.last().copied().unwrap_or(0.0)
    }

    pub fn final_se(&self) -> f64 {
        self.se.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub base_seed: u64,
    pub scenario: Scenario,
    pub agents: Vec<AgentSummary>,
    /// Wall-clock time; left out of exported files so they stay reproducible.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

/// Equality ignores the wall-clock time.
impl PartialEq for ExperimentResult {
    fn eq(&self, other: &Self) -> bool {
        self.schema_version == other.schema_version
            && self.base_seed == other.base_seed
            && self.scenario == other.scenario
            && self.agents == other.agents
    }
}

impl ExperimentResult {
    pub fn agent(&self, name: &str) -> Option<&AgentSummary> {
        self.agents.iter().find(|a| a.name == name)
    }
}

/// Mean and standard error (`sd / √n`, sample sd) of each column.
pub fn mean_and_se(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let len = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; len];
    let mut se = vec![0.0; len];
    if n == 0 {
        return (mean, se);
    }
    for t in 0..len {
        let m = rows.iter().map(|r| r[t]).sum::<f64>() / n as f64;
        mean[t] = m;
        if n > 1 {
            let var = rows.iter().map(|r| (r[t] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            se[t] = (var / n as f64).sqrt();
        }
    }
    (mean, se)
}

fn summarize(names: &[String], units: &[Vec<AgentRun>]) -> Vec<AgentSummary> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let curves: Vec<&[f64]> = units.iter().map(|u| u[i].trace.cumulative.as_slice()).collect();
            let (mean, se) = mean_and_se(&curves);
            let mut stats = AgentStats::default();
            for u in units {
                stats.absorb(&u[i].stats);
            }
            AgentSummary {
                name: name.clone(),
                mean_cum_regret: mean,
                se,
                finals: units.iter().map(|u| u[i].trace.total()).collect(),
                stats,
                per_user_finals: None,
            }
        })
        .collect()
}

/// Runs `f` over `0..n`, on a dedicated pool of `jobs` threads when
/// `jobs > 1`. Results come back in index order.
fn run_indexed<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

fn learner_state(cfg: &AgentConfig<f64>, d: usize, seed: u64, clip: Option<(f64, f64)>) -> Result<AgentState<f64>> {
    let mut cfg = cfg.clone();
    if cfg.policy != Policy::Static {
        cfg.clip = clip;
    }
    Ok(AgentState::new(cfg, d, seed)?)
}

/// One replication of a synthetic scenario. All agents see the same truth
/// and the same context stream; each draws outcomes from its own stream.
pub fn run_replication(scenario: &Scenario, rep: usize) -> Result<Vec<AgentRun>> {
    scenario.validate()?;
    let seed = replication_seed(scenario.base_seed, rep);
    let mut truth_rng = stream(seed, STREAM_TRUTH);
    let truth = gen_truth(&mut truth_rng, scenario.d, scenario.family.is_zero_inflated());
    let env = EnvSpec {
        family: scenario.family,
        omega: scenario.omega,
        truth,
        k: scenario.k,
        d: scenario.d,
        feature_mode: FeatureMode::FreshGaussian,
    };
    env.validate()?;
    let mut feature_rng = stream(seed, STREAM_FEATURES);
    let contexts: Vec<Vec<FeatureVector<f64>>> = (0..scenario.horizon)
        .map(|_| gen_features(&mut feature_rng, scenario.k, scenario.d))
        .collect();
    let rewards: Vec<Vec<f64>> = contexts
        .iter()
        .map(|fs| {
            fs.iter()
                .map(|phi| expected_reward(&env, phi))
                .collect::<std::result::Result<_, _>>()
        })
        .collect::<std::result::Result<_, _>>()?;

    scenario
        .agents
        .iter()
        .map(|agent| {
            let aseed = agent_seed(seed, &agent.name);
            let mut outcome_rng = stream(aseed, STREAM_OUTCOMES);
            let mut trace = RegretTrace::new();
            let mut stats = AgentStats::default();
            let mut state = match &agent.contender {
                Contender::Learner(cfg) => Some(learner_state(
                    cfg,
                    scenario.d,
                    mix_seed(aseed, STREAM_POLICY),
                    scenario.agent_clip(),
                )?),
                Contender::Oracle => None,
            };
            for (features, h) in contexts.iter().zip(&rewards) {
                let best = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let action = match state.as_mut() {
                    Some(s) => {
                        let d = s.decide(features)?;
                        stats.observe(d.propensity);
                        d.action
                    }
                    None => oracle_action(&env, features)?.0,
                };
                trace.push(best - h[action]);
                if let Some(s) = state.as_mut() {
                    let y = draw_outcome(&env, &features[action], &mut outcome_rng)?;
                    s.update(features[action].clone(), y);
                }
            }
            if let Some(s) = &state {
                stats.collect(s);
            }
            Ok(AgentRun {
                name: agent.name.clone(),
                trace,
                stats,
                unclipped: None,
            })
        })
        .collect()
}

/// All replications of a synthetic scenario, aggregated per agent.
pub fn run_experiment(scenario: &Scenario, jobs: usize) -> Result<ExperimentResult> {
    scenario.validate()?;
    if scenario.per_user.is_some() {
        return run_mrt(scenario, jobs);
    }
    let start = Instant::now();
    let reps = run_indexed(scenario.replications, jobs, |r| run_replication(scenario, r));
    let mut units = Vec::with_capacity(reps.len());
    for (rep, r) in reps.into_iter().enumerate() {
        units.push(r.map_err(|e| HarnessError::Replication {
            rep,
            source: Box::new(e),
        })?);
    }
    let names: Vec<String> = scenario.agents.iter().map(|a| a.name.clone()).collect();
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        base_seed: scenario.base_seed,
        scenario: scenario.clone(),
        agents: summarize(&names, &units),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Clipped-regret traces of every agent for one user.
fn run_user(
    scenario: &Scenario,
    pu: &PerUser,
    center: &ModelParams<f64>,
    seed: u64,
    user: usize,
    scaler: &crate::mrt::CovariateScaler,
    cov: &crate::mrt::UserCovariates,
) -> Result<Vec<AgentRun>> {
    let useed = mix_seed(seed, 1_000_003 + user as u64);
    let mut truth_rng = stream(useed, STREAM_TRUTH);
    let truth = perturb_truth(&mut truth_rng, center, pu.heterogeneity);
    let env = user_env(scenario.family, scenario.omega, truth);
    let id = user_id(user);
    let days: Vec<Vec<FeatureVector<f64>>> = (0..scenario.horizon)
        .map(|day| scaler.action_features(&row_for(&id, cov, day)))
        .collect();
    let (p_min, p_max) = scenario.regret_bounds();
    let agent_clip = scenario.agent_clip();
    let prior = PriorSpec::centered_at(center, pu.lambda);

    scenario
        .agents
        .iter()
        .map(|agent| {
            let aseed = agent_seed(useed, &agent.name);
            let mut outcome_rng = stream(aseed, STREAM_OUTCOMES);
            let mut trace = RegretTrace::new();
            let mut unclipped = RegretTrace::new();
            let mut stats = AgentStats::default();
            let mut state = match &agent.contender {
                Contender::Learner(cfg) => {
                    let mut cfg = cfg.clone();
                    if let Policy::Ts(kind) = cfg.policy {
                        let mut p = prior.clone();
                        if !kind.is_zero_inflated() {
                            p.center_gamma = None;
                        }
                        cfg.prior = Some(p);
                    }
                    Some(learner_state(
                        &cfg,
                        scenario.d,
                        mix_seed(aseed, STREAM_POLICY),
                        agent_clip,
                    )?)
                }
                Contender::Oracle => None,
            };
            for features in &days {
                let h_null = expected_reward(&env, &features[0])?;
                let h_active = expected_reward(&env, &features[1])?;
                let (action, p_tilde) = match state.as_mut() {
                    Some(s) => {
                        let d = s.decide(features)?;
                        stats.observe(d.propensity);
                        // Policies that randomize explicitly are scored by their
                        // intervention probability; TS without clipping is
                        // deterministic given its draw.
                        let randomized = s.config.clip.is_some() || s.config.policy == Policy::Static;
                        let p = match (&d.action_probs, randomized) {
                            (Some(probs), true) => probs[1],
                            _ => (d.action == 1) as u8 as f64,
                        };
                        (d.action, p)
                    }
                    None => {
                        let p = if h_active >= h_null { p_max } else { p_min };
                        (usize::from(h_active >= h_null), p)
                    }
                };
                trace.push(clipped_regret_from_rewards(
                    h_active, h_active, h_null, p_tilde, p_min, p_max,
                ));
                unclipped.push(instant_regret(&env, features, action)?);
                if let Some(s) = state.as_mut() {
                    let y = draw_outcome(&env, &features[action], &mut outcome_rng)?;
                    s.update(features[action].clone(), y);
                }
            }
            if let Some(s) = &state {
                stats.collect(s);
            }
            Ok(AgentRun {
                name: agent.name.clone(),
                trace,
                stats,
                unclipped: Some(unclipped),
            })
        })
        .collect()
}

/// One replication of a per-user scenario: population center, cohort
/// covariates, then every user independently.
pub fn run_mrt_replication(scenario: &Scenario, rep: usize, jobs: usize) -> Result<Vec<Vec<AgentRun>>> {
    let pu = scenario
        .per_user
        .as_ref()
        .ok_or_else(|| HarnessError::InvalidScenario("per_user settings missing".into()))?;
    let seed = replication_seed(scenario.base_seed, rep);
    let center = &pu.center;
    let mut cov_rng = stream(seed, STREAM_COVARIATES);
    let covs: Vec<_> = (0..pu.n_users).map(|_| gen_covariates(&mut cov_rng)).collect();
    let scaler = cohort_scaler(&covs, scenario.horizon);
    run_indexed(pu.n_users, jobs, |u| {
        run_user(scenario, pu, center, seed, u, &scaler, &covs[u])
    })
    .into_iter()
    .collect()
}

/// Per-user simulation with clipped regret; units are (replication, user)
/// pairs pooled for the mean ± SE curves.
pub fn run_mrt(scenario: &Scenario, jobs: usize) -> Result<ExperimentResult> {
    scenario.validate()?;
    let pu = scenario
        .per_user
        .as_ref()
        .ok_or_else(|| HarnessError::InvalidScenario("per_user settings missing".into()))?;
    let start = Instant::now();
    let mut units: Vec<Vec<AgentRun>> = Vec::new();
    for rep in 0..scenario.replications {
        let users = run_mrt_replication(scenario, rep, jobs).map_err(|e| HarnessError::Replication {
            rep,
            source: Box::new(e),
        })?;
        units.extend(users);
    }
    let names: Vec<String> = scenario.agents.iter().map(|a| a.name.clone()).collect();
    let mut agents = summarize(&names, &units);
    let n_users = pu.n_users;
    for a in &mut agents {
        let mut per_user = vec![0.0; n_users];
        for (i, f) in a.finals.iter().enumerate() {
            per_user[i % n_users] += f / scenario.replications as f64;
        }
        a.per_user_finals = Some(per_user);
    }
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        base_seed: scenario.base_seed,
        scenario: scenario.clone(),
        agents,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// One line of the curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub agent: String,
    pub t: usize,
    pub mean_cum_regret: f64,
    pub se: f64,
}

pub fn curve_rows(result: &ExperimentResult) -> Vec<CurveRow> {
    result
        .agents
        .iter()
        .flat_map(|a| {
            a.mean_cum_regret
                .iter()
                .zip(&a.se)
                .enumerate()
                .map(|(t, (&m, &s))| CurveRow {
                    agent: a.name.clone(),
                    t: t + 1,
                    mean_cum_regret: m,
                    se: s,
                })
        })
        .collect()
}

pub fn write_curves_csv<W: Write>(writer: W, result: &ExperimentResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in curve_rows(result) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves_csv<R: Read>(reader: R) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::Format(format!(
            "unexpected header `{}`",
            header.join(",")
        )));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_json<W: Write>(writer: W, result: &ExperimentResult) -> Result<()> {
    serde_json::to_writer_pretty(writer, result)?;
    Ok(())
}

pub fn read_json<R: Read>(reader: R) -> Result<ExperimentResult> {
    let result: ExperimentResult = serde_json::from_reader(reader)?;
    if result.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported schema_version {}",
            result.schema_version
        )));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    /// Picks the format from a file extension (`.json` → JSON, else CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ExportFormat::Json,
            _ => ExportFormat::Csv,
        }
    }
}

pub fn export(result: &ExperimentResult, path: &Path, format: ExportFormat) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ExportFormat::Csv => write_curves_csv(file, result),
        ExportFormat::Json => write_json(file, result),
    }
}

/// Settings of a replay-based off-policy evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayScenario {
    pub agents: Vec<NamedAgent>,
    /// Bootstrap resamples of users; `1` evaluates the log as given.
    pub bootstrap: usize,
    pub base_seed: u64,
    pub clip: Option<(f64, f64)>,
    /// Ridge weight of per-user priors centered at the pooled fit.
    pub lambda: f64,
}

impl ReplayScenario {
    pub fn new(agents: Vec<NamedAgent>) -> Self {
        Self {
            agents,
            bootstrap: 200,
            base_seed: 0,
            clip: Some((0.01, 0.99)),
            lambda: 1.0,
        }
    }
}

/// Agents evaluated on MRT logs: the count-model TS variants, Linear TS and
/// the static 0.6 policy, with no forced exploration.
pub fn mrt_agents() -> Vec<NamedAgent> {
    let mut agents: Vec<NamedAgent> = ModelKind::ALL
        .iter()
        .map(|&k| NamedAgent::learner(Policy::Ts(k).label(), AgentConfig::new(Policy::Ts(k))))
        .collect();
    agents.push(NamedAgent::learner(
        Policy::LinearTs.label(),
        AgentConfig::new(Policy::LinearTs),
    ));
    agents.push(NamedAgent::learner(
        Policy::Static.label(),
        AgentConfig::new(Policy::Static),
    ));
    agents
}

/// Bootstrap summary of one agent's reward improvement over the logging
/// policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub agent: String,
    pub mean_improvement: f64,
    /// 2.5%, 50% and 97.5% bootstrap quantiles; absent for a single pass.
    pub quantiles: Option<[f64; 3]>,
    pub mean_retained_fraction: f64,
    /// User-averaged improvement of each bootstrap sample.
    pub samples: Vec<f64>,
}

pub const REPLAY_CSV_HEADER: &str = "agent,mean_improvement,q025,q50,q975,mean_retained_fraction";

/// Replay tuples of one user in day order.
pub fn user_tuples(user: &UserLog, scaler: &CovariateScaler) -> Vec<ReplayTuple<f64>> {
    user.rows
        .iter()
        .map(|row| ReplayTuple {
            features: scaler.action_features(row),
            logged_action: row.action as usize,
            logged_propensity: if row.action == 1 {
                row.propensity
            } else {
                1.0 - row.propensity
            },
            outcome: row.outcome,
        })
        .collect()
}

/// Ridge-penalized fit of `kind` to every logged decision, used to center
/// the per-user priors.
pub fn pooled_fit(kind: ModelKind, log: &MrtLog, scaler: &CovariateScaler, lambda: f64) -> Result<ModelParams<f64>> {
    let mut data = Dataset::new();
    for row in log.rows() {
        data.push(scaler.features(row, row.action as usize), row.outcome);
    }
    let prior = PriorSpec::centered_at_zero(MRT_FEATURE_DIM, lambda);
    let fitted = fit(kind, &data, Some(&prior), &FitOptions::default(), None).map_err(AgentError::Fit)?;
    Ok(fitted.params)
}

/// Replays one user's log through a fresh agent. Returns the improvement of
/// the agent's SNIPW estimate over the user's mean outcome, and the retained
/// fraction; `None` when nothing usable was retained.
fn replay_user(config: &AgentConfig<f64>, tuples: &[ReplayTuple<f64>], seed: u64) -> Result<Option<(f64, f64)>> {
    let mut agent = AgentState::new(config.clone(), MRT_FEATURE_DIM, seed)?;
    let out = replay(tuples, &mut agent)?;
    let estimate = match snipw(&out.weighted) {
        Ok(v) => v,
        Err(EvalError::EmptyLog | EvalError::ZeroWeight) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let baseline = tuples.iter().map(|t| t.outcome as f64).sum::<f64>() / tuples.len() as f64;
    Ok(Some((
        reward_improvement(estimate, baseline),
        out.retained_count() as f64 / tuples.len() as f64,
    )))
}

/// User-level bootstrap of replay + SNIPW reward improvement.
pub fn run_replay(log: &MrtLog, scenario: &ReplayScenario, jobs: usize) -> Result<Vec<ReplaySummary>> {
    if log.is_empty() {
        return Err(EvalError::EmptyLog.into());
    }
    if scenario.bootstrap == 0 {
        return Err(HarnessError::InvalidScenario("bootstrap must be positive".into()));
    }
    let scaler = CovariateScaler::fit(log.rows()).ok_or(EvalError::EmptyLog)?;
    let tuples: Vec<Vec<ReplayTuple<f64>>> = log.users.iter().map(|u| user_tuples(u, &scaler)).collect();
    let n_users = tuples.len();

    let mut configs = Vec::with_capacity(scenario.agents.len());
    for agent in &scenario.agents {
        let Contender::Learner(cfg) = &agent.contender else {
            return Err(HarnessError::InvalidScenario("replay needs learning agents".into()));
        };
        let mut cfg = cfg.clone();
        if cfg.policy != Policy::Static {
            cfg.clip = scenario.clip.filter(|&(lo, hi)| lo > 0.0 || hi < 1.0);
        }
        if let Policy::Ts(kind) = cfg.policy {
            let center = pooled_fit(kind, log, &scaler, scenario.lambda)?;
            cfg.prior = Some(PriorSpec::centered_at(&center, scenario.lambda));
        }
        cfg.validate()?;
        configs.push(cfg);
    }

    let samples = run_indexed(scenario.bootstrap, jobs, |b| -> Result<Vec<(f64, f64)>> {
        let bseed = mix_seed(scenario.base_seed, b as u64);
        let users: Vec<usize> = if scenario.bootstrap == 1 {
            (0..n_users).collect()
        } else {
            let mut rng = stream(bseed, STREAM_COVARIATES);
            (0..n_users).map(|_| rng.random_range(0..n_users)).collect()
        };
        scenario
            .agents
            .iter()
            .zip(&configs)
            .map(|(agent, cfg)| {
                let aseed = agent_seed(bseed, &agent.name);
                let (mut imp, mut kept, mut n) = (0.0, 0.0, 0usize);
                for (slot, &u) in users.iter().enumerate() {
                    if let Some((i, r)) = replay_user(cfg, &tuples[u], mix_seed(aseed, slot as u64))? {
                        imp += i;
                        kept += r;
                        n += 1;
                    }
                }
                let n = n.max(1) as f64;
                Ok((imp / n, kept / n))
            })
            .collect()
    });
    let mut per_sample = Vec::with_capacity(samples.len());
    for (rep, s) in samples.into_iter().enumerate() {
        per_sample.push(s.map_err(|e| HarnessError::Replication {
            rep,
            source: Box::new(e),
        })?);
    }

    Ok(scenario
        .agents
        .iter()
        .enumerate()
        .map(|(i, agent)| {
            let imps: Vec<f64> = per_sample.iter().map(|s| s[i].0).collect();
            let kept = per_sample.iter().map(|s| s[i].1).sum::<f64>() / per_sample.len() as f64;
            let q = |p| quantile(&imps, p).unwrap_or(f64::NAN);
            ReplaySummary {
                agent: agent.name.clone(),
                mean_improvement: imps.iter().sum::<f64>() / imps.len() as f64,
                quantiles: (imps.len() > 1).then(|| [q(0.025), q(0.5), q(0.975)]),
                mean_retained_fraction: kept,
                samples: imps,
            }
        })
        .collect())
}

pub fn write_replay_csv<W: Write>(writer: W, summaries: &[ReplaySummary]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(REPLAY_CSV_HEADER.split(','))?;
    for s in summaries {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let q = s.quantiles;
        w.write_record([
            s.agent.clone(),
            s.mean_improvement.to_string(),
            cell(q.map(|q| q[0])),
            cell(q.map(|q| q[1])),
            cell(q.map(|q| q[2])),
            s.mean_retained_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se_by_hand() {
        let a = [1.0, 2.0];
        let b = [3.0, 6.0];
        let (m, s) = mean_and_se(&[&a, &b]);
        assert_eq!(m, vec![2.0, 4.0]);
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert!((s[1] - 2.0).abs() < 1e-15);
        let (_, s1) = mean_and_se(&[&a]);
        assert_eq!(s1, vec![0.0, 0.0]);
    }

    #[test]
    fn seeds_are_indexed_and_distinct() {
        assert_eq!(replication_seed(7, 3), replication_seed(7, 3));
        assert_ne!(replication_seed(7, 3), replication_seed(7, 4));
        assert_ne!(replication_seed(7, 3), replication_seed(8, 3));
        assert_ne!(name_hash("ts-poisson"), name_hash("ts-zip"));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn presets_cover_the_eight_settings() {
        for name in PRESETS {
            let s = preset(name).unwrap();
            assert_eq!((s.k, s.d, s.horizon), (20, 4, 1000));
            s.validate().unwrap();
        }
        assert_eq!(preset("setting5").unwrap().family, EnvFamily::Zip);
        assert!(preset("setting9").is_none());
    }
}
