use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ts_count::count_models::{fit as fit_model, Dataset, FeatureVector, FitOptions, ModelKind, ModelParams, PriorSpec};
use ts_count::environments::EnvFamily;
use ts_count::harness::{
    export, mrt_agents, mrt_preset, preset, quantile, run_experiment, run_replay, write_replay_csv, ExperimentResult,
    ExportFormat, NamedAgent, ReplayScenario, PRESETS,
};
use ts_count::mrt::{gen_mrt_dataset, load_mrt_csv, reference_center, save_mrt_csv, CovariateScaler, MrtGenConfig};

use crate::config::{FitOpts, GenMrtOpts, MrtSimOpts, ReplayOpts, SimulateOpts};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_family(name: &str) -> Result<EnvFamily, CliError> {
    name.parse().map_err(usage)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

/// Keeps the named agents, in the order given.
fn select_agents(available: Vec<NamedAgent>, names: Option<&[String]>) -> Result<Vec<NamedAgent>, CliError> {
    let Some(names) = names else {
        return Ok(available);
    };
    names
        .iter()
        .map(|n| {
            available.iter().find(|a| &a.name == n).cloned().ok_or_else(|| {
                let known: Vec<&str> = available.iter().map(|a| a.name.as_str()).collect();
                usage(format!("unknown agent `{n}` (available: {})", known.join(", ")))
            })
        })
        .collect()
}

fn check_bounds(pmin: f64, pmax: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&pmin) || !(0.0..=1.0).contains(&pmax) || pmin >= pmax {
        return Err(usage(format!(
            "need 0 ≤ pmin < pmax ≤ 1, got pmin = {pmin}, pmax = {pmax}"
        )));
    }
    Ok(())
}

fn write_outputs(result: &ExperimentResult, outs: &[PathBuf]) -> Result<(), CliError> {
    for path in outs {
        export(result, path, ExportFormat::from_path(path)).map_err(runtime)?;
    }
    Ok(())
}

fn print_summary(result: &ExperimentResult) {
    for a in &result.agents {
        let mut line = format!(
            "{:<12} final mean cumulative regret {:.4} ± {:.4}",
            a.name,
            a.final_mean(),
            a.final_se()
        );
        if let Some(per_user) = &a.per_user_finals {
            let q = |p| quantile(per_user, p).unwrap_or(f64::NAN);
            line.push_str(&format!(
                "  per-user q25/q50/q75 {:.3}/{:.3}/{:.3}",
                q(0.25),
                q(0.5),
                q(0.75)
            ));
        }
        if let Some((lo, hi)) = a.stats.propensity_range {
            line.push_str(&format!("  propensity [{lo:.3}, {hi:.3}]"));
        }
        println!("{line}");
    }
}

pub fn simulate(o: SimulateOpts) -> Result<(), CliError> {
    let name = o.preset.ok_or_else(|| usage("--preset is required"))?;
    let mut scenario = preset(&name).ok_or_else(|| {
        usage(format!(
            "unknown preset `{name}` (expected one of {})",
            PRESETS.join(", ")
        ))
    })?;
    if let Some(r) = o.reps {
        scenario.replications = r;
    }
    if let Some(s) = o.seed {
        scenario.base_seed = s;
    }
    if let Some(t) = o.horizon {
        scenario.horizon = t;
    }
    scenario.agents = select_agents(scenario.agents, o.agents.as_deref())?;
    scenario.validate().map_err(|e| usage(e.to_string()))?;
    let result = run_experiment(&scenario, o.jobs.unwrap_or_else(default_jobs)).map_err(runtime)?;
    write_outputs(&result, o.out.as_deref().unwrap_or_default())?;
    print_summary(&result);
    Ok(())
}

pub fn mrt_sim(o: MrtSimOpts) -> Result<(), CliError> {
    let family = parse_family(o.family.as_deref().unwrap_or("ziop"))?;
    let mut scenario = mrt_preset(family, o.users.unwrap_or(349), o.days.unwrap_or(200));
    scenario.replications = o.reps.unwrap_or(10);
    scenario.base_seed = o.seed.unwrap_or(0);
    scenario.omega = o.omega.unwrap_or(1.0);
    let (pmin, pmax) = (o.pmin.unwrap_or(0.01), o.pmax.unwrap_or(0.99));
    check_bounds(pmin, pmax)?;
    scenario.clip = Some((pmin, pmax));
    scenario.agents = select_agents(scenario.agents, o.agents.as_deref())?;
    scenario.validate().map_err(|e| usage(e.to_string()))?;
    let result = run_experiment(&scenario, o.jobs.unwrap_or_else(default_jobs)).map_err(runtime)?;
    write_outputs(&result, o.out.as_deref().unwrap_or_default())?;
    print_summary(&result);
    Ok(())
}

pub fn gen_mrt(o: GenMrtOpts) -> Result<(), CliError> {
    let out = o.out.ok_or_else(|| usage("--out is required"))?;
    let family = parse_family(o.family.as_deref().unwrap_or("ziop"))?;
    let config = MrtGenConfig {
        n_users: o.users.unwrap_or(50),
        t_days: o.days.unwrap_or(30),
        family,
        omega: o.omega.unwrap_or(1.0),
        ..MrtGenConfig::default()
    };
    if config.n_users == 0 || config.t_days == 0 || !(config.omega > 0.0) {
        return Err(usage("users, days and omega must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed.unwrap_or(0));
    let data = gen_mrt_dataset(&mut rng, &config, &reference_center(family)).map_err(runtime)?;
    save_mrt_csv(&out, &data.log).map_err(runtime)?;
    println!(
        "wrote {} rows for {} users to {}",
        data.log.len(),
        config.n_users,
        out.display()
    );
    Ok(())
}

pub fn replay(o: ReplayOpts) -> Result<(), CliError> {
    let data = o.data.ok_or_else(|| usage("--data is required"))?;
    require_file(&data)?;
    let (pmin, pmax) = (o.pmin.unwrap_or(0.01), o.pmax.unwrap_or(0.99));
    check_bounds(pmin, pmax)?;
    let bootstrap = o.bootstrap.unwrap_or(200);
    if bootstrap == 0 {
        return Err(usage("--bootstrap must be positive"));
    }
    let ridge = o.ridge.unwrap_or(1.0);
    if !(ridge > 0.0) {
        return Err(usage("--ridge must be positive"));
    }
    let log = load_mrt_csv(&data).map_err(runtime)?;
    for w in &log.warnings {
        eprintln!("warning: {w}");
    }
    let mut scenario = ReplayScenario::new(select_agents(mrt_agents(), o.agents.as_deref())?);
    scenario.bootstrap = bootstrap;
    scenario.base_seed = o.seed.unwrap_or(0);
    scenario.clip = Some((pmin, pmax));
    scenario.lambda = ridge;
    let summaries = run_replay(&log, &scenario, o.jobs.unwrap_or_else(default_jobs)).map_err(runtime)?;
    if let Some(out) = &o.out {
        let file = BufWriter::new(File::create(out).map_err(runtime)?);
        write_replay_csv(file, &summaries).map_err(runtime)?;
    }
    for s in &summaries {
        let mut line = format!(
            "{:<12} reward improvement {:+.4}  retained {:.3}",
            s.agent, s.mean_improvement, s.mean_retained_fraction
        );
        if let Some([lo, mid, hi]) = s.quantiles {
            line.push_str(&format!("  quantiles 2.5/50/97.5% {lo:+.4}/{mid:+.4}/{hi:+.4}"));
        }
        println!("{line}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitReport {
    unit: String,
    model: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<ModelParams<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Reads a CSV whose last column is the count outcome and whose other
/// columns are features.
fn read_feature_csv(path: &Path) -> Result<Dataset<f64>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(runtime)?;
    let width = rdr.headers().map_err(runtime)?.len();
    if width < 2 {
        return Err(runtime(format!(
            "{}: need at least one feature column and an outcome",
            path.display()
        )));
    }
    let mut data = Dataset::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(runtime)?;
        let line = i + 2;
        let bad = |col: usize| {
            runtime(format!(
                "{}: line {line}, column {}: bad value",
                path.display(),
                col + 1
            ))
        };
        let phi = (0..width - 1)
            .map(|c| {
                rec.get(c)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| bad(c))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let y = rec
            .get(width - 1)
            .and_then(|v| v.trim().parse::<u64>().ok())
            .ok_or_else(|| bad(width - 1))?;
        data.push(FeatureVector::new(phi), y);
    }
    Ok(data)
}

fn fit_unit(unit: String, kind: ModelKind, data: &Dataset<f64>, prior: Option<&PriorSpec<f64>>) -> FitReport {
    match fit_model(kind, data, prior, &FitOptions::default(), None) {
        Ok(f) => FitReport {
            unit,
            model: kind,
            converged: Some(f.converged),
            iterations: Some(f.iterations),
            loglik: Some(f.loglik),
            params: Some(f.params),
            error: None,
        },
        Err(e) => FitReport {
            unit,
            model: kind,
            converged: None,
            iterations: None,
            loglik: None,
            params: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn fit(o: FitOpts) -> Result<(), CliError> {
    let data_path = o.data.ok_or_else(|| usage("--data is required"))?;
    require_file(&data_path)?;
    let kind: ModelKind = o.model.as_deref().unwrap_or("poisson").parse().map_err(usage)?;
    let per_user = o.per_user.unwrap_or(false);
    let ridge = o.ridge.unwrap_or(if per_user { 1.0 } else { 0.0 });
    if !(ridge >= 0.0) {
        return Err(usage("--ridge must be nonnegative"));
    }
    let center: Option<ModelParams<f64>> = match &o.center {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path).map_err(runtime)?;
            Some(serde_json::from_str(&text).map_err(|e| usage(format!("center file: {e}")))?)
        }
        None => None,
    };

    let units: Vec<(String, Dataset<f64>)> = if per_user {
        let log = load_mrt_csv(&data_path).map_err(runtime)?;
        let scaler = CovariateScaler::fit(log.rows()).ok_or_else(|| runtime("empty MRT log"))?;
        log.users
            .iter()
            .map(|u| {
                let mut d = Dataset::new();
                for row in &u.rows {
                    d.push(scaler.features(row, row.action as usize), row.outcome);
                }
                (u.user_id.clone(), d)
            })
            .collect()
    } else {
        vec![("all".to_string(), read_feature_csv(&data_path)?)]
    };
    let dim = units
        .iter()
        .find_map(|(_, d)| d.observations.first().map(|o| o.phi.dim()))
        .ok_or_else(|| runtime("no observations"))?;
    let prior = match (&center, ridge > 0.0) {
        (Some(c), _) if c.dim() != dim => {
            return Err(usage(format!("center has dimension {}, data has {dim}", c.dim())));
        }
        (Some(c), true) => {
            let mut p = PriorSpec::centered_at(c, ridge);
            if !kind.is_zero_inflated() {
                p.center_gamma = None;
            }
            Some(p)
        }
        (None, true) => Some(PriorSpec::centered_at_zero(dim, ridge)),
        (_, false) => None,
    };

    let reports: Vec<FitReport> = units
        .into_iter()
        .map(|(unit, data)| fit_unit(unit, kind, &data, prior.as_ref()))
        .collect();
    for r in &reports {
        match (&r.params, &r.error) {
            (Some(p), _) => println!(
                "{} {} converged={} iterations={} loglik={:.6} beta={:?}{}{}",
                r.unit,
                kind,
                r.converged.unwrap_or(false),
                r.iterations.unwrap_or(0),
                r.loglik.unwrap_or(f64::NAN),
                p.beta,
                p.gamma.as_ref().map_or(String::new(), |g| format!(" gamma={g:?}")),
                p.r.map_or(String::new(), |r| format!(" r={r}")),
            ),
            (None, Some(e)) => println!("{} {} failed: {e}", r.unit, kind),
            (None, None) => {}
        }
    }
    if let Some(out) = &o.out {
        let file = BufWriter::new(File::create(out).map_err(runtime)?);
        serde_json::to_writer_pretty(file, &reports).map_err(runtime)?;
    }
    if !per_user && reports.iter().any(|r| r.error.is_some()) {
        return Err(runtime("fit failed"));
    }
    Ok(())
}
