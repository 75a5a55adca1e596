use ts_count::agents::{AgentConfig, Policy};
use ts_count::environments::EnvFamily;
use ts_count::harness::*;
use ts_count::ModelKind;

fn small(family: EnvFamily) -> Scenario {
    let mut s = preset("setting1").unwrap();
    s.family = family;
    s.k = 5;
    s.horizon = 60;
    s.replications = 3;
    s.base_seed = 11;
    s.agents = standard_agents(5, &[ModelKind::Poisson], true);
    s
}

fn small_mrt(n_users: usize, clip: Option<(f64, f64)>) -> Scenario {
    let mut s = mrt_preset(EnvFamily::Op, n_users, 40);
    s.agents = vec![
        NamedAgent::learner("ts-poisson", AgentConfig::new(Policy::Ts(ModelKind::Poisson))),
        NamedAgent::learner("static", AgentConfig::new(Policy::Static)),
    ];
    s.clip = clip;
    s.base_seed = 5;
    s
}

#[test]
fn replications_are_bit_identical() {
    let s = small(EnvFamily::Poisson);
    assert_eq!(run_replication(&s, 1).unwrap(), run_replication(&s, 1).unwrap());
}

#[test]
fn oracle_has_zero_regret() {
    let mut s = small(EnvFamily::Zip);
    s.agents.push(NamedAgent::oracle());
    let runs = run_replication(&s, 0).unwrap();
    let oracle = runs.iter().find(|r| r.name == "oracle").unwrap();
    assert!(oracle.trace.instant.iter().all(|&r| r == 0.0));
}

#[test]
fn replication_index_changes_the_draw() {
    let s = small(EnvFamily::Poisson);
    let a = run_replication(&s, 0).unwrap();
    let b = run_replication(&s, 1).unwrap();
    assert_ne!(a[0].trace, b[0].trace);
}

#[test]
fn single_replication_has_zero_se() {
    let mut s = small(EnvFamily::Poisson);
    s.replications = 1;
    let r = run_experiment(&s, 1).unwrap();
    for a in &r.agents {
        assert!(a.se.iter().all(|&x| x == 0.0));
        assert_eq!(a.mean_cum_regret.len(), s.horizon);
    }
}

#[test]
fn mean_curve_is_pointwise_average() {
    let s = small(EnvFamily::Poisson);
    let r = run_experiment(&s, 1).unwrap();
    let runs: Vec<_> = (0..s.replications).map(|i| run_replication(&s, i).unwrap()).collect();
    for (i, a) in r.agents.iter().enumerate() {
        for t in 0..s.horizon {
            let avg = runs.iter().map(|u| u[i].trace.cumulative[t]).sum::<f64>() / s.replications as f64;
            assert!((a.mean_cum_regret[t] - avg).abs() < 1e-12);
        }
    }
}

#[test]
fn more_replications_reuse_the_first_ones() {
    let s = small(EnvFamily::Poisson);
    let mut s2 = s.clone();
    s2.replications = 2 * s.replications;
    let a = run_experiment(&s, 1).unwrap();
    let b = run_experiment(&s2, 1).unwrap();
    for (x, y) in a.agents.iter().zip(&b.agents) {
        assert_eq!(x.finals[..], y.finals[..s.replications]);
    }
}

#[test]
fn parallel_matches_serial() {
    let s = small(EnvFamily::Poisson);
    assert_eq!(run_experiment(&s, 1).unwrap(), run_experiment(&s, 3).unwrap());
}

#[test]
fn curves_are_monotone_and_match_finals() {
    let s = small(EnvFamily::Op);
    for rep in 0..s.replications {
        for run in run_replication(&s, rep).unwrap() {
            assert!(run.trace.cumulative.windows(2).all(|w| w[1] >= w[0]));
        }
    }
    let r = run_experiment(&s, 1).unwrap();
    for a in &r.agents {
        let n = a.finals.len() as f64;
        let m = a.finals.iter().sum::<f64>() / n;
        let sd = (a.finals.iter().map(|f| (f - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((m - a.final_mean()).abs() < 1e-10);
        assert!((sd / n.sqrt() - a.final_se()).abs() < 1e-10);
    }
}

#[test]
fn invalid_scenarios_are_rejected() {
    let mut s = small(EnvFamily::Poisson);
    s.horizon = 0;
    assert!(run_experiment(&s, 1).is_err());
    let mut s = small(EnvFamily::Poisson);
    s.agents.push(s.agents[0].clone());
    assert!(s.validate().is_err());
    let mut s = small_mrt(2, Some((0.5, 0.5)));
    assert!(s.validate().is_err());
    s.clip = Some((0.01, 0.99));
    s.k = 3;
    assert!(s.validate().is_err());
}

#[test]
fn csv_and_json_round_trip() {
    let r = run_experiment(&small(EnvFamily::Poisson), 1).unwrap();
    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &r).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(read_curves_csv(buf.as_slice()).unwrap(), curve_rows(&r));

    let mut js = Vec::new();
    write_json(&mut js, &r).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&js).unwrap();
    assert_eq!(v["base_seed"], 11);
    assert_eq!(v["schema_version"], 1);
    let back = read_json(js.as_slice()).unwrap();
    assert_eq!(back.agents, r.agents);
    assert_eq!(back.scenario, r.scenario);
}

#[test]
fn export_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&small(EnvFamily::Poisson), 1).unwrap();
    let csv_path = dir.path().join("r.csv");
    let json_path = dir.path().join("r.json");
    export(&r, &csv_path, ExportFormat::from_path(&csv_path)).unwrap();
    export(&r, &json_path, ExportFormat::from_path(&json_path)).unwrap();
    assert!(std::fs::read_to_string(&csv_path).unwrap().starts_with(CSV_HEADER));
    assert!(read_json(std::fs::File::open(&json_path).unwrap()).is_ok());
}

#[test]
fn mrt_propensities_respect_clipping() {
    let r = run_mrt(&small_mrt(4, Some((0.01, 0.99))), 1).unwrap();
    for a in &r.agents {
        let (lo, hi) = a.stats.propensity_range.unwrap();
        assert!(lo >= 0.01 && hi <= 0.99, "{}: [{lo}, {hi}]", a.name);
        assert_eq!(a.per_user_finals.as_ref().unwrap().len(), 4);
    }
}

#[test]
fn unit_bounds_make_clipped_regret_ordinary() {
    let s = small_mrt(3, Some((0.0, 1.0)));
    for users in run_mrt_replication(&s, 0, 1).unwrap() {
        for run in users {
            if run.name == "static" {
                continue;
            }
            let plain = run.unclipped.unwrap();
            for (a, b) in run.trace.instant.iter().zip(&plain.instant) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn static_clipped_regret_grows_linearly() {
    let mut s = small_mrt(30, Some((0.01, 0.99)));
    s.horizon = 150;
    s.agents.retain(|a| a.name == "static");
    // Without days-since-download effects the per-step gap is stationary.
    let pu = s.per_user.as_mut().unwrap();
    for i in [4, 6] {
        pu.center.beta[i] = 0.0;
    }
    let r = run_mrt(&s, 1).unwrap();
    let curve = &r.agents[0].mean_cum_regret;
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .skip(50)
        .map(|(t, &y)| ((t + 1) as f64, y))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    assert!(r2 > 0.99, "R² = {r2}");
}

#[test]
fn mrt_is_deterministic() {
    let s = small_mrt(3, Some((0.01, 0.99)));
    assert_eq!(run_mrt(&s, 1).unwrap(), run_mrt(&s, 2).unwrap());
}

fn synthetic_log(n_users: usize, seed: u64) -> ts_count::mrt::MrtLog {
    use rand::SeedableRng;
    use ts_count::mrt::{gen_mrt_dataset, reference_center, MrtGenConfig};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = MrtGenConfig {
        n_users,
        ..MrtGenConfig::default()
    };
    gen_mrt_dataset(&mut rng, &cfg, &reference_center(cfg.family))
        .unwrap()
        .log
}

fn static_only() -> Vec<NamedAgent> {
    vec![NamedAgent::learner("static", AgentConfig::new(Policy::Static))]
}

#[test]
fn static_replay_improvement_is_consistent_with_zero() {
    let log = synthetic_log(40, 1);
    let mut s = ReplayScenario::new(static_only());
    s.bootstrap = 100;
    let out = run_replay(&log, &s, 2).unwrap();
    let [lo, _, hi] = out[0].quantiles.unwrap();
    assert!(lo <= 0.0 && 0.0 <= hi, "CI [{lo}, {hi}]");
    assert!((out[0].mean_retained_fraction - 0.52).abs() < 0.05);
}

#[test]
fn single_pass_replay_has_no_quantiles() {
    let log = synthetic_log(5, 2);
    let mut s = ReplayScenario::new(static_only());
    s.bootstrap = 1;
    let out = run_replay(&log, &s, 1).unwrap();
    assert!(out[0].quantiles.is_none());
    assert_eq!(out[0].samples.len(), 1);
}

#[test]
fn replay_is_reproducible_and_exports() {
    let log = synthetic_log(6, 3);
    let mut agents = static_only();
    agents.push(NamedAgent::learner(
        "ts-poisson",
        AgentConfig::new(Policy::Ts(ModelKind::Poisson)),
    ));
    let mut s = ReplayScenario::new(agents);
    s.bootstrap = 4;
    let a = run_replay(&log, &s, 1).unwrap();
    assert_eq!(a, run_replay(&log, &s, 3).unwrap());
    let mut buf = Vec::new();
    write_replay_csv(&mut buf, &a).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), REPLAY_CSV_HEADER);
    assert_eq!(text.lines().count(), 3);
}
