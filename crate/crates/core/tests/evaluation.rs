use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ts_count::agents::{AgentConfig, AgentState, Policy};
use ts_count::count_models::FeatureVector;
use ts_count::environments::*;
use ts_count::evaluation::*;

fn zip_spec(rng: &mut ChaCha8Rng, d: usize, k: usize) -> EnvSpec<f64> {
    EnvSpec {
        family: EnvFamily::Zip,
        omega: 1.0,
        truth: gen_truth(rng, d, true),
        k,
        d,
        feature_mode: FeatureMode::FreshGaussian,
    }
}

fn static_log(n: usize, seed: u64) -> Vec<ReplayTuple<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let features = gen_features(&mut rng, 2, 3);
            let a = usize::from(rng.random::<f64>() < 0.6);
            ReplayTuple {
                features,
                logged_action: a,
                logged_propensity: if a == 1 { 0.6 } else { 0.4 },
                outcome: rng.random_range(0..5),
            }
        })
        .collect()
}

#[test]
fn clipped_regret_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = zip_spec(&mut rng, 3, 3);
    for _ in 0..30 {
        let null = gen_features::<f64, _>(&mut rng, 1, 3).remove(0);
        let active = gen_features(&mut rng, 2, 3);
        let p_tilde: f64 = rng.random_range(0.01..0.99);
        let chosen = rng.random_range(0..2);
        let r = clipped_instant_regret(&s, &null, &active, p_tilde, chosen, 0.01, 0.99).unwrap();
        let h0 = expected_reward(&s, &null).unwrap();
        let hs: Vec<f64> = active.iter().map(|a| expected_reward(&s, a).unwrap()).collect();
        let mut best = f64::NEG_INFINITY;
        for h in &hs {
            for i in 0..=980 {
                let p = 0.01 + i as f64 * 1e-3;
                best = best.max(p * h + (1.0 - p) * h0);
            }
        }
        let expect = best - (p_tilde * hs[chosen] + (1.0 - p_tilde) * h0);
        assert!((r - expect).abs() < 1e-9, "{r} vs {expect}");
        assert!(r >= -1e-12);
    }
}

#[test]
fn snipw_with_equal_propensities_is_the_sample_mean() {
    let ys = [0u64, 3, 1, 7, 2, 0, 4];
    let log: Vec<_> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = 0.1 + 0.1 * i as f64;
            WeightedOutcome {
                target: p,
                logged: p,
                y,
            }
        })
        .collect();
    let mean = ys.iter().sum::<u64>() as f64 / ys.len() as f64;
    assert_eq!(snipw(&log).unwrap(), mean);
}

#[test]
fn static_replay_retains_about_half() {
    let log = static_log(10_000, 4);
    let mut agent = AgentState::new(AgentConfig::new(Policy::Static), 3, 17).unwrap();
    let out = replay(&log, &mut agent).unwrap();
    let frac = out.retained_count() as f64 / log.len() as f64;
    // Match probability 0.6² + 0.4² = 0.52.
    assert!((frac - 0.52).abs() < 0.02, "retained {frac}");
    // Target and logging propensities coincide, so SNIPW is the retained mean.
    let mean = out.weighted.iter().map(|w| w.y as f64).sum::<f64>() / out.weighted.len() as f64;
    assert!((snipw(&out.weighted).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn replay_is_deterministic() {
    let log = static_log(500, 5);
    let run = || {
        let mut agent = AgentState::new(AgentConfig::new(Policy::LinearTs), 3, 3).unwrap();
        replay(&log, &mut agent).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn replay_rejects_bad_tuples() {
    let mut log = static_log(3, 6);
    log[1].logged_propensity = 0.0;
    let mut agent = AgentState::new(AgentConfig::new(Policy::Static), 3, 1).unwrap();
    assert!(matches!(replay(&log, &mut agent), Err(EvalError::InvalidPropensity(_))));
    let mut log = static_log(3, 6);
    log[0].logged_action = 2;
    assert!(matches!(
        replay(&log, &mut agent),
        Err(EvalError::ActionOutOfRange { .. })
    ));
}

#[test]
fn point_mass_prior_gives_frequentist_regret() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = zip_spec(&mut rng, 3, 4);
    let contexts: Vec<Vec<FeatureVector<f64>>> = (0..20).map(|_| gen_features(&mut rng, 4, 3)).collect();
    let run = |spec: &EnvSpec<f64>| -> ts_count::evaluation::Result<RegretTrace<f64>> {
        let mut t = RegretTrace::new();
        for fs in &contexts {
            t.push(instant_regret(spec, fs, 0)?);
        }
        Ok(t)
    };
    let freq = run(&s).unwrap();
    let bayes = bayes_regret(7, |_| s.clone(), |_, spec| run(&spec)).unwrap();
    for (a, b) in freq.cumulative.iter().zip(&bayes.cumulative) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn instant_regret_matches_brute_force(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = zip_spec(&mut rng, 4, k);
        let fs = gen_features(&mut rng, k, 4);
        let hs: Vec<f64> = fs.iter().map(|f| expected_reward(&s, f).unwrap()).collect();
        let best = hs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (a, h) in hs.iter().enumerate() {
            let r = instant_regret(&s, &fs, a).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((r - (best - h)).abs() < 1e-12);
        }
    }

    #[test]
    fn snipw_is_scale_invariant_and_bounded(
        entries in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0u64..50), 1..40),
        c in 0.01f64..100.0,
    ) {
        let log: Vec<_> = entries.iter().map(|&(t, l, y)| WeightedOutcome { target: t, logged: l, y }).collect();
        let scaled: Vec<_> = log.iter().map(|w| WeightedOutcome { target: w.target * c, ..*w }).collect();
        let v = snipw(&log).unwrap();
        prop_assert!((v - snipw(&scaled).unwrap()).abs() < 1e-9 * v.max(1.0));
        let lo = entries.iter().map(|e| e.2).min().unwrap() as f64;
        let hi = entries.iter().map(|e| e.2).max().unwrap() as f64;
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }
}
