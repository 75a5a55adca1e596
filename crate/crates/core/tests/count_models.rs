//! Derivative, EM and estimator checks for the count models.
//!
//! The oracles here (central finite differences, simulated data with known
//! parameters) are independent of the analytic code paths they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use ts_count::count_models::{
    complete_loglik, e_step, fit, information, loglik, penalized_score_norm, score, Dataset, FitOptions, ModelKind,
    ModelParams, Observation, PriorSpec,
};

fn unit_ball(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    v.into_iter().map(|x| x / n).collect()
}

fn random_params(rng: &mut ChaCha8Rng, kind: ModelKind, d: usize) -> ModelParams<f64> {
    ModelParams {
        beta: unit_ball(rng, d).iter().map(|x| 1.5 * x).collect(),
        gamma: kind
            .is_zero_inflated()
            .then(|| unit_ball(rng, d).iter().map(|x| 1.5 * x).collect()),
        r: kind.has_dispersion().then(|| rng.random_range(0.3..6.0)),
    }
}

fn random_instance(rng: &mut ChaCha8Rng, kind: ModelKind) -> (Dataset<f64>, ModelParams<f64>) {
    let d = rng.random_range(1..=4);
    let n = rng.random_range(1..=20);
    let obs = (0..n)
        .map(|_| {
            let phi = unit_ball(rng, d);
            let y = if rng.random::<f64>() < 0.35 {
                0
            } else {
                Poisson::new(1.8).unwrap().sample(rng) as u64
            };
            Observation::new(phi, y)
        })
        .collect();
    (Dataset::from_observations(obs), random_params(rng, kind, d))
}

fn with_beta(p: &ModelParams<f64>, j: usize, delta: f64) -> ModelParams<f64> {
    let mut q = p.clone();
    q.beta[j] += delta;
    q
}

fn with_gamma(p: &ModelParams<f64>, j: usize, delta: f64) -> ModelParams<f64> {
    let mut q = p.clone();
    q.gamma.as_mut().unwrap()[j] += delta;
    q
}

fn close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    if analytic.abs() > 1e-3 {
        (analytic - numeric).abs() <= rel * analytic.abs()
    } else {
        (analytic - numeric).abs() < abs_floor
    }
}

const H: f64 = 1e-6;

#[test]
fn score_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in ModelKind::ALL {
        for inst in 0..100 {
            let (data, p) = random_instance(&mut rng, kind);
            let s = score(kind, &data, &p).unwrap();
            for j in 0..p.dim() {
                let fd = (loglik(kind, &data, &with_beta(&p, j, H)).unwrap()
                    - loglik(kind, &data, &with_beta(&p, j, -H)).unwrap())
                    / (2.0 * H);
                assert!(
                    close(s.beta[j], fd, 1e-5, 1e-7),
                    "{kind} #{inst} beta[{j}]: {} vs {fd}",
                    s.beta[j]
                );
                if let Some(sg) = &s.gamma {
                    let fd = (loglik(kind, &data, &with_gamma(&p, j, H)).unwrap()
                        - loglik(kind, &data, &with_gamma(&p, j, -H)).unwrap())
                        / (2.0 * H);
                    assert!(
                        close(sg[j], fd, 1e-5, 1e-7),
                        "{kind} #{inst} gamma[{j}]: {} vs {fd}",
                        sg[j]
                    );
                }
            }
        }
    }
}

#[test]
fn information_matches_negative_score_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in ModelKind::ALL {
        for inst in 0..100 {
            let (data, p) = random_instance(&mut rng, kind);
            let info = information(kind, &data, &p).unwrap();
            let d = p.dim();
            assert!(info.beta.max_asymmetry() < 1e-10);
            for j in 0..d {
                let up = score(kind, &data, &with_beta(&p, j, H)).unwrap();
                let dn = score(kind, &data, &with_beta(&p, j, -H)).unwrap();
                for i in 0..d {
                    let fd = -(up.beta[i] - dn.beta[i]) / (2.0 * H);
                    let a = info.beta.get(i, j);
                    assert!(close(a, fd, 1e-4, 1e-6), "{kind} #{inst} Ib[{i},{j}]: {a} vs {fd}");
                }
                if let Some(ig) = &info.gamma {
                    let up = score(kind, &data, &with_gamma(&p, j, H)).unwrap();
                    let dn = score(kind, &data, &with_gamma(&p, j, -H)).unwrap();
                    for i in 0..d {
                        let fd = -(up.gamma.as_ref().unwrap()[i] - dn.gamma.as_ref().unwrap()[i]) / (2.0 * H);
                        let a = ig.get(i, j);
                        assert!(close(a, fd, 1e-4, 1e-6), "{kind} #{inst} Ig[{i},{j}]: {a} vs {fd}");
                    }
                }
            }
        }
    }
}

#[test]
fn e_step_range_and_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kind in [ModelKind::ZeroInflatedPoisson, ModelKind::ZeroInflatedNegBinomial] {
        for _ in 0..50 {
            let (data, p) = random_instance(&mut rng, kind);
            let z = e_step(kind, &data, &p).unwrap();
            for (zi, o) in z.iter().zip(data.iter()) {
                assert!((0.0..=1.0).contains(zi));
                assert_eq!(*zi == 0.0, o.y > 0, "z={zi} y={}", o.y);
            }
        }
    }
}

#[test]
fn complete_loglik_is_affine_in_each_responsibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for kind in [ModelKind::ZeroInflatedPoisson, ModelKind::ZeroInflatedNegBinomial] {
        for _ in 0..30 {
            let (data, p) = random_instance(&mut rng, kind);
            let n = data.len();
            let base: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let i = rng.random_range(0..n);
            let at = |v: f64| {
                let mut z = base.clone();
                z[i] = v;
                complete_loglik(kind, &data, &z, &p).unwrap()
            };
            let (f0, f5, f1) = (at(0.0), at(0.5), at(1.0));
            assert!((f5 - 0.5 * (f0 + f1)).abs() < 1e-10);
        }
    }
}

#[test]
fn nb_approaches_poisson_for_large_r() {
    // Per observation means averaged over a Poisson sample: at r = 1e3 the
    // pointwise gap is ((y − μ)² − y)/(2r) to leading order, which is large
    // only in the far tail.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let mu: f64 = rng.random_range(0.05..5.0);
        let n = 200;
        let obs = (0..n)
            .map(|_| Observation::new(vec![1.0], Poisson::new(mu).unwrap().sample(&mut rng) as u64))
            .collect();
        let data = Dataset::from_observations(obs);
        let pois = loglik(ModelKind::Poisson, &data, &ModelParams::poisson(vec![mu.ln()])).unwrap();
        let nb = loglik(
            ModelKind::NegBinomial,
            &data,
            &ModelParams {
                beta: vec![mu.ln()],
                gamma: None,
                r: Some(1e3),
            },
        )
        .unwrap();
        assert!((pois - nb).abs() / (n as f64) < 1e-2, "mu={mu}: {pois} vs {nb}");
    }
    // Typical counts agree pointwise.
    for y in 1..=9u64 {
        let data = Dataset::from_observations(vec![Observation::new(vec![1.0], y)]);
        let mu: f64 = 5.0;
        let pois = loglik(ModelKind::Poisson, &data, &ModelParams::poisson(vec![mu.ln()])).unwrap();
        let nb = loglik(
            ModelKind::NegBinomial,
            &data,
            &ModelParams {
                beta: vec![mu.ln()],
                gamma: None,
                r: Some(1e3),
            },
        )
        .unwrap();
        assert!((pois - nb).abs() < 1e-2, "y={y}");
    }
}

/// Draws `n` observations from `kind` at `truth` using the textbook
/// mixture constructions (gamma–Poisson for NB, Bernoulli gate for ZI).
fn simulate(rng: &mut ChaCha8Rng, _kind: ModelKind, truth: &ModelParams<f64>, n: usize) -> Dataset<f64> {
    let d = truth.dim();
    let obs = (0..n)
        .map(|_| {
            let phi = unit_ball(rng, d);
            let mu = phi.iter().zip(&truth.beta).map(|(a, b)| a * b).sum::<f64>().exp();
            let rate = match truth.r {
                Some(r) => Gamma::new(r, mu / r).unwrap().sample(rng),
                None => mu,
            };
            let mut y = if rate > 0.0 {
                Poisson::new(rate).unwrap().sample(rng) as u64
            } else {
                0
            };
            if let Some(g) = &truth.gamma {
                let eta: f64 = phi.iter().zip(g).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-eta).exp());
                if rng.random::<f64>() < p {
                    y = 0;
                }
            }
            Observation::new(phi, y)
        })
        .collect();
    Dataset::from_observations(obs)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn poisson_fit_recovers_truth_and_is_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let truth = ModelParams::poisson(unit_ball(&mut rng, 4));
    let data = simulate(&mut rng, ModelKind::Poisson, &truth, 5000);
    let opts = FitOptions::default();
    let f = fit(ModelKind::Poisson, &data, None, &opts, None).unwrap();
    assert!(f.converged);
    assert!(dist(&f.params.beta, &truth.beta) < 0.1);
    assert!(penalized_score_norm(ModelKind::Poisson, &data, None, &f.params).unwrap() < opts.grad_tol);
    assert!(f.info_beta.max_asymmetry() < 1e-10);
    assert!(f.info_beta.min_eigenvalue() > 0.0);
}

#[test]
fn every_kind_converges_on_a_single_penalized_observation() {
    let data = Dataset::<f64>::from_observations(vec![Observation::new(vec![0.6, -0.3, 0.2], 4)]);
    let prior = PriorSpec::centered_at_zero(3, 1.0);
    for kind in ModelKind::ALL {
        let f = fit(kind, &data, Some(&prior), &FitOptions::default(), None).unwrap();
        assert!(f.converged, "{kind}");
        assert!(f.params.beta.iter().all(|b| b.is_finite()));
        let s = penalized_score_norm(kind, &data, Some(&prior), &f.params).unwrap();
        assert!(s < 1e-8, "{kind}: {s}");
    }
}

#[test]
fn zero_inflated_fit_on_all_positive_counts_converges_with_ridge() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let obs = (0..300)
        .map(|_| {
            Observation::new(
                unit_ball(&mut rng, 3),
                1 + Poisson::new(2.0).unwrap().sample(&mut rng) as u64,
            )
        })
        .collect();
    let data = Dataset::from_observations(obs);
    let prior = PriorSpec::centered_at_zero(3, 1.0);
    for kind in [ModelKind::ZeroInflatedPoisson, ModelKind::ZeroInflatedNegBinomial] {
        let f = fit(kind, &data, Some(&prior), &FitOptions::default(), None).unwrap();
        assert!(f.converged, "{kind}");
        assert_eq!(f.ascent_violations, 0);
        let g = f.params.gamma.as_ref().unwrap();
        // Penalized boundary: the zero-state logit moves toward −∞ but stays finite.
        assert!(g.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn empty_data_without_ridge_is_rejected() {
    let data = Dataset::<f64>::new();
    assert!(fit(ModelKind::Poisson, &data, None, &FitOptions::default(), None).is_err());
    let prior = PriorSpec::centered_at_zero(2, 1.0);
    let f = fit(ModelKind::Poisson, &data, Some(&prior), &FitOptions::default(), None).unwrap();
    assert_eq!(f.params.beta, vec![0.0, 0.0]);
}

#[test]
fn em_ascent_holds_on_simulated_zero_inflated_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for kind in [ModelKind::ZeroInflatedPoisson, ModelKind::ZeroInflatedNegBinomial] {
        for rep in 0..5 {
            let mut truth = ModelParams::zeros(kind, 4);
            truth.beta = unit_ball(&mut rng, 4);
            truth.gamma = Some(unit_ball(&mut rng, 4));
            if kind.has_dispersion() {
                truth.r = Some(2.0);
            }
            let data = simulate(&mut rng, kind, &truth, 400);
            let f = fit(kind, &data, None, &FitOptions::default(), None).unwrap();
            assert_eq!(f.ascent_violations, 0, "{kind} rep {rep}");
            for w in f.objective_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            if f.converged {
                assert!(penalized_score_norm(kind, &data, None, &f.params).unwrap() < 1e-8);
            }
        }
    }
}

#[test]
fn nb_fit_estimates_dispersion() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let truth = ModelParams {
        beta: unit_ball(&mut rng, 3),
        gamma: None,
        r: Some(2.0),
    };
    let data = simulate(&mut rng, ModelKind::NegBinomial, &truth, 5000);
    let f = fit(ModelKind::NegBinomial, &data, None, &FitOptions::default(), None).unwrap();
    assert!(f.converged);
    assert!(dist(&f.params.beta, &truth.beta) < 0.1);
    let r = f.params.r.unwrap();
    assert!((r - 2.0).abs() < 0.5, "r = {r}");
}

#[test]
fn f32_fit_tracks_f64_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let truth = ModelParams::poisson(unit_ball(&mut rng, 3));
    let data = simulate(&mut rng, ModelKind::Poisson, &truth, 500);
    let data32 = Dataset::from_observations(
        data.iter()
            .map(|o| Observation::new(o.phi.iter().map(|&v| v as f32).collect::<Vec<_>>(), o.y))
            .collect(),
    );
    let f64fit = fit(ModelKind::Poisson, &data, None, &FitOptions::default(), None).unwrap();
    let opts32 = FitOptions {
        grad_tol: 1e-3_f32,
        ..FitOptions::default()
    };
    let f32fit = fit(ModelKind::Poisson, &data32, None, &opts32, None).unwrap();
    for (a, b) in f64fit.params.beta.iter().zip(&f32fit.params.beta) {
        assert!((a - *b as f64).abs() < 1e-3);
    }
}
