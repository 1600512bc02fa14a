//! Independent oracles for the estimating equations: finite differences for
//! the analytic Jacobians, Monte Carlo moment checks for the scores, and
//! closed-form variances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use streamcausal::engine::pooled_score;
use streamcausal::sim::{Generator, SimConfig, ThetaDraw, TrueParams};
use streamcausal::*;

fn random_obs(rng: &mut ChaCha8Rng, p: usize, outcome: OutcomeType) -> Observation {
    let covs: Vec<f64> = (1..p).map(|_| rng.sample(StandardNormal)).collect();
    let a = u8::from(rng.random_bool(0.5));
    let y = match outcome {
        OutcomeType::Continuous => 2.0 * rng.sample::<f64, _>(StandardNormal),
        OutcomeType::Binary => f64::from(u8::from(rng.random_bool(0.4))),
    };
    Observation::with_intercept(y, a, &covs).unwrap()
}

fn random_theta(rng: &mut ChaCha8Rng, spec: ModelSpec) -> ParameterVector {
    let v = (0..spec.dim())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    ParameterVector::from_vec(spec, v).unwrap()
}

fn max_abs(m: impl IntoIterator<Item = f64>) -> f64 {
    m.into_iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

#[test]
fn sensitivity_matches_central_differences() {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for family in Family::ALL {
        for outcome in [OutcomeType::Continuous, OutcomeType::Binary] {
            let mut checked = 0;
            let mut worst = 0.0f64;
            while checked < 100 {
                let p = rng.random_range(1..=3);
                let spec = ModelSpec::new(family, outcome, p).unwrap();
                let obs = random_obs(&mut rng, p, outcome);
                let theta = random_theta(&mut rng, spec);
                let Ok(analytic) = sensitivity(&obs, &theta) else {
                    continue;
                };
                let d = spec.dim();
                let mut fd = nalgebra::DMatrix::zeros(d, d);
                let mut ok = true;
                for k in 0..d {
                    let mut plus = theta.as_slice().to_vec();
                    let mut minus = plus.clone();
                    plus[k] += h;
                    minus[k] -= h;
                    let up = score(&obs, &ParameterVector::from_vec(spec, plus).unwrap());
                    let dn = score(&obs, &ParameterVector::from_vec(spec, minus).unwrap());
                    match (up, dn) {
                        (Ok(up), Ok(dn)) => fd.set_column(k, &(-(up - dn) / (2.0 * h))),
                        _ => ok = false,
                    }
                }
                if !ok {
                    continue;
                }
                let scale = max_abs(analytic.iter().copied()).max(1.0);
                let err = max_abs((&analytic - &fd).iter().copied()) / scale;
                worst = worst.max(err);
                checked += 1;
            }
            assert!(
                worst <= 1e-5,
                "{family} {outcome}: relative error {worst:.3e}"
            );
        }
    }
}

#[test]
fn batch_bundle_is_sum_of_singletons() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = ModelSpec::new(Family::Aiptw, OutcomeType::Binary, 3).unwrap();
    let obs: Vec<Observation> = (0..50)
        .map(|_| random_obs(&mut rng, 3, OutcomeType::Binary))
        .collect();
    let theta = random_theta(&mut rng, spec);
    let batch = DataBatch::from_observations(1, &obs).unwrap();
    let bundle = batch_bundle(&batch, &theta, &spec).unwrap();
    let mut u = nalgebra::DVector::zeros(spec.dim());
    let mut m = nalgebra::DMatrix::zeros(spec.dim(), spec.dim());
    for o in &obs {
        let s = score(o, &theta).unwrap();
        m += &s * s.transpose();
        u += s;
    }
    assert!(
        max_abs((&bundle.u - &u).iter().copied()) <= 1e-10 * max_abs(u.iter().copied()).max(1.0)
    );
    assert!(max_abs((&bundle.m - &m).iter().copied()) <= 1e-10 * max_abs(m.iter().copied()));
    let eig = bundle.m.clone().symmetric_eigen().eigenvalues;
    assert!(eig.min() >= -1e-10 * bundle.m.trace());
}

struct Population {
    config: SimConfig,
    params: TrueParams,
    batch: DataBatch,
}

fn population(outcome: OutcomeType, n: usize) -> Population {
    let base = if outcome == OutcomeType::Binary {
        SimConfig::binary()
    } else {
        SimConfig::default()
    };
    let config = SimConfig {
        p_covariates: 2,
        n_batches: 1,
        batch_size: n,
        theta_draw: ThetaDraw::Fixed { seed: 11 },
        truth_draws: 400_000,
        ..base
    };
    let params = TrueParams::for_replication(&config, &mut config.rng(0, 1));
    let gen = Generator::new(&config, params.clone()).unwrap();
    let batch = gen.generate_batch(&mut config.rng(0, 0), 1);
    Population {
        config,
        params,
        batch,
    }
}

/// Per-coordinate mean of the scores and its Monte Carlo standard error.
fn score_moments(batch: &DataBatch, theta: &ParameterVector) -> (Vec<f64>, Vec<f64>) {
    let d = theta.as_slice().len();
    let n = batch.len() as f64;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for o in batch.iter() {
        let s = score(&o.to_owned(), theta).unwrap();
        for k in 0..d {
            sum[k] += s[k];
            sq[k] += s[k] * s[k];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = (0..d)
        .map(|k| ((sq[k] / n - mean[k] * mean[k]) / n).sqrt())
        .collect();
    (mean, se)
}

#[test]
fn scores_are_unbiased_at_the_truth() {
    for outcome in [OutcomeType::Continuous, OutcomeType::Binary] {
        let pop = population(outcome, 100_000);
        let truth = Generator::new(&pop.config, pop.params.clone())
            .unwrap()
            .true_ate(&mut pop.config.rng(0, 7));
        for family in Family::ALL {
            let spec = ModelSpec::new(family, outcome, pop.config.p()).unwrap();
            let theta = ParameterVector::pack(
                spec,
                family.has_propensity().then_some(&pop.params.alpha[..]),
                family.has_outcome_model().then_some(&pop.params.beta[..]),
                truth.value,
            )
            .unwrap();
            let (mean, se) = score_moments(&pop.batch, &theta);
            for k in 0..mean.len() {
                // the binary truth is itself a Monte Carlo integral
                let tol = 3.0 * (se[k] * se[k] + truth.mc_se * truth.mc_se).sqrt();
                assert!(
                    mean[k].abs() <= tol,
                    "{family} {outcome} coordinate {k}: {} vs {tol}",
                    mean[k]
                );
            }
        }
    }
}

#[test]
fn aiptw_effect_score_is_doubly_robust() {
    let pop = population(OutcomeType::Continuous, 200_000);
    let p = pop.config.p();
    let delta = pop.params.beta[p];
    let spec = ModelSpec::new(Family::Aiptw, OutcomeType::Continuous, p).unwrap();
    let wrong_alpha = vec![0.3; p];
    let wrong_beta: Vec<f64> = pop.params.beta.iter().map(|b| 0.5 - b).collect();
    let di = spec.delta_index();

    for (alpha, beta) in [
        (&pop.params.alpha, &wrong_beta),
        (&wrong_alpha, &pop.params.beta),
    ] {
        let theta = ParameterVector::pack(spec, Some(alpha), Some(beta), delta).unwrap();
        let (mean, se) = score_moments(&pop.batch, &theta);
        assert!(mean[di].abs() <= 3.0 * se[di], "{} vs {}", mean[di], se[di]);
    }

    // single-model estimators have no such protection
    let gcomp = ModelSpec::new(Family::Gcomp, OutcomeType::Continuous, p).unwrap();
    let theta = ParameterVector::pack(gcomp, None, Some(&wrong_beta), delta).unwrap();
    let (mean, se) = score_moments(&pop.batch, &theta);
    assert!(mean[gcomp.delta_index()].abs() > 10.0 * se[gcomp.delta_index()]);
    let iptw = ModelSpec::new(Family::Iptw, OutcomeType::Continuous, p).unwrap();
    let theta = ParameterVector::pack(iptw, Some(&wrong_alpha), None, delta).unwrap();
    let (mean, se) = score_moments(&pop.batch, &theta);
    assert!(mean[iptw.delta_index()].abs() > 10.0 * se[iptw.delta_index()]);
}

fn nonlinear_study(seed: u64, nonlinear_outcome: bool) -> (DataBatch, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 200_000;
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        let x1: f64 = rng.sample(StandardNormal);
        let (lin, mu0, effect) = if nonlinear_outcome {
            (0.2 + 0.8 * x1, 1.0 + 2.0 * x1 * x1, 0.5 + x1 * x1)
        } else {
            (0.2 + 1.2 * (2.0 * x1).tanh(), 1.0 + x1, 0.5 + x1)
        };
        let a = u8::from(rng.random_bool(expit(lin)));
        let y = mu0 + f64::from(a) * effect + rng.sample::<f64, _>(StandardNormal);
        obs.push(Observation::with_intercept(y, a, &[x1]).unwrap());
    }
    // E[x1^2] = 1
    let truth = if nonlinear_outcome { 1.5 } else { 0.5 };
    (DataBatch::from_observations(1, &obs).unwrap(), truth)
}

#[test]
fn aiptw_estimate_survives_one_misspecified_model() {
    let est = |batch: &DataBatch, family| {
        let spec = ModelSpec::new(family, OutcomeType::Continuous, 2).unwrap();
        solve_offline(&[batch], spec, &SolverOptions::default())
            .unwrap()
            .ate_estimate()
            .unwrap()
    };

    // outcome model misses the x1^2 terms, propensity model is right
    let (batch, truth) = nonlinear_study(21, true);
    let aiptw = est(&batch, Family::Aiptw);
    let gcomp = est(&batch, Family::Gcomp);
    assert!((aiptw.delta - truth).abs() <= 3.0 * aiptw.se, "{aiptw:?}");
    assert!((gcomp.delta - truth).abs() > 5.0 * gcomp.se, "{gcomp:?}");

    // propensity is a saturating function of x1, outcome model is right
    let (batch, truth) = nonlinear_study(22, false);
    let aiptw = est(&batch, Family::Aiptw);
    let iptw = est(&batch, Family::Iptw);
    assert!((aiptw.delta - truth).abs() <= 3.0 * aiptw.se, "{aiptw:?}");
    assert!((iptw.delta - truth).abs() > 5.0 * iptw.se, "{iptw:?}");
}

#[test]
fn intercept_only_gcomp_variance_is_difference_of_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batches: Vec<DataBatch> = (0..3)
        .map(|j| {
            let obs: Vec<Observation> = (0..700)
                .map(|_| {
                    let a = u8::from(rng.random_bool(0.3));
                    let y = if a == 1 {
                        2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        rng.sample(StandardNormal)
                    };
                    Observation::new(y, a, vec![1.0]).unwrap()
                })
                .collect();
            DataBatch::from_observations(j, &obs).unwrap()
        })
        .collect();
    let mut arms = [(0.0, 0.0, 0.0); 2];
    for o in batches.iter().flat_map(|b| b.iter()) {
        let e = &mut arms[usize::from(o.a)];
        e.0 += 1.0;
        e.1 += o.y;
        e.2 += o.y * o.y;
    }
    let var_mean = |(n, s, q): (f64, f64, f64)| (q / n - (s / n).powi(2)) / n;
    let expected = var_mean(arms[1]) + var_mean(arms[0]);
    let diff = arms[1].1 / arms[1].0 - arms[0].1 / arms[0].0;

    let spec = ModelSpec::new(Family::Gcomp, OutcomeType::Continuous, 1).unwrap();
    let fit = solve_offline(&batches, spec, &SolverOptions::default()).unwrap();
    let est = fit.ate_estimate().unwrap();
    assert!((est.delta - diff).abs() < 1e-10);
    assert!(
        (est.se * est.se / expected - 1.0).abs() < 1e-8,
        "{} vs {expected}",
        est.se * est.se
    );
}

fn doubled(batch: &DataBatch) -> DataBatch {
    let mut out = DataBatch::new(batch.index(), batch.p());
    for o in batch.iter().chain(batch.iter()) {
        out.push(o).unwrap();
    }
    out
}

fn rel_diff(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    max_abs((a - b).iter().copied()) / max_abs(b.iter().copied())
}

#[test]
fn duplicating_data_halves_the_variance() {
    let cfg = SimConfig {
        n_batches: 6,
        batch_size: 300,
        theta_draw: ThetaDraw::Fixed { seed: 5 },
        ..SimConfig::default()
    };
    let gen = Generator::new(&cfg, TrueParams::for_replication(&cfg, &mut cfg.rng(0, 1))).unwrap();
    let stream = gen.make_stream(&mut cfg.rng(0, 0));
    let twice: Vec<DataBatch> = stream.iter().map(doubled).collect();
    let opts = SolverOptions::default();
    for family in Family::ALL {
        let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
        let v1 = solve_offline(&stream, spec, &opts).unwrap().variance;
        let v2 = solve_offline(&twice, spec, &opts).unwrap().variance;
        assert!(rel_diff(&(v2 * 2.0), &v1) < 1e-8, "{family} offline");

        let run = |batches: &[DataBatch]| {
            let mut s = init_state(&batches[0], spec, &opts).unwrap();
            for b in &batches[1..] {
                s.update(b, &opts).unwrap();
            }
            s
        };
        let (s1, s2) = (run(&stream), run(&twice));
        let v1 = s1.sandwich_variance().unwrap();
        let v2 = s2.sandwich_variance().unwrap();
        assert!(rel_diff(&(v2 * 2.0), &v1) < 1e-8, "{family} online");
        assert!((s1.theta().delta() - s2.theta().delta()).abs() < 1e-9);
    }
}

#[test]
fn duplicated_batch_doubles_the_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = ModelSpec::new(Family::Iptw, OutcomeType::Continuous, 2).unwrap();
    let obs: Vec<Observation> = (0..40)
        .map(|_| random_obs(&mut rng, 2, OutcomeType::Continuous))
        .collect();
    let batch = DataBatch::from_observations(1, &obs).unwrap();
    let theta = random_theta(&mut rng, spec);
    let one = batch_bundle(&batch, &theta, &spec).unwrap();
    let two = batch_bundle(&doubled(&batch), &theta, &spec).unwrap();
    assert_eq!(two.n, 2 * one.n);
    assert!(
        max_abs((&two.u - &one.u * 2.0).iter().copied()) <= 1e-12 * max_abs(one.u.iter().copied())
    );
    assert!(rel_diff(&two.s, &(&one.s * 2.0)) < 1e-12);
    assert!(rel_diff(&two.m, &(&one.m * 2.0)) < 1e-12);
}

#[test]
fn wald_statistic_ignores_outcome_units() {
    let cfg = SimConfig {
        n_batches: 5,
        batch_size: 200,
        theta_draw: ThetaDraw::Fixed { seed: 2 },
        ..SimConfig::default()
    };
    let gen = Generator::new(&cfg, TrueParams::for_replication(&cfg, &mut cfg.rng(0, 1))).unwrap();
    let stream = gen.make_stream(&mut cfg.rng(0, 0));
    let c = 37.5;
    let scaled: Vec<DataBatch> = stream
        .iter()
        .map(|b| {
            let mut out = DataBatch::new(b.index(), b.p());
            for o in b.iter() {
                out.push(
                    Observation::new(o.y * c, o.a, o.x.to_vec())
                        .unwrap()
                        .as_ref(),
                )
                .unwrap();
            }
            out
        })
        .collect();
    let spec = ModelSpec::new(Family::Gcomp, OutcomeType::Continuous, cfg.p()).unwrap();
    let opts = SolverOptions::default();
    let run = |batches: &[DataBatch]| {
        let mut s = init_state(&batches[0], spec, &opts).unwrap();
        for b in &batches[1..] {
            s.update(b, &opts).unwrap();
        }
        s
    };
    let (s1, s2) = (run(&stream), run(&scaled));
    let (e1, e2) = (s1.ate_estimate().unwrap(), s2.ate_estimate().unwrap());
    assert!((e2.delta / (c * e1.delta) - 1.0).abs() < 1e-9);
    assert!((e2.se / (c * e1.se) - 1.0).abs() < 1e-9);
    let z1 = wald_stat(&s1, 0.1).unwrap();
    let z2 = wald_stat(&s2, 0.1 * c).unwrap();
    assert!((z1 - z2).abs() < 1e-8 * z1.abs().max(1.0), "{z1} {z2}");
}

#[test]
fn offline_solution_zeroes_the_pooled_score() {
    let cfg = SimConfig {
        n_batches: 4,
        batch_size: 250,
        outcome: OutcomeType::Binary,
        coefficient_scale: 0.5,
        theta_draw: ThetaDraw::Fixed { seed: 6 },
        ..SimConfig::default()
    };
    let gen = Generator::new(&cfg, TrueParams::for_replication(&cfg, &mut cfg.rng(0, 1))).unwrap();
    let stream = gen.make_stream(&mut cfg.rng(0, 0));
    for family in Family::ALL {
        let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
        let fit = solve_offline(&stream, spec, &SolverOptions::default()).unwrap();
        let u = pooled_score(&stream, &fit.theta).unwrap();
        assert!(
            max_abs(u.iter().copied()) / (cfg.total_n() as f64) < 1e-7,
            "{family}: {u}"
        );
        let mut reversed = stream.clone();
        reversed.reverse();
        let other = solve_offline(&reversed, spec, &SolverOptions::default()).unwrap();
        assert!((other.theta.delta() - fit.theta.delta()).abs() < 1e-8);
    }
}
