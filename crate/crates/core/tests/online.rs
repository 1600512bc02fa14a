use proptest::prelude::*;
use streamcausal::engine::pooled_score;
use streamcausal::persist::StateFile;
use streamcausal::sim::{Generator, SimConfig, ThetaDraw, TrueParams};
use streamcausal::*;

fn stream(cfg: &SimConfig, rep: u64) -> Vec<DataBatch> {
    let gen = Generator::new(cfg, TrueParams::for_replication(cfg, &mut cfg.rng(rep, 1))).unwrap();
    gen.make_stream(&mut cfg.rng(rep, 0))
}

fn run_online(spec: ModelSpec, batches: &[DataBatch], opts: &SolverOptions) -> OnlineState {
    let mut s = init_state(&batches[0], spec, opts).unwrap();
    for b in &batches[1..] {
        s.update(b, opts).unwrap();
    }
    s
}

/// Cuts `obs` at the given sizes; the remainder forms the last batch.
fn partition(obs: &[Observation], cuts: &[usize]) -> Vec<DataBatch> {
    let mut out = Vec::new();
    let mut start = 0;
    for &c in cuts {
        let end = (start + c).min(obs.len());
        if end > start {
            out.push(DataBatch::from_observations(out.len() as u64 + 1, &obs[start..end]).unwrap());
        }
        start = end;
    }
    if start < obs.len() {
        out.push(DataBatch::from_observations(out.len() as u64 + 1, &obs[start..]).unwrap());
    }
    out
}

prop_compose! {
    fn dataset()(p in 1usize..4, seed in any::<u64>(), n in 60usize..400)
        -> (usize, Vec<Observation>) {
        let cfg = SimConfig {
            p_covariates: p - 1,
            n_batches: 1,
            batch_size: n,
            seed,
            ..SimConfig::default()
        };
        let batch = stream(&cfg, 0).remove(0);
        (p, batch.iter().map(|o| o.to_owned()).collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn linear_equations_renew_exactly(
        (p, obs) in dataset(),
        first in 30usize..60,
        cuts in prop::collection::vec(1usize..50, 0..12),
    ) {
        let mut sizes = vec![first];
        sizes.extend(cuts);
        let batches = partition(&obs, &sizes);
        let head = &batches[0];
        prop_assume!(head.treatments().iter().filter(|&&a| a == 1).count() > p);
        prop_assume!(head.treatments().iter().filter(|&&a| a == 0).count() > p);

        let spec = ModelSpec::new(Family::Gcomp, OutcomeType::Continuous, p).unwrap();
        let opts = SolverOptions::default();
        let online = run_online(spec, &batches, &opts);
        let offline = solve_offline(&batches, spec, &opts).unwrap();
        for (a, b) in online.theta().as_slice().iter().zip(offline.theta.as_slice()) {
            prop_assert!((a - b).abs() <= 10.0 * opts.tol, "{} vs {}", a, b);
        }
        prop_assert_eq!(online.n_total(), obs.len() as u64);
        prop_assert_eq!(online.batch_count(), batches.len() as u64);
    }

    #[test]
    fn cumulative_variability_is_symmetric_psd(seed in any::<u64>(), fam in 0usize..3) {
        let cfg = SimConfig { n_batches: 6, batch_size: 80, seed, ..SimConfig::default() };
        let spec = ModelSpec::new(Family::ALL[fam], cfg.outcome, cfg.p()).unwrap();
        let batches = stream(&cfg, 0);
        let Ok(mut s) = init_state(&batches[0], spec, &SolverOptions::default()) else {
            return Ok(());
        };
        for b in &batches[1..] {
            if s.update(b, &SolverOptions::default()).is_err() {
                return Ok(());
            }
        }
        let m = s.m_cum();
        prop_assert_eq!(m, &m.transpose());
        let eig = m.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * m.trace());
    }
}

#[test]
fn small_later_batches_are_accepted() {
    let cfg = SimConfig {
        n_batches: 1,
        batch_size: 200,
        ..SimConfig::default()
    };
    let first = stream(&cfg, 0).remove(0);
    let obs: Vec<Observation> = first.iter().map(|o| o.to_owned()).collect();
    let single = DataBatch::from_observations(2, &obs[..1]).unwrap();
    for family in Family::ALL {
        let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
        let s = init_state(&first, spec, &SolverOptions::default()).unwrap();
        let next = s.renew(&single, &SolverOptions::default()).unwrap();
        assert_eq!(next.n_total(), 201);
        assert_eq!(next.batch_count(), 2);
        // renew leaves the original untouched
        assert_eq!(s.n_total(), 200);
    }
}

#[test]
fn serialized_state_continues_identically() {
    let cfg = SimConfig {
        n_batches: 20,
        batch_size: 150,
        theta_draw: ThetaDraw::Fixed { seed: 3 },
        ..SimConfig::binary()
    };
    let batches = stream(&cfg, 0);
    let opts = SolverOptions::default();
    for family in Family::ALL {
        let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
        let reference = run_online(spec, &batches, &opts);

        let mut text = StateFile::new(run_online(spec, &batches[..10], &opts), None)
            .to_json()
            .unwrap();
        for b in &batches[10..] {
            let mut loaded = StateFile::from_json(&text).unwrap();
            loaded.state.update(b, &opts).unwrap();
            text = loaded.to_json().unwrap();
        }
        let resumed = StateFile::from_json(&text).unwrap().state;
        assert_eq!(resumed, reference, "{family}");
        assert_eq!(
            resumed.ate_estimate().unwrap().se.to_bits(),
            reference.ate_estimate().unwrap().se.to_bits()
        );
    }
}

#[test]
fn pooled_score_at_online_estimate_shrinks() {
    let sizes = [10usize, 100, 1000];
    let reps = 4;
    for family in [Family::Iptw, Family::Aiptw] {
        let mut logs = Vec::new();
        for &b in &sizes {
            let cfg = SimConfig {
                n_batches: b,
                batch_size: 100,
                theta_draw: ThetaDraw::Fixed { seed: 17_182 },
                ..SimConfig::default()
            };
            let spec = ModelSpec::new(family, cfg.outcome, cfg.p()).unwrap();
            let mut acc = 0.0;
            for rep in 0..reps {
                let batches = stream(&cfg, rep);
                let s = run_online(spec, &batches, &SolverOptions::default());
                let u = pooled_score(&batches, s.theta()).unwrap();
                acc += (u.amax() / cfg.total_n() as f64).ln();
            }
            logs.push(acc / reps as f64);
        }
        let xs: Vec<f64> = sizes.iter().map(|b| ((b * 100) as f64).ln()).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / 3.0, logs.iter().sum::<f64>() / 3.0);
        let slope = xs
            .iter()
            .zip(&logs)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        println!("{family}: log mean score {logs:?}, slope {slope:.3}");
        assert!(slope <= -0.4, "{family}: slope {slope}");
    }
}
