//! Replicated simulation runs and their summary metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{init_state, solve_offline, AteEstimate, OnlineState, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{DataBatch, Family, ModelSpec};
use crate::sequential::{Decision, MonitorConfig, MonitorState};
use crate::sim::dgp::{Generator, SimConfig, TrueParams};

/// Normal quantile used for the coverage check.
const Z975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Online,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        }
    }
}

/// One estimator run inside one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub family: Family,
    pub mode: Mode,
    /// `None` when the solver failed; the message is kept in `error`.
    pub estimate: Option<AteEstimate>,
    pub error: Option<String>,
    /// Seconds spent assembling the estimator's input plus solving.
    pub total_time: f64,
    /// Seconds spent solving only.
    pub run_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub true_ate: f64,
    pub estimates: Vec<EstimateRecord>,
}

impl ReplicationRecord {
    pub fn get(&self, family: Family, mode: Mode) -> Option<&EstimateRecord> {
        self.estimates
            .iter()
            .find(|r| r.family == family && r.mode == mode)
    }
}

/// One point of an estimate trajectory (long format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub family: Family,
    pub mode: Mode,
    pub batch: u64,
    pub n_total: u64,
    pub estimate: f64,
    pub se: f64,
}

/// Metrics (a)-(g) for one family and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub family: Family,
    pub mode: Mode,
    pub n_batches: usize,
    pub batch_size: usize,
    pub n_total: usize,
    pub replications: usize,
    pub failures: usize,
    pub bias: f64,
    /// Mean bias over the mean true effect.
    pub relative_bias: f64,
    pub mean_abs_bias: f64,
    /// Average reported standard error.
    pub ase: f64,
    /// Standard deviation of the estimation errors.
    pub ese: f64,
    pub coverage: f64,
    pub total_time: f64,
    pub run_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub config: SimConfig,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, family: Family, mode: Mode) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.family == family && r.mode == mode)
    }

    /// Same table with timing columns zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> MetricsTable {
        let mut t = self.clone();
        for r in &mut t.rows {
            r.total_time = 0.0;
            r.run_time = 0.0;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub table: MetricsTable,
    pub replications: Vec<ReplicationRecord>,
    /// Trajectory of the first replication.
    pub trajectory: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOptions {
    pub families: Vec<Family>,
    pub offline: bool,
    pub solver: SolverOptions,
    pub record_trajectory: bool,
    /// Run replications on the rayon pool. When false everything, including
    /// the reductions inside pooled fits, runs on a single thread.
    pub parallel: bool,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            families: Family::ALL.to_vec(),
            offline: true,
            solver: SolverOptions::default(),
            record_trajectory: false,
            parallel: true,
        }
    }
}

fn run_online(
    spec: ModelSpec,
    stream: &[DataBatch],
    opts: &SolverOptions,
    mut on_batch: impl FnMut(&OnlineState) -> Result<()>,
) -> (Result<OnlineState>, f64, f64) {
    let mut total = 0.0;
    let mut run = 0.0;
    let mut state: Option<OnlineState> = None;
    for batch in stream {
        // each batch is "loaded" once when it arrives
        let t0 = Instant::now();
        let arrived = batch.clone();
        let t1 = Instant::now();
        let next = match state.take() {
            None => init_state(&arrived, spec, opts),
            Some(mut s) => s.update(&arrived, opts).map(|_| s),
        };
        let t2 = Instant::now();
        total += (t2 - t0).as_secs_f64();
        run += (t2 - t1).as_secs_f64();
        match next.and_then(|s| on_batch(&s).map(|_| s)) {
            Ok(s) => state = Some(s),
            Err(e) => return (Err(e), total, run),
        }
    }
    (
        state.ok_or_else(|| Error::InvalidObservation("empty stream".into())),
        total,
        run,
    )
}

fn pool(stream: &[DataBatch]) -> DataBatch {
    let p = stream[0].p();
    let n = stream.iter().map(DataBatch::len).sum();
    let mut pooled = DataBatch::with_capacity(1, p, n);
    for b in stream {
        for o in b.iter() {
            pooled.push_unchecked(o.y, o.a, o.x);
        }
    }
    pooled
}

fn run_offline(
    spec: ModelSpec,
    stream: &[DataBatch],
    opts: &SolverOptions,
) -> (Result<AteEstimate>, f64, f64) {
    let t0 = Instant::now();
    let pooled = pool(stream);
    let t1 = Instant::now();
    let fit =
        solve_offline(std::slice::from_ref(&pooled), spec, opts).and_then(|f| f.ate_estimate());
    let t2 = Instant::now();
    (fit, (t2 - t0).as_secs_f64(), (t2 - t1).as_secs_f64())
}

/// Batch counts at which the offline trajectory is refitted; each refit
/// revisits all earlier data, so at most this many are used.
const OFFLINE_CHECKPOINTS: usize = 100;

fn offline_checkpoints(b: usize) -> Vec<usize> {
    let step = b.div_ceil(OFFLINE_CHECKPOINTS).max(1);
    let mut ks: Vec<usize> = (1..=b).filter(|k| k % step == 0 || *k == 1).collect();
    if ks.last() != Some(&b) {
        ks.push(b);
    }
    ks
}

fn record(
    family: Family,
    mode: Mode,
    res: Result<AteEstimate>,
    total: f64,
    run: f64,
) -> EstimateRecord {
    let (estimate, error) = match res {
        Ok(e) => (Some(e), None),
        Err(e) => (None, Some(e.to_string())),
    };
    EstimateRecord {
        family,
        mode,
        estimate,
        error,
        total_time: total,
        run_time: run,
    }
}

fn replicate(
    config: &SimConfig,
    options: &ScenarioOptions,
    rep: usize,
    trajectory: Option<&mut Vec<TrajectoryPoint>>,
) -> Result<ReplicationRecord> {
    let mut rng = config.rng(rep as u64, 0);
    let params = TrueParams::for_replication(config, &mut rng);
    let gen = Generator::new(config, params)?;
    let truth = gen.true_ate(&mut config.rng(rep as u64, 1));
    let stream = gen.make_stream(&mut rng);
    let mut estimates = Vec::with_capacity(2 * options.families.len());
    let mut traj = trajectory;
    for &family in &options.families {
        let spec = ModelSpec::new(family, config.outcome, config.p())?;
        if options.offline {
            let (res, total, run) = run_offline(spec, &stream, &options.solver);
            estimates.push(record(family, Mode::Offline, res, total, run));
            if let Some(points) = traj.as_deref_mut() {
                for k in offline_checkpoints(stream.len()) {
                    if let Ok(est) = solve_offline(&stream[..k], spec, &options.solver)
                        .and_then(|f| f.ate_estimate())
                    {
                        points.push(TrajectoryPoint {
                            family,
                            mode: Mode::Offline,
                            batch: k as u64,
                            n_total: stream[..k].iter().map(|b| b.len() as u64).sum(),
                            estimate: est.delta,
                            se: est.se,
                        });
                    }
                }
            }
        }
        let (state, total, run) = run_online(spec, &stream, &options.solver, |s| {
            if let Some(points) = traj.as_deref_mut() {
                let est = s.ate_estimate()?;
                points.push(TrajectoryPoint {
                    family,
                    mode: Mode::Online,
                    batch: s.batch_count(),
                    n_total: s.n_total(),
                    estimate: est.delta,
                    se: est.se,
                });
            }
            Ok(())
        });
        let res = state.and_then(|s| s.ate_estimate());
        estimates.push(record(family, Mode::Online, res, total, run));
    }
    Ok(ReplicationRecord {
        replication: rep,
        true_ate: truth.value,
        estimates,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Aggregates replication records into metrics rows. Failed runs count
/// towards `failures` and are excluded from the statistics.
pub fn aggregate(config: &SimConfig, records: &[ReplicationRecord]) -> MetricsTable {
    let mut rows = Vec::new();
    let Some(first) = records.first() else {
        return MetricsTable {
            config: config.clone(),
            rows,
        };
    };
    for key in first.estimates.iter().map(|e| (e.family, e.mode)) {
        let runs: Vec<(&ReplicationRecord, &EstimateRecord)> = records
            .iter()
            .filter_map(|r| r.get(key.0, key.1).map(|e| (r, e)))
            .collect();
        let ok: Vec<(f64, AteEstimate)> = runs
            .iter()
            .filter_map(|(r, e)| e.estimate.map(|est| (r.true_ate, est)))
            .collect();
        let errors: Vec<f64> = ok.iter().map(|(t, e)| e.delta - t).collect();
        let bias = mean(errors.iter().copied());
        let ese = if errors.len() > 1 {
            let ss: f64 = errors.iter().map(|e| (e - bias).powi(2)).sum();
            (ss / (errors.len() - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        let mean_truth = mean(ok.iter().map(|(t, _)| *t));
        rows.push(MetricsRow {
            family: key.0,
            mode: key.1,
            n_batches: config.n_batches,
            batch_size: config.batch_size,
            n_total: config.total_n(),
            replications: runs.len(),
            failures: runs.len() - ok.len(),
            bias,
            relative_bias: bias / mean_truth,
            mean_abs_bias: mean(errors.iter().map(|e| e.abs())),
            ase: mean(ok.iter().map(|(_, e)| e.se)),
            ese,
            coverage: mean(
                ok.iter()
                    .map(|(t, e)| f64::from(u8::from((e.delta - t).abs() <= Z975 * e.se))),
            ),
            total_time: mean(runs.iter().map(|(_, e)| e.total_time)),
            run_time: mean(runs.iter().map(|(_, e)| e.run_time)),
        });
    }
    MetricsTable {
        config: config.clone(),
        rows,
    }
}

/// Runs `f` on a one-thread pool, so that pooled offline fits cannot use
/// more cores than the online updates they are timed against.
fn serially<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Runs every replication of a scenario and summarizes it.
pub fn run_scenario(config: &SimConfig, options: &ScenarioOptions) -> Result<ScenarioReport> {
    config.validate()?;
    let mut trajectory = Vec::new();
    let mut records = Vec::with_capacity(config.replications);
    if config.replications > 0 {
        let traj = options.record_trajectory.then_some(&mut trajectory);
        let first = if options.parallel {
            replicate(config, options, 0, traj)?
        } else {
            serially(|| replicate(config, options, 0, traj))?
        };
        records.push(first);
    }
    let rest: Vec<ReplicationRecord> = if options.parallel {
        (1..config.replications)
            .into_par_iter()
            .map(|rep| replicate(config, options, rep, None))
            .collect::<Result<_>>()?
    } else {
        serially(|| {
            (1..config.replications)
                .map(|rep| replicate(config, options, rep, None))
                .collect::<Result<_>>()
        })?
    };
    records.extend(rest);
    Ok(ScenarioReport {
        table: aggregate(config, &records),
        replications: records,
        trajectory,
    })
}

/// Rejection frequency of one family at one effect size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub family: Family,
    pub delta: f64,
    pub replications: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    /// Mean analysis index at stopping (rejections and completions alike).
    pub mean_stop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialTable {
    pub config: SimConfig,
    pub monitor: MonitorConfig,
    pub boundaries: Vec<f64>,
    pub rows: Vec<RejectionRow>,
}

impl SequentialTable {
    pub fn rate(&self, family: Family, delta: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.family == family && (r.delta - delta).abs() < 1e-12)
            .map(|r| r.rejection_rate)
    }
}

/// Monitors one stream; returns whether the null was rejected and the
/// stopping analysis.
fn monitor_stream(
    spec: ModelSpec,
    stream: &[DataBatch],
    monitor: &MonitorState,
    opts: &SolverOptions,
) -> Result<(bool, usize)> {
    let mut monitor = monitor.clone();
    let mut state: Option<OnlineState> = None;
    for batch in stream {
        state = Some(match state.take() {
            None => init_state(batch, spec, opts)?,
            Some(mut s) => {
                s.update(batch, opts)?;
                s
            }
        });
        monitor = monitor.step(state.as_ref().expect("state set above"))?;
        match monitor.decision {
            Decision::Continue => {}
            Decision::Reject => return Ok((true, monitor.analyses_done)),
            Decision::CompleteAccept => return Ok((false, monitor.analyses_done)),
        }
    }
    Ok((false, monitor.analyses_done))
}

/// Rejection rates of the monitored Wald test over a grid of true effects,
/// one interim analysis per batch.
pub fn run_sequential_experiment(
    config: &SimConfig,
    monitor_config: &MonitorConfig,
    delta_grid: &[f64],
    options: &ScenarioOptions,
) -> Result<SequentialTable> {
    config.validate()?;
    if monitor_config.total_analyses != config.n_batches {
        return Err(Error::Config(format!(
            "{} planned analyses but {} batches",
            monitor_config.total_analyses, config.n_batches
        )));
    }
    if !delta_grid.contains(&monitor_config.null_delta) {
        return Err(Error::Config(
            "effect grid must include the null value".into(),
        ));
    }
    let monitor = MonitorState::new(monitor_config.clone())?;
    let mut rows = Vec::new();
    for (gi, &delta) in delta_grid.iter().enumerate() {
        let cfg = SimConfig {
            treatment_effect: Some(delta),
            ..config.clone()
        };
        let run_rep = |rep: usize| -> Result<Vec<Result<(bool, usize)>>> {
            let lane = 2 + gi as u64;
            let mut rng = cfg.rng(rep as u64, lane);
            let params = TrueParams::for_replication(&cfg, &mut rng);
            let gen = Generator::new(&cfg, params)?;
            let stream = gen.make_stream(&mut rng);
            options
                .families
                .iter()
                .map(|&family| {
                    let spec = ModelSpec::new(family, cfg.outcome, cfg.p())?;
                    Ok(monitor_stream(spec, &stream, &monitor, &options.solver))
                })
                .collect()
        };
        let outcomes: Vec<Vec<Result<(bool, usize)>>> = if options.parallel {
            (0..cfg.replications)
                .into_par_iter()
                .map(run_rep)
                .collect::<Result<_>>()?
        } else {
            (0..cfg.replications).map(run_rep).collect::<Result<_>>()?
        };
        for (fi, &family) in options.families.iter().enumerate() {
            let ok: Vec<(bool, usize)> = outcomes
                .iter()
                .filter_map(|o| o[fi].as_ref().ok().copied())
                .collect();
            rows.push(RejectionRow {
                family,
                delta,
                replications: outcomes.len(),
                failures: outcomes.len() - ok.len(),
                rejection_rate: mean(ok.iter().map(|(r, _)| f64::from(u8::from(*r)))),
                mean_stop: mean(ok.iter().map(|(_, k)| *k as f64)),
            });
        }
    }
    Ok(SequentialTable {
        config: config.clone(),
        monitor: monitor_config.clone(),
        boundaries: monitor.boundaries.clone(),
        rows,
    })
}
