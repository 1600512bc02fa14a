//! Simulation studies: data generation, replicated scenario runs,
//! sequential-testing experiments and their tabular outputs.

pub mod dgp;
pub mod report;
pub mod scenario;

pub use dgp::{
    sort_stream, true_ate, Generator, SimConfig, StreamBias, ThetaDraw, TrueAte, TrueParams,
};
pub use scenario::{
    aggregate, run_scenario, run_sequential_experiment, EstimateRecord, MetricsRow, MetricsTable,
    Mode, RejectionRow, ReplicationRecord, ScenarioOptions, ScenarioReport, SequentialTable,
    TrajectoryPoint,
};

use crate::sequential::{MonitorConfig, Spending};

/// Seed of the single coefficient draw shared by all replications of the
/// estimation scenarios (one covariate, true effect about 0.18).
pub const PRESET_THETA_SEED: u64 = 17_182;

/// Coefficient scale of the sequential-testing scenario. Small coefficients
/// give a nearly randomized design whose effect variance is close to `4 / N`.
pub const SEQUENTIAL_COEFFICIENT_SCALE: f64 = 0.1;

/// Base configuration of the estimation scenarios.
pub fn preset_base() -> SimConfig {
    SimConfig {
        theta_draw: ThetaDraw::Fixed {
            seed: PRESET_THETA_SEED,
        },
        ..SimConfig::default()
    }
}

/// Streaming setting: batches of 100 with a growing number of batches.
pub fn scenario_one(base: &SimConfig) -> Vec<SimConfig> {
    [10, 100, 1000]
        .into_iter()
        .map(|b| SimConfig {
            n_batches: b,
            batch_size: 100,
            ..base.clone()
        })
        .collect()
}

/// Fixed total sample of 10^4 split into batches of 1000 or 200.
pub fn scenario_two(base: &SimConfig) -> Vec<SimConfig> {
    [1000, 200]
        .into_iter()
        .map(|n| SimConfig {
            n_batches: 10_000 / n,
            batch_size: n,
            ..base.clone()
        })
        .collect()
}

/// Sequential testing: ten batches of 1000, one analysis per batch, with
/// fresh small coefficients in every replication.
pub fn scenario_three(base: &SimConfig) -> (SimConfig, MonitorConfig, Vec<f64>) {
    let config = SimConfig {
        n_batches: 10,
        batch_size: 1000,
        theta_draw: ThetaDraw::PerReplication,
        coefficient_scale: SEQUENTIAL_COEFFICIENT_SCALE,
        ..base.clone()
    };
    let monitor = MonitorConfig::new(10, 0.05, Spending::Pocock).expect("valid monitor");
    let grid = (0..=6).map(|k| f64::from(k) * 0.02).collect();
    (config, monitor, grid)
}

/// Covariate-sorted stream of 100 batches of 100.
pub fn scenario_biased(base: &SimConfig) -> SimConfig {
    SimConfig {
        n_batches: 100,
        batch_size: 100,
        stream_bias: StreamBias::CovariateSorted,
        ..base.clone()
    }
}
