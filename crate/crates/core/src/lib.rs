//! Online (renewable) estimation of average treatment effects from data
//! batches that arrive over time.
//!
//! Each estimator family stacks its nuisance-model estimating equations with
//! the treatment-effect equation. When a batch arrives, the engine combines
//! it with the stored summaries `{theta, S, M, N, b}` from earlier batches,
//! solves the updated equation by Newton-Raphson and refreshes the sandwich
//! variance, without ever revisiting earlier raw data. Interim Wald
//! statistics can be monitored with alpha-spending group-sequential
//! boundaries.

pub mod engine;
pub mod error;
pub mod ingest;
pub mod model;
pub mod persist;
pub mod scores;
pub mod sequential;
pub mod sim;

pub use engine::{init_state, solve_offline, AteEstimate, OfflineFit, OnlineState, SolverOptions};
pub use error::{Error, Result};
pub use model::{
    expit, or_features, predict_outcome, ps_features, DataBatch, Family, ModelSpec, ObsRef,
    Observation, OutcomeType, ParameterVector,
};
pub use scores::{
    batch_bundle, score, score_aiptw, score_gcomp, score_iptw, sensitivity, ScoreBundle,
};
pub use sequential::{
    compute_boundaries, monitor_step, spending_value, wald_stat, Decision, MonitorConfig,
    MonitorState, Spending,
};
