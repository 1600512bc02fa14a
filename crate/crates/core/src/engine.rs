//! Renewable estimation: the online estimating-equation update, the
//! incrementally accumulated sandwich variance and the pooled offline solver
//! used as the reference.
//!
//! After batch `b` the state holds only
//! `{theta_b, S_b = sum_j S_j(D_j; theta_j), M_b = sum_j sum_i U U^T, N_b, b}`.
//! Upon a new batch the update solves
//!
//! ```text
//! S_{b-1} (theta_{b-1} - theta) + U_b(D_b; theta) = 0
//! ```
//!
//! by Newton-Raphson started at `theta_{b-1}`, with Jacobian
//! `S_{b-1} + S_b(D_b; theta)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataBatch, ModelSpec, ParameterVector};
use crate::scores::Accumulator;

/// Condition estimates above this are reported as singular.
const SINGULAR_CONDITION: f64 = 1e14;
/// Condition estimates above this log a warning.
pub const WARN_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Convergence tolerance on the max-norm of the Newton step.
    pub tol: f64,
    pub max_iter: usize,
    /// Random restarts of the initial solve after a failure.
    pub restarts: usize,
    /// Seed for the restart start points.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 50,
            restarts: 5,
            seed: 0x5eed,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config(format!(
                "solver options need tol > 0 and max_iter >= 1, got tol={} max_iter={}",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

/// Treatment-effect estimate with its sandwich standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub delta: f64,
    pub se: f64,
}

impl AteEstimate {
    /// Two-sided Wald interval at the given normal quantile.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.delta - z * self.se, self.delta + z * self.se)
    }

    pub fn ci95(&self) -> (f64, f64) {
        self.interval(crate::sequential::normal_quantile(0.975))
    }
}

/// Renewable summary statistics; sufficient for every later update.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    spec: ModelSpec,
    theta: ParameterVector,
    s_cum: DMatrix<f64>,
    m_cum: DMatrix<f64>,
    n_total: u64,
    batch_count: u64,
}

struct Prior<'a> {
    s: &'a DMatrix<f64>,
    theta: &'a DVector<f64>,
}

struct Solution {
    theta: DVector<f64>,
    /// LU-pivot condition estimate of the last Jacobian.
    condition: f64,
    /// Data sums at `theta` (prior excluded), with scores kept.
    sums: Accumulator,
}

impl Solution {
    fn variability(&self) -> Result<DMatrix<f64>> {
        let m = self.sums.m_matrix().expect("newton keeps scores");
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch variability"));
        }
        Ok(m)
    }
}

/// LU solve with a pivot-ratio singularity guard.
fn solve_checked(
    j: DMatrix<f64>,
    rhs: &DVector<f64>,
    what: &'static str,
) -> Result<(DVector<f64>, f64)> {
    let lu = j.lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < SINGULAR_CONDITION) {
        return Err(Error::Singular { what, condition });
    }
    let x = lu.solve(rhs).ok_or(Error::Singular { what, condition })?;
    Ok((x, condition))
}

fn newton(
    spec: &ModelSpec,
    start: DVector<f64>,
    prior: Option<Prior<'_>>,
    batches: &[&DataBatch],
    opts: &SolverOptions,
) -> Result<Solution> {
    let d = spec.dim();
    let mut theta = start;
    let mut step_norm = f64::INFINITY;
    let mut residual_norm = f64::INFINITY;
    let mut acc = Accumulator::new(d, true);
    for _ in 0..opts.max_iter {
        acc.reset();
        for batch in batches {
            acc.add_batch(spec, batch, theta.as_slice())?;
        }
        acc.check_finite()?;
        let mut u = acc.u_vector();
        let mut jac = acc.s_matrix();
        if let Some(prior) = &prior {
            u.gemv(1.0, prior.s, &(prior.theta - &theta), 1.0);
            jac += prior.s;
        }
        residual_norm = u.amax();
        let (step, condition) = solve_checked(jac, &u, "sensitivity matrix")?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("newton step"));
        }
        step_norm = step.amax();
        // the current iterate is kept once its correction is negligible, so
        // the sums just computed are exactly those at the returned value
        if step_norm < opts.tol {
            return Ok(Solution {
                theta,
                condition,
                sums: acc,
            });
        }
        theta += &step;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        step_norm,
        residual_norm,
        last_iterate: theta.as_slice().to_vec(),
    })
}

fn check_both_arms(batches: &[&DataBatch]) -> Result<()> {
    let mut seen = [false; 2];
    for batch in batches {
        for &a in batch.treatments() {
            seen[usize::from(a)] = true;
        }
    }
    if seen[0] && seen[1] {
        Ok(())
    } else {
        Err(Error::Singular {
            what: "sensitivity matrix (all subjects in one treatment arm)",
            condition: f64::INFINITY,
        })
    }
}

/// Newton from zero, then from seeded random starts if that fails to converge.
fn solve_from_scratch(
    spec: &ModelSpec,
    batches: &[&DataBatch],
    opts: &SolverOptions,
) -> Result<Solution> {
    opts.validate()?;
    for batch in batches {
        batch.check(spec)?;
    }
    check_both_arms(batches)?;
    let d = spec.dim();
    let n: usize = batches.iter().map(|b| b.len()).sum();
    if n <= d {
        warn!("first solve uses {n} observations for {d} parameters");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = Normal::new(0.0, 0.5).expect("valid normal");
    let mut result = newton(spec, DVector::zeros(d), None, batches, opts);
    for attempt in 0..opts.restarts {
        match &result {
            Err(Error::NonConvergence { .. } | Error::Positivity { .. } | Error::NonFinite(_)) => {
                warn!(
                    "initial solve failed ({}), restart {}",
                    result.as_ref().err().unwrap(),
                    attempt + 1
                );
                let start = DVector::from_fn(d, |_, _| jitter.sample(&mut rng));
                result = newton(spec, start, None, batches, opts);
            }
            _ => break,
        }
    }
    result
}

/// `S^{-1} M S^{-T}`, symmetrized.
pub fn sandwich(s: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = s.clone().lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    let singular = Error::Singular {
        what: "cumulative sensitivity matrix",
        condition,
    };
    if !(condition < SINGULAR_CONDITION) {
        return Err(singular);
    }
    let left = lu.solve(m).ok_or(singular)?;
    let v = lu
        .solve(&left.transpose())
        .ok_or(Error::Singular {
            what: "cumulative sensitivity matrix",
            condition,
        })?
        .transpose();
    Ok((&v + v.transpose()) * 0.5)
}

fn condition_number(s: &DMatrix<f64>) -> f64 {
    let sv = s.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Solves the first batch's estimating equation and seeds the summaries.
pub fn init_state(batch: &DataBatch, spec: ModelSpec, opts: &SolverOptions) -> Result<OnlineState> {
    let sol = solve_from_scratch(&spec, &[batch], opts)?;
    let state = OnlineState {
        spec,
        theta: ParameterVector::from_vec(spec, sol.theta.as_slice().to_vec())?,
        s_cum: sol.sums.s_matrix(),
        m_cum: sol.variability()?,
        n_total: batch.len() as u64,
        batch_count: 1,
    };
    let cond = condition_number(&state.s_cum);
    if cond > WARN_CONDITION {
        warn!("initial sensitivity matrix is ill-conditioned (cond {cond:.3e})");
    }
    Ok(state)
}

impl OnlineState {
    /// Rebuilds a state from stored summaries.
    pub fn from_parts(
        spec: ModelSpec,
        theta: Vec<f64>,
        s_cum: DMatrix<f64>,
        m_cum: DMatrix<f64>,
        n_total: u64,
        batch_count: u64,
    ) -> Result<Self> {
        let d = spec.dim();
        for (name, mat) in [("s_cum", &s_cum), ("m_cum", &m_cum)] {
            if mat.shape() != (d, d) {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected ({d}, {d})",
                    mat.shape()
                )));
            }
        }
        if batch_count == 0 || n_total < batch_count {
            return Err(Error::Format(format!(
                "inconsistent counts: n_total={n_total}, batch_count={batch_count}"
            )));
        }
        Ok(OnlineState {
            spec,
            theta: ParameterVector::from_vec(spec, theta)?,
            s_cum,
            m_cum,
            n_total,
            batch_count,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn theta(&self) -> &ParameterVector {
        &self.theta
    }

    pub fn s_cum(&self) -> &DMatrix<f64> {
        &self.s_cum
    }

    pub fn m_cum(&self) -> &DMatrix<f64> {
        &self.m_cum
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn batch_count(&self) -> u64 {
        self.batch_count
    }

    /// Condition number of the cumulative sensitivity matrix.
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.s_cum)
    }

    /// Online update with a new batch; never touches earlier data.
    pub fn renew(&self, batch: &DataBatch, opts: &SolverOptions) -> Result<OnlineState> {
        let mut next = self.clone();
        next.update(batch, opts)?;
        Ok(next)
    }

    /// In-place form of [`OnlineState::renew`]. On error the state is unchanged.
    pub fn update(&mut self, batch: &DataBatch, opts: &SolverOptions) -> Result<()> {
        opts.validate()?;
        batch.check(&self.spec)?;
        let prev = DVector::from_column_slice(self.theta.as_slice());
        let sol = newton(
            &self.spec,
            prev.clone(),
            Some(Prior {
                s: &self.s_cum,
                theta: &prev,
            }),
            &[batch],
            opts,
        )?;
        if sol.condition > WARN_CONDITION {
            warn!(
                "update of batch {} is ill-conditioned (cond estimate {:.3e})",
                batch.index(),
                sol.condition
            );
        }
        let m = sol.variability()?;
        self.s_cum += sol.sums.s_matrix();
        self.m_cum += m;
        self.theta = ParameterVector::from_vec(self.spec, sol.theta.as_slice().to_vec())?;
        self.n_total += batch.len() as u64;
        self.batch_count += 1;
        Ok(())
    }

    /// Variance-covariance matrix `S_b^{-1} M_b S_b^{-T}` of the current estimate.
    pub fn sandwich_variance(&self) -> Result<DMatrix<f64>> {
        sandwich(&self.s_cum, &self.m_cum)
    }

    /// Treatment effect (last parameter) and its standard error.
    pub fn ate_estimate(&self) -> Result<AteEstimate> {
        let v = self.sandwich_variance()?;
        let di = self.spec.delta_index();
        let var = v[(di, di)];
        if !var.is_finite() || var < 0.0 {
            return Err(Error::ZeroVariance);
        }
        Ok(AteEstimate {
            delta: self.theta.delta(),
            se: var.sqrt(),
        })
    }
}

/// Result of the pooled offline solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineFit {
    pub theta: ParameterVector,
    pub variance: DMatrix<f64>,
    pub n_total: u64,
}

impl OfflineFit {
    pub fn ate_estimate(&self) -> Result<AteEstimate> {
        let di = self.theta.spec().delta_index();
        let var = self.variance[(di, di)];
        if !var.is_finite() || var < 0.0 {
            return Err(Error::ZeroVariance);
        }
        Ok(AteEstimate {
            delta: self.theta.delta(),
            se: var.sqrt(),
        })
    }
}

/// Pooled estimating equation `sum_j U_j(D_j; theta) = 0` over all batches,
/// solved from zero, with the classical sandwich variance.
pub fn solve_offline<B: std::borrow::Borrow<DataBatch>>(
    batches: &[B],
    spec: ModelSpec,
    opts: &SolverOptions,
) -> Result<OfflineFit> {
    let refs: Vec<&DataBatch> = batches.iter().map(|b| b.borrow()).collect();
    if refs.iter().all(|b| b.is_empty()) {
        return Err(Error::InvalidObservation("pooled data is empty".into()));
    }
    let sol = solve_from_scratch(&spec, &refs, opts)?;
    let variance = sandwich(&sol.sums.s_matrix(), &sol.variability()?)?;
    Ok(OfflineFit {
        theta: ParameterVector::from_vec(spec, sol.theta.as_slice().to_vec())?,
        variance,
        n_total: sol.sums.n as u64,
    })
}

/// Pooled score `sum_j U_j(D_j; theta)` at an arbitrary parameter value.
pub fn pooled_score<B: std::borrow::Borrow<DataBatch>>(
    batches: &[B],
    theta: &ParameterVector,
) -> Result<DVector<f64>> {
    let spec = *theta.spec();
    let mut acc = Accumulator::new(spec.dim(), false);
    for b in batches {
        let b = b.borrow();
        b.check(&spec)?;
        acc.add_batch(&spec, b, theta.as_slice())?;
    }
    Ok(acc.u_vector())
}
