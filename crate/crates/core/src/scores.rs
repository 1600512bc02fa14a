//! Stacked estimating functions for the three estimator families, their
//! analytic sensitivity `-dU/dtheta^T` and the per-batch score bundles.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{expit, DataBatch, Family, ModelSpec, ObsRef, Observation, ParameterVector};

/// Propensity scores outside `(eps, 1 - eps)` are rejected.
pub const POSITIVITY_EPS: f64 = 1e-8;

/// Batches at least this large are reduced in parallel chunks.
const PAR_CHUNK: usize = 4096;

/// Sum of scores, sensitivity and variability over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    /// `sum_i U(O_i; theta)`
    pub u: DVector<f64>,
    /// `-sum_i dU(O_i; theta)/dtheta^T`
    pub s: DMatrix<f64>,
    /// `sum_i U(O_i; theta) U(O_i; theta)^T`
    pub m: DMatrix<f64>,
    pub n: usize,
}

/// Evaluates `U(O; theta)` into `u` and, when `s` is given, adds the
/// observation's contribution to `-dU/dtheta^T` (row-major `d x d`).
///
/// On a positivity violation returns the offending propensity.
pub(crate) fn eval_observation(
    spec: &ModelSpec,
    obs: ObsRef<'_>,
    theta: &[f64],
    u: &mut [f64],
    s: Option<&mut [f64]>,
) -> std::result::Result<(), f64> {
    let p = spec.p;
    let d = spec.dim();
    let di = d - 1;
    let x = obs.x;
    let y = obs.y;
    let af = f64::from(obs.a);
    let delta = theta[di];

    // propensity block
    let ps = if let Some(ar) = spec.alpha_range() {
        let alpha = &theta[ar.clone()];
        let e = expit(x.iter().zip(alpha).map(|(a, b)| a * b).sum());
        if !(e > POSITIVITY_EPS && e < 1.0 - POSITIVITY_EPS) {
            return Err(e);
        }
        for (k, xk) in x.iter().enumerate() {
            u[ar.start + k] = xk * (af - e);
        }
        Some((ar.start, e))
    } else {
        None
    };

    // outcome-regression block
    let or = if let Some(br) = spec.beta_range() {
        let beta = &theta[br.clone()];
        let (bx, bax) = beta.split_at(p);
        let eta0: f64 = x.iter().zip(bx).map(|(a, b)| a * b).sum();
        let eta_int: f64 = x.iter().zip(bax).map(|(a, b)| a * b).sum();
        let eta1 = eta0 + eta_int;
        let m1 = spec.outcome.mean(eta1);
        let m0 = spec.outcome.mean(eta0);
        let mu = if obs.a == 1 { m1 } else { m0 };
        // h(a, x) = (x, a x)
        let resid = y - mu;
        for (k, xk) in x.iter().enumerate() {
            u[br.start + k] = xk * resid;
            u[br.start + p + k] = af * xk * resid;
        }
        Some((br.start, mu, m1, m0))
    } else {
        None
    };

    // treatment-effect row
    let psi = match (spec.family, ps, or) {
        (Family::Gcomp, None, Some((_, _, m1, m0))) => m1 - m0 - delta,
        (Family::Iptw, Some((_, e)), None) => af * y / e - (1.0 - af) * y / (1.0 - e) - delta,
        (Family::Aiptw, Some((_, e)), Some((_, _, m1, m0))) => {
            (m1 + af * (y - m1) / e) - (m0 + (1.0 - af) * (y - m0) / (1.0 - e)) - delta
        }
        _ => unreachable!("family layout"),
    };
    u[di] = psi;

    let Some(s) = s else { return Ok(()) };

    if let Some((a0, e)) = ps {
        let w = e * (1.0 - e);
        for i in 0..p {
            let row = (a0 + i) * d + a0;
            let wxi = w * x[i];
            for j in 0..p {
                s[row + j] += wxi * x[j];
            }
        }
        // -dpsi/dalpha
        let coef = match (spec.family, or) {
            (Family::Iptw, _) => af * y * (1.0 - e) / e + (1.0 - af) * y * e / (1.0 - e),
            (Family::Aiptw, Some((_, _, m1, m0))) => {
                af * (y - m1) * (1.0 - e) / e + (1.0 - af) * (y - m0) * e / (1.0 - e)
            }
            _ => unreachable!("family layout"),
        };
        let row = di * d + a0;
        for (j, xj) in x.iter().enumerate() {
            s[row + j] += coef * xj;
        }
    }

    if let Some((b0, mu, m1, m0)) = or {
        // h h^T = [x x^T, a x x^T; a x x^T, a x x^T]
        let w = spec.outcome.mean_derivative(mu);
        let treated = obs.a == 1;
        for i in 0..p {
            let wxi = w * x[i];
            let top = (b0 + i) * d + b0;
            let bottom = (b0 + p + i) * d + b0;
            for j in 0..p {
                let v = wxi * x[j];
                s[top + j] += v;
                if treated {
                    s[top + p + j] += v;
                    s[bottom + j] += v;
                    s[bottom + p + j] += v;
                }
            }
        }
        let mp1 = spec.outcome.mean_derivative(m1);
        let mp0 = spec.outcome.mean_derivative(m0);
        // dpsi/dbeta = c1 h(1, x) - c0 h(0, x) = ((c1 - c0) x, c1 x)
        let (c1, c0) = match (spec.family, ps) {
            (Family::Gcomp, _) => (mp1, mp0),
            (Family::Aiptw, Some((_, e))) => {
                (mp1 * (1.0 - af / e), mp0 * (1.0 - (1.0 - af) / (1.0 - e)))
            }
            _ => unreachable!("family layout"),
        };
        let row = di * d + b0;
        for (j, xj) in x.iter().enumerate() {
            s[row + j] -= (c1 - c0) * xj;
            s[row + p + j] -= c1 * xj;
        }
    }

    s[di * d + di] += 1.0;
    Ok(())
}

/// Running sums over one or more batches. The variability matrix is built
/// on demand from the kept per-observation scores.
#[derive(Debug, Clone)]
pub(crate) struct Accumulator {
    pub d: usize,
    pub n: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// Row-major `n x d` scores, in observation order.
    scores: Option<Vec<f64>>,
}

impl Accumulator {
    pub fn new(d: usize, keep_scores: bool) -> Self {
        Accumulator {
            d,
            n: 0,
            u: vec![0.0; d],
            s: vec![0.0; d * d],
            scores: keep_scores.then(Vec::new),
        }
    }

    /// Clears the sums, keeping allocations.
    pub fn reset(&mut self) {
        self.n = 0;
        self.u.fill(0.0);
        self.s.fill(0.0);
        if let Some(sc) = self.scores.as_mut() {
            sc.clear();
        }
    }

    fn merge(&mut self, other: Accumulator) {
        self.n += other.n;
        add_assign(&mut self.u, &other.u);
        add_assign(&mut self.s, &other.s);
        if let (Some(sc), Some(osc)) = (self.scores.as_mut(), other.scores) {
            sc.extend_from_slice(&osc);
        }
    }

    pub fn add_batch(&mut self, spec: &ModelSpec, batch: &DataBatch, theta: &[f64]) -> Result<()> {
        if batch.len() < PAR_CHUNK {
            return self.add_range(spec, batch, theta, 0..batch.len());
        }
        let chunks: Vec<_> = (0..batch.len()).step_by(PAR_CHUNK).collect();
        let parts = chunks
            .par_iter()
            .map(|&start| {
                let mut acc = Accumulator::new(self.d, self.scores.is_some());
                acc.add_range(
                    spec,
                    batch,
                    theta,
                    start..(start + PAR_CHUNK).min(batch.len()),
                )?;
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        // fixed-order merge keeps results independent of the thread count
        for part in parts {
            self.merge(part);
        }
        Ok(())
    }

    fn add_range(
        &mut self,
        spec: &ModelSpec,
        batch: &DataBatch,
        theta: &[f64],
        range: std::ops::Range<usize>,
    ) -> Result<()> {
        let d = self.d;
        let mut ui = vec![0.0; d];
        if let Some(sc) = self.scores.as_mut() {
            sc.reserve(range.len() * d);
        }
        for i in range.clone() {
            eval_observation(spec, batch.get(i), theta, &mut ui, Some(&mut self.s)).map_err(
                |e| Error::Positivity {
                    batch: Some(batch.index()),
                    observation: i,
                    propensity: e,
                    eps: POSITIVITY_EPS,
                },
            )?;
            add_assign(&mut self.u, &ui);
            if let Some(sc) = self.scores.as_mut() {
                sc.extend_from_slice(&ui);
            }
        }
        self.n += range.len();
        Ok(())
    }

    pub fn u_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u)
    }

    pub fn s_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, &self.s)
    }

    /// `sum_i U_i U_i^T` over the kept scores.
    pub fn m_matrix(&self) -> Option<DMatrix<f64>> {
        self.scores.as_ref().map(|sc| {
            // row-major n x d scores are the column-major d x n matrix U^T
            let ut = DMatrixView::from_slice(sc, self.d, sc.len() / self.d);
            let m = ut * ut.transpose();
            (&m + m.transpose()) * 0.5
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch score"));
        }
        if self.s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch sensitivity"));
        }
        Ok(())
    }

    pub fn into_bundle(self) -> ScoreBundle {
        ScoreBundle {
            u: self.u_vector(),
            s: self.s_matrix(),
            m: self
                .m_matrix()
                .unwrap_or_else(|| DMatrix::zeros(self.d, self.d)),
            n: self.n,
        }
    }
}

#[inline]
fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn check_theta(spec: &ModelSpec, theta: &ParameterVector, p: usize) -> Result<()> {
    if theta.spec() != spec {
        return Err(Error::Config(format!(
            "parameter layout {:?} does not match model {:?}",
            theta.spec(),
            spec
        )));
    }
    if p != spec.p {
        return Err(Error::Dimension {
            expected: spec.p,
            found: p,
            context: "observation covariates",
        });
    }
    Ok(())
}

/// Estimating function `U(O; theta)` for the family recorded in `theta`.
pub fn score(obs: &Observation, theta: &ParameterVector) -> Result<DVector<f64>> {
    let spec = *theta.spec();
    check_theta(&spec, theta, obs.x().len())?;
    let mut u = vec![0.0; spec.dim()];
    eval_observation(&spec, obs.as_ref(), theta.as_slice(), &mut u, None).map_err(|e| {
        Error::Positivity {
            batch: None,
            observation: 0,
            propensity: e,
            eps: POSITIVITY_EPS,
        }
    })?;
    Ok(DVector::from_vec(u))
}

/// Single-observation sensitivity `-dU(O; theta)/dtheta^T`.
pub fn sensitivity(obs: &Observation, theta: &ParameterVector) -> Result<DMatrix<f64>> {
    let spec = *theta.spec();
    check_theta(&spec, theta, obs.x().len())?;
    let d = spec.dim();
    let mut u = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    eval_observation(&spec, obs.as_ref(), theta.as_slice(), &mut u, Some(&mut s)).map_err(|e| {
        Error::Positivity {
            batch: None,
            observation: 0,
            propensity: e,
            eps: POSITIVITY_EPS,
        }
    })?;
    Ok(DMatrix::from_row_slice(d, d, &s))
}

fn score_family(
    family: Family,
    obs: &Observation,
    theta: &ParameterVector,
) -> Result<DVector<f64>> {
    if theta.spec().family != family {
        return Err(Error::Config(format!(
            "expected {family} parameters, got {}",
            theta.spec().family
        )));
    }
    score(obs, theta)
}

/// `( h(A,X)[Y - m(A,X)], m(1,X) - m(0,X) - delta )`
pub fn score_gcomp(obs: &Observation, theta: &ParameterVector) -> Result<DVector<f64>> {
    score_family(Family::Gcomp, obs, theta)
}

/// `( g(X)[A - e(X)], AY/e - (1-A)Y/(1-e) - delta )`
pub fn score_iptw(obs: &Observation, theta: &ParameterVector) -> Result<DVector<f64>> {
    score_family(Family::Iptw, obs, theta)
}

/// Propensity block, outcome block and the augmented contrast.
pub fn score_aiptw(obs: &Observation, theta: &ParameterVector) -> Result<DVector<f64>> {
    score_family(Family::Aiptw, obs, theta)
}

/// Score sum, sensitivity and variability of one batch at `theta`.
pub fn batch_bundle(
    batch: &DataBatch,
    theta: &ParameterVector,
    spec: &ModelSpec,
) -> Result<ScoreBundle> {
    batch.check(spec)?;
    check_theta(spec, theta, batch.p())?;
    let mut acc = Accumulator::new(spec.dim(), true);
    acc.add_batch(spec, batch, theta.as_slice())?;
    acc.check_finite()?;
    let bundle = acc.into_bundle();
    if bundle.m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("batch variability"));
    }
    Ok(bundle)
}
