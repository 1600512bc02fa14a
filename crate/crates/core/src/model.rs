//! Observations, model specifications and the packed parameter layout.
//!
//! The covariate vector always carries the intercept in position 0. The
//! propensity-score design is `g(x) = x` and the outcome-regression design is
//! `h(a, x) = (x, a * x)`, so for `x = (1, x_rest)` the outcome coefficients
//! are ordered `(intercept, x_rest, A, A * x_rest)`. Coefficient `beta[p]` is
//! the main treatment effect.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Estimator family, each defined by its stacked estimating function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// G-computation: outcome regression plus the standardized contrast.
    Gcomp,
    /// Inverse probability of treatment weighting.
    Iptw,
    /// Augmented IPTW (doubly robust).
    Aiptw,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gcomp, Family::Iptw, Family::Aiptw];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gcomp => "gcomp",
            Family::Iptw => "iptw",
            Family::Aiptw => "aiptw",
        }
    }

    pub fn has_propensity(self) -> bool {
        matches!(self, Family::Iptw | Family::Aiptw)
    }

    pub fn has_outcome_model(self) -> bool {
        matches!(self, Family::Gcomp | Family::Aiptw)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcomp" | "g-comp" => Ok(Family::Gcomp),
            "iptw" => Ok(Family::Iptw),
            "aiptw" => Ok(Family::Aiptw),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeType {
    Continuous,
    /// Binary outcome with a logistic outcome-regression link.
    Binary,
}

impl OutcomeType {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeType::Continuous => "continuous",
            OutcomeType::Binary => "binary",
        }
    }

    /// Inverse link applied to the linear predictor.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            OutcomeType::Continuous => eta,
            OutcomeType::Binary => expit(eta),
        }
    }

    /// Derivative of the inverse link, expressed through the mean.
    #[inline]
    pub(crate) fn mean_derivative(self, mean: f64) -> f64 {
        match self {
            OutcomeType::Continuous => 1.0,
            OutcomeType::Binary => mean * (1.0 - mean),
        }
    }
}

impl fmt::Display for OutcomeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" => Ok(OutcomeType::Continuous),
            "binary" => Ok(OutcomeType::Binary),
            other => Err(Error::Config(format!("unknown outcome type `{other}`"))),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

/// Estimator family, outcome type and covariate dimension `p` (intercept
/// included). Determines the parameter dimension and its slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub outcome: OutcomeType,
    pub p: usize,
}

impl ModelSpec {
    pub fn new(family: Family, outcome: OutcomeType, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config(
                "covariate dimension must include the intercept (p >= 1)".into(),
            ));
        }
        Ok(ModelSpec { family, outcome, p })
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self.family {
            Family::Gcomp => 2 * self.p + 1,
            Family::Iptw => self.p + 1,
            Family::Aiptw => 3 * self.p + 1,
        }
    }

    pub fn alpha_range(&self) -> Option<Range<usize>> {
        self.family.has_propensity().then_some(0..self.p)
    }

    pub fn beta_range(&self) -> Option<Range<usize>> {
        match self.family {
            Family::Gcomp => Some(0..2 * self.p),
            Family::Iptw => None,
            Family::Aiptw => Some(self.p..3 * self.p),
        }
    }

    /// Index of the treatment effect, always the last entry.
    pub fn delta_index(&self) -> usize {
        self.dim() - 1
    }
}

/// One subject's record: outcome, treatment indicator and covariates with
/// the intercept in position 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    y: f64,
    a: u8,
    x: Vec<f64>,
}

impl Observation {
    pub fn new(y: f64, a: u8, x: Vec<f64>) -> Result<Self> {
        validate(y, a, &x)?;
        Ok(Observation { y, a, x })
    }

    /// Builds an observation from covariates without the intercept.
    pub fn with_intercept(y: f64, a: u8, covariates: &[f64]) -> Result<Self> {
        let mut x = Vec::with_capacity(covariates.len() + 1);
        x.push(1.0);
        x.extend_from_slice(covariates);
        Self::new(y, a, x)
    }

    pub fn as_ref(&self) -> ObsRef<'_> {
        ObsRef {
            y: self.y,
            a: self.a,
            x: &self.x,
        }
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn a(&self) -> u8 {
        self.a
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn check_outcome(&self, outcome: OutcomeType) -> Result<()> {
        self.as_ref().check_outcome(outcome)
    }
}

fn validate(y: f64, a: u8, x: &[f64]) -> Result<()> {
    if a > 1 {
        return Err(Error::InvalidObservation(format!(
            "treatment must be 0 or 1, got {a}"
        )));
    }
    if x.is_empty() || x[0] != 1.0 {
        return Err(Error::InvalidObservation(
            "first covariate must be the intercept 1".into(),
        ));
    }
    if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidObservation("non-finite value".into()));
    }
    Ok(())
}

/// Borrowed view of one observation inside a [`DataBatch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsRef<'a> {
    pub y: f64,
    pub a: u8,
    pub x: &'a [f64],
}

impl ObsRef<'_> {
    pub fn to_owned(&self) -> Observation {
        Observation {
            y: self.y,
            a: self.a,
            x: self.x.to_vec(),
        }
    }

    pub fn check_outcome(&self, outcome: OutcomeType) -> Result<()> {
        if outcome == OutcomeType::Binary && self.y != 0.0 && self.y != 1.0 {
            return Err(Error::InvalidObservation(format!(
                "binary outcome must be 0 or 1, got {}",
                self.y
            )));
        }
        Ok(())
    }
}

/// A finite batch of observations sharing one covariate dimension, stored
/// column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    index: u64,
    p: usize,
    y: Vec<f64>,
    a: Vec<u8>,
    /// Row-major `n x p`.
    x: Vec<f64>,
}

impl DataBatch {
    /// Empty batch; at least one observation must be pushed before use.
    pub fn new(index: u64, p: usize) -> Self {
        DataBatch {
            index,
            p,
            y: Vec::new(),
            a: Vec::new(),
            x: Vec::new(),
        }
    }

    pub fn with_capacity(index: u64, p: usize, n: usize) -> Self {
        DataBatch {
            index,
            p,
            y: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            x: Vec::with_capacity(n * p),
        }
    }

    pub fn from_observations(index: u64, observations: &[Observation]) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::InvalidObservation("batch must be nonempty".into()))?;
        let mut batch = DataBatch::with_capacity(index, first.x.len(), observations.len());
        for obs in observations {
            batch.push(obs.as_ref())?;
        }
        Ok(batch)
    }

    pub fn push(&mut self, obs: ObsRef<'_>) -> Result<()> {
        if obs.x.len() != self.p {
            return Err(Error::Dimension {
                expected: self.p,
                found: obs.x.len(),
                context: "observation covariates",
            });
        }
        validate(obs.y, obs.a, obs.x)?;
        self.y.push(obs.y);
        self.a.push(obs.a);
        self.x.extend_from_slice(obs.x);
        Ok(())
    }

    /// Appends without validation. Callers guarantee the invariants.
    pub(crate) fn push_unchecked(&mut self, y: f64, a: u8, x: &[f64]) {
        debug_assert_eq!(x.len(), self.p);
        self.y.push(y);
        self.a.push(a);
        self.x.extend_from_slice(x);
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn set_index(&mut self, index: u64) {
        self.index = index;
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn get(&self, i: usize) -> ObsRef<'_> {
        ObsRef {
            y: self.y[i],
            a: self.a[i],
            x: &self.x[i * self.p..(i + 1) * self.p],
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = ObsRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }

    pub fn treatments(&self) -> &[u8] {
        &self.a
    }

    /// Checks the batch against a model specification.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidObservation(format!(
                "batch {} is empty",
                self.index
            )));
        }
        if self.p != spec.p {
            return Err(Error::Dimension {
                expected: spec.p,
                found: self.p,
                context: "batch covariate dimension",
            });
        }
        if spec.outcome == OutcomeType::Binary {
            for (i, obs) in self.iter().enumerate() {
                obs.check_outcome(spec.outcome).map_err(|e| {
                    Error::InvalidObservation(format!("batch {}, observation {i}: {e}", self.index))
                })?;
            }
        }
        Ok(())
    }
}

/// Propensity-score design `g(x) = x`.
pub fn ps_features(obs: ObsRef<'_>) -> Vec<f64> {
    obs.x.to_vec()
}

/// Outcome-regression design `h(a, x) = (x, a * x)`.
pub fn or_features(obs: ObsRef<'_>) -> Vec<f64> {
    let mut h = Vec::with_capacity(2 * obs.x.len());
    write_or_features(obs.a, obs.x, &mut h);
    h
}

fn write_or_features(a: u8, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(x);
    let af = f64::from(a);
    out.extend(x.iter().map(|v| af * v));
}

/// Linear predictor `h(a, x) . beta` without allocating the design row.
#[inline]
pub(crate) fn or_linear_predictor(a: u8, x: &[f64], beta: &[f64]) -> f64 {
    let p = x.len();
    let main: f64 = x.iter().zip(&beta[..p]).map(|(xi, b)| xi * b).sum();
    if a == 1 {
        main + x.iter().zip(&beta[p..]).map(|(xi, b)| xi * b).sum::<f64>()
    } else {
        main
    }
}

/// Outcome-regression mean `m(a, x; beta)`; evaluate at either arm for
/// counterfactual predictions.
pub fn predict_outcome(a: u8, x: &[f64], beta: &[f64], outcome: OutcomeType) -> Result<f64> {
    if beta.len() != 2 * x.len() {
        return Err(Error::Dimension {
            expected: 2 * x.len(),
            found: beta.len(),
            context: "outcome coefficients",
        });
    }
    if a > 1 {
        return Err(Error::InvalidObservation(format!(
            "treatment must be 0 or 1, got {a}"
        )));
    }
    Ok(outcome.mean(or_linear_predictor(a, x, beta)))
}

/// Packed parameter vector `theta = (alpha, beta, delta)` with the slices
/// present for its family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    spec: ModelSpec,
    theta: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(spec: ModelSpec) -> Self {
        ParameterVector {
            spec,
            theta: vec![0.0; spec.dim()],
        }
    }

    pub fn from_vec(spec: ModelSpec, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != spec.dim() {
            return Err(Error::Dimension {
                expected: spec.dim(),
                found: theta.len(),
                context: "parameter vector",
            });
        }
        Ok(ParameterVector { spec, theta })
    }

    /// Packs slices. `alpha` must be present exactly when the family has a
    /// propensity model, `beta` exactly when it has an outcome model.
    pub fn pack(
        spec: ModelSpec,
        alpha: Option<&[f64]>,
        beta: Option<&[f64]>,
        delta: f64,
    ) -> Result<Self> {
        let mut theta = Vec::with_capacity(spec.dim());
        match (spec.alpha_range(), alpha) {
            (Some(r), Some(a)) if a.len() == r.len() => theta.extend_from_slice(a),
            (None, None) => {}
            (r, a) => {
                return Err(Error::Dimension {
                    expected: r.map_or(0, |r| r.len()),
                    found: a.map_or(0, <[f64]>::len),
                    context: "alpha slice",
                })
            }
        }
        match (spec.beta_range(), beta) {
            (Some(r), Some(b)) if b.len() == r.len() => theta.extend_from_slice(b),
            (None, None) => {}
            (r, b) => {
                return Err(Error::Dimension {
                    expected: r.map_or(0, |r| r.len()),
                    found: b.map_or(0, <[f64]>::len),
                    context: "beta slice",
                })
            }
        }
        theta.push(delta);
        Ok(ParameterVector { spec, theta })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }

    pub fn alpha(&self) -> Option<&[f64]> {
        self.spec.alpha_range().map(|r| &self.theta[r])
    }

    pub fn beta(&self) -> Option<&[f64]> {
        self.spec.beta_range().map(|r| &self.theta[r])
    }

    pub fn delta(&self) -> f64 {
        self.theta[self.spec.delta_index()]
    }
}
