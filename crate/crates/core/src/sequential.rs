//! Group-sequential monitoring of the treatment effect.
//!
//! Interim Wald statistics are monitored against two-sided boundaries derived
//! from an alpha-spending function. Boundaries follow the canonical joint law
//! of interim statistics, `Cov(Z_j, Z_k) = sqrt(t_j / t_k)` for `j <= k`, and
//! are found stage by stage: the continuation sub-density of `Z_{k-1}` is
//! carried on a Simpson grid over `(-z(k-1), z(k-1))`, the crossing
//! probability at stage `k` is integrated against it in closed form, and
//! `z(k)` is bisected until that probability equals the alpha spent at `k`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::engine::OnlineState;
use crate::error::{Error, Result};

/// Minimum number of grid points per stage (odd, for Simpson's rule).
const GRID_POINTS: usize = 513;
/// Bisection stops when the crossing probability is this close to target.
const PROB_TOL: f64 = 1e-12;
/// Boundaries are capped here; a stage spending no alpha gets this value.
pub const MAX_BOUNDARY: f64 = 40.0;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Spending {
    /// `alpha * ln(1 + (e - 1) t)`
    Pocock,
    /// `2 (1 - Phi(z_{1 - alpha/2} / sqrt(t)))`
    ObrienFleming,
}

impl std::str::FromStr for Spending {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '\''], "_").as_str() {
            "pocock" => Ok(Spending::Pocock),
            "obf" | "obrien_fleming" | "o_brien_fleming" | "obrienfleming" => {
                Ok(Spending::ObrienFleming)
            }
            other => Err(Error::Config(format!(
                "unknown spending function `{other}`"
            ))),
        }
    }
}

impl Spending {
    /// Cumulative alpha spent at information fraction `t` in `(0, 1]`.
    pub fn spent(self, t: f64, alpha: f64) -> f64 {
        if t >= 1.0 {
            return alpha;
        }
        match self {
            Spending::Pocock => alpha * (1.0 + (std::f64::consts::E - 1.0) * t).ln(),
            Spending::ObrienFleming => {
                2.0 * normal_sf(normal_quantile(1.0 - alpha / 2.0) / t.sqrt())
            }
        }
    }
}

/// Cumulative alpha spent through analysis `t` of `total` (equally spaced).
pub fn spending_value(spending: Spending, t: usize, total: usize, alpha: f64) -> f64 {
    if t >= total {
        return alpha;
    }
    spending.spent(t as f64 / total as f64, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub total_analyses: usize,
    /// Overall two-sided type I error.
    pub alpha: f64,
    pub spending: Spending,
    pub null_delta: f64,
    /// Information fractions `t_1 < ... < t_T = 1`.
    pub info_fractions: Vec<f64>,
}

impl MonitorConfig {
    /// Equally spaced analyses.
    pub fn new(total_analyses: usize, alpha: f64, spending: Spending) -> Result<Self> {
        let info_fractions = (1..=total_analyses)
            .map(|k| {
                if k == total_analyses {
                    1.0
                } else {
                    k as f64 / total_analyses as f64
                }
            })
            .collect();
        let config = MonitorConfig {
            total_analyses,
            alpha,
            spending,
            null_delta: 0.0,
            info_fractions,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_null(mut self, null_delta: f64) -> Self {
        self.null_delta = null_delta;
        self
    }

    /// Information fractions from planned or realized cumulative sample sizes.
    pub fn with_sample_sizes(mut self, cumulative: &[u64]) -> Result<Self> {
        let last = *cumulative
            .last()
            .ok_or_else(|| Error::Config("no sample sizes given".into()))?
            as f64;
        self.info_fractions = cumulative.iter().map(|&n| n as f64 / last).collect();
        self.total_analyses = cumulative.len();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_analyses == 0 {
            return Err(Error::Config("at least one analysis required".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !self.null_delta.is_finite() {
            return Err(Error::Config("null value must be finite".into()));
        }
        let t = &self.info_fractions;
        if t.len() != self.total_analyses {
            return Err(Error::Config(format!(
                "{} information fractions for {} analyses",
                t.len(),
                self.total_analyses
            )));
        }
        if t[0] <= 0.0 || t.windows(2).any(|w| w[1] <= w[0]) || t[t.len() - 1] != 1.0 {
            return Err(Error::Config(
                "information fractions must be strictly increasing in (0, 1] and end at 1".into(),
            ));
        }
        Ok(())
    }

    /// Cumulative alpha spent at each analysis.
    pub fn cumulative_alpha(&self) -> Vec<f64> {
        self.info_fractions
            .iter()
            .map(|&t| self.spending.spent(t, self.alpha))
            .collect()
    }
}

/// Continuation sub-density of the current stage on a Simpson grid.
struct Stage {
    z: Vec<f64>,
    /// density times Simpson weight
    mass: Vec<f64>,
}

impl Stage {
    fn grid(c: f64, min_spacing: f64) -> (Vec<f64>, Vec<f64>) {
        let mut n = GRID_POINTS.max((2.0 * c / min_spacing).ceil() as usize + 1);
        if n.is_multiple_of(2) {
            n += 1;
        }
        let h = 2.0 * c / (n - 1) as f64;
        let z = (0..n).map(|i| -c + i as f64 * h).collect();
        let w = (0..n)
            .map(|i| {
                let k = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                k * h / 3.0
            })
            .collect();
        (z, w)
    }

    fn first(c: f64) -> Stage {
        let (z, w) = Self::grid(c, f64::INFINITY);
        let mass = z.iter().zip(&w).map(|(z, w)| w * normal_pdf(*z)).collect();
        Stage { z, mass }
    }

    /// `P(|Z_next| >= c, no earlier crossing)` given the transition
    /// `Z_next | z ~ N(r z, s^2)`.
    fn crossing(&self, c: f64, r: f64, s: f64) -> f64 {
        self.z
            .iter()
            .zip(&self.mass)
            .map(|(z, m)| m * (normal_cdf((-c - r * z) / s) + normal_sf((c - r * z) / s)))
            .sum()
    }

    fn advance(&self, c: f64, r: f64, s: f64) -> Stage {
        let (z, w) = Self::grid(c, s / 8.0);
        let mass = z
            .iter()
            .zip(&w)
            .map(|(zn, wn)| {
                let dens: f64 = self
                    .z
                    .iter()
                    .zip(&self.mass)
                    .map(|(zp, m)| m * normal_pdf((zn - r * zp) / s))
                    .sum::<f64>()
                    / s;
                wn * dens
            })
            .collect();
        Stage { z, mass }
    }
}

/// Two-sided boundaries `z(1..T)` matching the cumulative spent alpha.
pub fn compute_boundaries(config: &MonitorConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let spent = config.cumulative_alpha();
    if spent.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || spent.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::Config(format!(
            "spent alpha is not monotone: {spent:?}"
        )));
    }
    let t = &config.info_fractions;
    let mut bounds = Vec::with_capacity(t.len());

    let c1 = if spent[0] > 0.0 {
        normal_quantile(1.0 - spent[0] / 2.0).min(MAX_BOUNDARY)
    } else {
        MAX_BOUNDARY
    };
    bounds.push(c1);
    let mut stage = Stage::first(c1);

    for k in 1..t.len() {
        let target = spent[k] - spent[k - 1];
        let r = (t[k - 1] / t[k]).sqrt();
        let s = ((t[k] - t[k - 1]) / t[k]).sqrt();
        let c = if target <= stage.crossing(MAX_BOUNDARY, r, s) {
            MAX_BOUNDARY
        } else {
            let (mut lo, mut hi) = (0.0, MAX_BOUNDARY);
            // crossing probability decreases in c
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let prob = stage.crossing(mid, r, s);
                if (prob - target).abs() <= PROB_TOL {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if prob > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-13 {
                    break;
                }
            }
            0.5 * (lo + hi)
        };
        bounds.push(c);
        if k + 1 < t.len() {
            stage = stage.advance(c, r, s);
        }
    }
    Ok(bounds)
}

/// `(delta - delta0) / se` from the engine's current estimate.
pub fn wald_stat(state: &OnlineState, null_delta: f64) -> Result<f64> {
    let est = state.ate_estimate()?;
    if !(est.se > 0.0) || !est.se.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok((est.delta - null_delta) / est.se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Continue,
    Reject,
    CompleteAccept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    pub config: MonitorConfig,
    pub analyses_done: usize,
    pub z_history: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub decision: Decision,
}

impl MonitorState {
    pub fn new(config: MonitorConfig) -> Result<Self> {
        let boundaries = compute_boundaries(&config)?;
        Ok(MonitorState {
            config,
            analyses_done: 0,
            z_history: Vec::new(),
            boundaries,
            decision: Decision::Continue,
        })
    }

    /// Boundary for the next analysis, if any remain.
    pub fn next_boundary(&self) -> Option<f64> {
        self.boundaries.get(self.analyses_done).copied()
    }

    /// Records one interim statistic and updates the decision.
    pub fn observe(&mut self, z: f64) -> Result<Decision> {
        if self.decision != Decision::Continue {
            return Err(Error::MonitorTerminated(self.decision));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("wald statistic"));
        }
        let bound = self.boundaries[self.analyses_done];
        self.z_history.push(z);
        self.analyses_done += 1;
        self.decision = if z.abs() >= bound {
            Decision::Reject
        } else if self.analyses_done == self.config.total_analyses {
            Decision::CompleteAccept
        } else {
            Decision::Continue
        };
        Ok(self.decision)
    }

    /// One interim analysis on the engine's current estimate.
    pub fn step(&self, engine: &OnlineState) -> Result<MonitorState> {
        if self.decision != Decision::Continue {
            return Err(Error::MonitorTerminated(self.decision));
        }
        let z = wald_stat(engine, self.config.null_delta)?;
        let mut next = self.clone();
        next.observe(z)?;
        Ok(next)
    }
}

/// Functional form of [`MonitorState::step`].
pub fn monitor_step(monitor: &MonitorState, engine: &OnlineState) -> Result<MonitorState> {
    monitor.step(engine)
}
