//! Data-generating process for the simulation studies.
//!
//! `X ~ MVN(0, V)` with compound-symmetry `V`, `A | X ~ Bernoulli(expit((1, X) alpha))`
//! and `Y | A, X` Gaussian with unit variance (or Bernoulli under a logistic
//! link) around `h(A, X) beta`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{expit, or_linear_predictor, DataBatch, OutcomeType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StreamBias {
    /// Batches are independent random samples.
    None,
    /// The pooled sample is sorted on the first covariate before chunking.
    CovariateSorted,
}

/// How the true coefficients are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaDraw {
    /// Fresh standard-normal draw in every replication.
    PerReplication,
    /// One standard-normal draw from this seed, shared by all replications.
    Fixed { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    /// Non-intercept covariates; the model dimension is `p = p_covariates + 1`.
    pub p_covariates: usize,
    /// Compound-symmetry correlation.
    pub rho: f64,
    pub outcome: OutcomeType,
    pub replications: usize,
    pub seed: u64,
    pub stream_bias: StreamBias,
    pub theta_draw: ThetaDraw,
    /// Multiplier applied to the standard-normal coefficient draw.
    pub coefficient_scale: f64,
    /// Overrides the main treatment coefficient `beta_A` after the draw.
    pub treatment_effect: Option<f64>,
    /// Monte Carlo draws used for the binary-outcome true effect.
    pub truth_draws: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_batches: 100,
            batch_size: 100,
            p_covariates: 1,
            rho: 0.5,
            outcome: OutcomeType::Continuous,
            replications: 500,
            seed: 20_211_005,
            stream_bias: StreamBias::None,
            theta_draw: ThetaDraw::PerReplication,
            coefficient_scale: 1.0,
            treatment_effect: None,
            truth_draws: 1_000_000,
        }
    }
}

impl SimConfig {
    /// Defaults for a binary outcome, with coefficients halved.
    pub fn binary() -> Self {
        SimConfig {
            outcome: OutcomeType::Binary,
            coefficient_scale: 0.5,
            ..SimConfig::default()
        }
    }

    pub fn p(&self) -> usize {
        self.p_covariates + 1
    }

    pub fn total_n(&self) -> usize {
        self.n_batches * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if self.n_batches == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_batches and batch_size must be positive".into(),
            ));
        }
        if !(self.coefficient_scale.is_finite() && self.coefficient_scale >= 0.0) {
            return Err(Error::Config(
                "coefficient_scale must be finite and nonnegative".into(),
            ));
        }
        if self.outcome == OutcomeType::Binary && self.treatment_effect.is_some() {
            return Err(Error::Config(
                "a treatment-effect override is only defined for continuous outcomes".into(),
            ));
        }
        Ok(())
    }

    /// Lower Cholesky factor of the compound-symmetry covariance.
    pub fn covariance_factor(&self) -> Result<DMatrix<f64>> {
        let q = self.p_covariates;
        let v = DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { self.rho });
        v.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Config("covariance matrix is not positive definite".into()))
    }

    /// Deterministic generator for replication `rep` (and sub-stream `lane`).
    pub fn rng(&self, rep: u64, lane: u64) -> ChaCha8Rng {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(rep);
        rng
    }
}

/// True propensity and outcome coefficients in the model's layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    /// Length `p`.
    pub alpha: Vec<f64>,
    /// Length `2p`, ordered `(x, a * x)`; `beta[p]` is the main treatment effect.
    pub beta: Vec<f64>,
}

impl TrueParams {
    pub fn draw<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Self {
        let p = config.p();
        let mut normal = || config.coefficient_scale * rng.sample::<f64, _>(StandardNormal);
        let alpha: Vec<f64> = (0..p).map(|_| normal()).collect();
        let mut beta: Vec<f64> = (0..2 * p).map(|_| normal()).collect();
        if let Some(effect) = config.treatment_effect {
            beta[p] = effect;
        }
        TrueParams { alpha, beta }
    }

    /// Coefficients for replication `rep` according to `config.theta_draw`.
    pub fn for_replication<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Self {
        match config.theta_draw {
            ThetaDraw::PerReplication => Self::draw(config, rng),
            ThetaDraw::Fixed { seed } => Self::draw(config, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

/// Covariate sampler with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Generator {
    config: SimConfig,
    params: TrueParams,
    chol: DMatrix<f64>,
}

impl Generator {
    pub fn new(config: &SimConfig, params: TrueParams) -> Result<Self> {
        config.validate()?;
        let p = config.p();
        if params.alpha.len() != p || params.beta.len() != 2 * p {
            return Err(Error::Dimension {
                expected: p,
                found: params.alpha.len(),
                context: "true coefficients",
            });
        }
        Ok(Generator {
            config: config.clone(),
            params,
            chol: config.covariance_factor()?,
        })
    }

    pub fn params(&self) -> &TrueParams {
        &self.params
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Fills `x[1..]` with one covariate draw.
    pub fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64], z: &mut [f64]) {
        let q = self.config.p_covariates;
        x[0] = 1.0;
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..q {
            let mut v = 0.0;
            for j in 0..=i {
                v += self.chol[(i, j)] * z[j];
            }
            x[i + 1] = v;
        }
    }

    /// Draws `n` observations into a new batch.
    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, index: u64, n: usize) -> DataBatch {
        let p = self.config.p();
        let mut batch = DataBatch::with_capacity(index, p, n);
        let mut x = vec![0.0; p];
        let mut z = vec![0.0; self.config.p_covariates];
        for _ in 0..n {
            self.draw_covariates(rng, &mut x, &mut z);
            let e = expit(x.iter().zip(&self.params.alpha).map(|(a, b)| a * b).sum());
            let a = u8::from(rng.random::<f64>() < e);
            let eta = or_linear_predictor(a, &x, &self.params.beta);
            let y = match self.config.outcome {
                OutcomeType::Continuous => eta + rng.sample::<f64, _>(StandardNormal),
                OutcomeType::Binary => f64::from(u8::from(rng.random::<f64>() < expit(eta))),
            };
            batch.push_unchecked(y, a, &x);
        }
        batch
    }

    /// One batch of the configured size.
    pub fn generate_batch<R: Rng + ?Sized>(&self, rng: &mut R, index: u64) -> DataBatch {
        self.batch(rng, index, self.config.batch_size)
    }

    /// The full stream of `n_batches` batches, indexed from 1.
    pub fn make_stream<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DataBatch> {
        let stream: Vec<DataBatch> = (1..=self.config.n_batches as u64)
            .map(|j| self.generate_batch(rng, j))
            .collect();
        match self.config.stream_bias {
            StreamBias::None => stream,
            StreamBias::CovariateSorted => sort_stream(&stream, self.config.batch_size),
        }
    }

    /// True average treatment effect and its Monte Carlo standard error
    /// (zero when exact).
    pub fn true_ate<R: Rng + ?Sized>(&self, rng: &mut R) -> TrueAte {
        true_ate(&self.params, &self.config, rng, &self.chol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueAte {
    pub value: f64,
    pub mc_se: f64,
}

/// Continuous outcomes with mean-zero covariates: the effect is `beta_A`.
/// Binary outcomes integrate `expit(h(1,x) beta) - expit(h(0,x) beta)` over
/// the covariate law by Monte Carlo.
pub fn true_ate<R: Rng + ?Sized>(
    params: &TrueParams,
    config: &SimConfig,
    rng: &mut R,
    chol: &DMatrix<f64>,
) -> TrueAte {
    let p = config.p();
    match config.outcome {
        OutcomeType::Continuous => TrueAte {
            value: params.beta[p],
            mc_se: 0.0,
        },
        OutcomeType::Binary => {
            let interactions_free = params.beta[1..p].iter().all(|b| *b == 0.0)
                && params.beta[p + 1..].iter().all(|b| *b == 0.0);
            if p == 1 || interactions_free {
                let b0 = params.beta[0];
                return TrueAte {
                    value: expit(b0 + params.beta[p]) - expit(b0),
                    mc_se: 0.0,
                };
            }
            let gen = Generator {
                config: config.clone(),
                params: params.clone(),
                chol: chol.clone(),
            };
            let n = config.truth_draws.max(2);
            let mut x = vec![0.0; p];
            let mut z = vec![0.0; config.p_covariates];
            let (mut sum, mut sumsq) = (0.0, 0.0);
            for _ in 0..n {
                gen.draw_covariates(rng, &mut x, &mut z);
                let d = expit(or_linear_predictor(1, &x, &params.beta))
                    - expit(or_linear_predictor(0, &x, &params.beta));
                sum += d;
                sumsq += d * d;
            }
            let nf = n as f64;
            let mean = sum / nf;
            let var = (sumsq - nf * mean * mean) / (nf - 1.0);
            TrueAte {
                value: mean,
                mc_se: (var.max(0.0) / nf).sqrt(),
            }
        }
    }
}

/// Re-chunks the pooled stream after sorting on the first non-intercept
/// covariate (intercept-only data is left in its original order).
pub fn sort_stream(stream: &[DataBatch], batch_size: usize) -> Vec<DataBatch> {
    let Some(first) = stream.first() else {
        return Vec::new();
    };
    let p = first.p();
    let mut rows: Vec<_> = stream.iter().flat_map(|b| b.iter()).collect();
    if p > 1 {
        rows.sort_by(|a, b| a.x[1].total_cmp(&b.x[1]));
    }
    rows.chunks(batch_size)
        .enumerate()
        .map(|(j, chunk)| {
            let mut batch = DataBatch::with_capacity(j as u64 + 1, p, chunk.len());
            for obs in chunk {
                batch.push_unchecked(obs.y, obs.a, obs.x);
            }
            batch
        })
        .collect()
}
