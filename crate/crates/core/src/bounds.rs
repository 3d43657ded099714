//! Lower-bound estimators: the plain ELBO, the importance-weighted bound,
//! their flow and auxiliary-flow variants, and the entropy-annealed training
//! objective.
//!
//! Every estimator consumes a [`Posterior`] description and a seeded
//! generator, so results are pure functions of (model, posterior, x, seed).

use rand::Rng;

use crate::error::Result;
use crate::flows::{flow_sample, FlowPosterior, PosteriorSample};
use crate::model::{encode, log_joint, log_q_ffg, sample_reparam, FfgParams, VaeModel};
use crate::rng::{standard_normal_vec, Prng};

/// Which bound a [`BoundEstimate`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Elbo,
    Iwae,
    FlowElbo,
    AuxElbo,
}

/// A Monte Carlo bound estimate in nats.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BoundEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub std_error: f64,
    pub kind: BoundKind,
}

/// Stable log of the mean of exponentials. Entries of negative infinity are
/// allowed; the result is negative infinity only if all entries are.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "log_mean_exp needs at least one value");
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (sum / values.len() as f64).ln()
}

/// Bootstrap standard error of `log_mean_exp` over the given log weights.
pub fn bootstrap_se_log_mean_exp(log_ws: &[f64], n_boot: usize, rng: &mut Prng) -> f64 {
    if log_ws.len() < 2 {
        return 0.0;
    }
    let mut resampled = vec![0.0; log_ws.len()];
    let mut estimates = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        for slot in &mut resampled {
            *slot = log_ws[rng.gen_range(0..log_ws.len())];
        }
        estimates.push(log_mean_exp(&resampled));
    }
    let mean = estimates.iter().sum::<f64>() / n_boot as f64;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n_boot - 1) as f64;
    var.sqrt()
}

/// Posterior description an estimator can sample from.
#[derive(Debug, Clone, Copy)]
pub enum Posterior<'a> {
    /// Factorized Gaussian from the encoder.
    AmortizedFfg,
    /// Encoder base pushed through a flow (split-latent or auxiliary).
    AmortizedFlow(&'a FlowPosterior),
    /// Locally held base parameters, optionally pushed through a flow.
    Local { base: &'a FfgParams, flow: Option<&'a FlowPosterior> },
}

/// A posterior with its base parameters resolved for one datapoint.
pub struct Realized<'a> {
    pub base: FfgParams,
    pub flow: Option<&'a FlowPosterior>,
}

impl<'a> Posterior<'a> {
    /// Resolves the base parameters (running the encoder once if amortized).
    pub fn realize(&self, model: &VaeModel, x: &[f64]) -> Result<Realized<'a>> {
        Ok(match self {
            Posterior::AmortizedFfg => Realized { base: encode(model, x)?, flow: None },
            Posterior::AmortizedFlow(f) => Realized { base: encode(model, x)?, flow: Some(f) },
            Posterior::Local { base, flow } => Realized { base: (*base).clone(), flow: *flow },
        })
    }

    /// The bound kind an ELBO-style estimate over this posterior reports.
    pub fn bound_kind(&self) -> BoundKind {
        match self {
            Posterior::AmortizedFfg | Posterior::Local { flow: None, .. } => BoundKind::Elbo,
            Posterior::AmortizedFlow(f) | Posterior::Local { flow: Some(f), .. } => {
                if f.is_auxiliary() {
                    BoundKind::AuxElbo
                } else {
                    BoundKind::FlowElbo
                }
            }
        }
    }
}

impl Realized<'_> {
    /// One posterior draw.
    pub fn draw(&self, x: &[f64], rng: &mut Prng) -> Result<PosteriorSample> {
        let n = self.base.dim();
        let eps_z = standard_normal_vec(rng, n);
        match self.flow {
            None => {
                let z = sample_reparam(&self.base, &eps_z);
                let log_q = log_q_ffg(&z, &self.base);
                Ok(PosteriorSample { z, v: None, log_q, log_r: 0.0 })
            }
            Some(f) => {
                let eps_v = if f.is_auxiliary() { Some(standard_normal_vec(rng, n)) } else { None };
                flow_sample(f, &self.base, x, &eps_z, eps_v.as_deref())
            }
        }
    }
}

/// Log importance weight of one draw: `log p(x,z) + (log r - log q)`.
/// For families without a reverse model the `log r` term is zero.
pub fn sample_log_weight(model: &VaeModel, x: &[f64], s: &PosteriorSample) -> Result<f64> {
    Ok(log_joint(model, x, &s.z)? + (s.log_r - s.log_q))
}

/// Draws `n` log weights from the posterior.
pub fn log_weights(
    model: &VaeModel,
    q: &Posterior,
    x: &[f64],
    n: usize,
    rng: &mut Prng,
) -> Result<Vec<f64>> {
    assert!(n >= 1);
    let realized = q.realize(model, x)?;
    let mut ws = Vec::with_capacity(n);
    for _ in 0..n {
        let s = realized.draw(x, rng)?;
        ws.push(sample_log_weight(model, x, &s)?);
    }
    Ok(ws)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo ELBO: mean of `n` log weights, with its standard error.
pub fn elbo(
    model: &VaeModel,
    q: &Posterior,
    x: &[f64],
    n: usize,
    rng: &mut Prng,
) -> Result<BoundEstimate> {
    let ws = log_weights(model, q, x, n, rng)?;
    let (value, std_error) = mean_and_se(&ws);
    Ok(BoundEstimate { value, n_samples: n, std_error, kind: q.bound_kind() })
}

/// Importance-weighted bound: one log-mean-exp over all `k` weights.
/// The standard error is a nonparametric bootstrap over the weights.
pub fn iwae(
    model: &VaeModel,
    q: &Posterior,
    x: &[f64],
    k: usize,
    rng: &mut Prng,
) -> Result<BoundEstimate> {
    let ws = log_weights(model, q, x, k, rng)?;
    let value = log_mean_exp(&ws);
    let std_error = bootstrap_se_log_mean_exp(&ws, 200, rng);
    Ok(BoundEstimate { value, n_samples: k, std_error, kind: BoundKind::Iwae })
}

/// Auxiliary-flow ELBO; the posterior must carry an auxiliary flow.
pub fn aux_elbo(
    model: &VaeModel,
    q: &Posterior,
    x: &[f64],
    n: usize,
    rng: &mut Prng,
) -> Result<BoundEstimate> {
    assert_eq!(q.bound_kind(), BoundKind::AuxElbo, "aux_elbo needs an auxiliary-flow posterior");
    elbo(model, q, x, n, rng)
}

/// Entropy-annealed objective `E[log p(x,z) + lambda*(log r - log q)]`.
/// At lambda = 1 this is the family's bound; at 0 it is `E[log p(x,z)]`.
pub fn annealed_objective(
    model: &VaeModel,
    q: &Posterior,
    x: &[f64],
    n: usize,
    lambda: f64,
    rng: &mut Prng,
) -> Result<f64> {
    assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    assert!(n >= 1);
    let realized = q.realize(model, x)?;
    let mut total = 0.0;
    for _ in 0..n {
        let s = realized.draw(x, rng)?;
        total += log_joint(model, x, &s.z)? + lambda * (s.log_r - s.log_q);
    }
    Ok(total / n as f64)
}
