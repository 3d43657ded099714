//! Annealed importance sampling over geometric intermediate distributions,
//! with Hamiltonian Monte Carlo transitions and a bidirectional (sandwich)
//! validation mode on simulated data.
//!
//! The intermediate targets are `f_t(z) = p(z) p(x|z)^{beta_t}`; chains start
//! at the prior, so the estimate never touches the encoder. Backward chains
//! run the reversed schedule from an exact posterior sample and turn the same
//! recursion into a stochastic upper bound.

use rand::Rng;
use rayon::prelude::*;

use crate::bounds::log_mean_exp;
use crate::error::{Error, Result};
use crate::model::{
    grad_log_likelihood, log_likelihood, log_prior, sample_observation, VaeModel,
};
use crate::rng::{derive_rng, standard_normal_vec, Prng};

/// Target Metropolis acceptance probability for step-size adaptation.
pub const TARGET_ACCEPTANCE: f64 = 0.65;
/// Multiplicative adaptation gain per transition.
const ADAPT_GAIN: f64 = 0.05;
/// Fraction of the schedule during which the step size may adapt.
const ADAPT_FRACTION: f64 = 0.2;
/// Step-size bounds.
const STEP_MIN: f64 = 1e-6;
const STEP_MAX: f64 = 1.0;
/// Default initial leapfrog step size.
pub const DEFAULT_INIT_STEP: f64 = 0.1;
/// Chains are abandoned and counted as failed beyond this fraction.
const MAX_DROP_FRACTION: f64 = 0.1;

/// How the inverse temperatures are spaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Sigmoid,
}

/// Monotone inverse-temperature schedule from 0 to 1.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub kind: ScheduleKind,
}

impl Schedule {
    /// Evenly spaced betas over `[0, 1]`.
    pub fn linear(t: usize) -> Self {
        assert!(t >= 2, "a schedule needs at least its two endpoints");
        let betas = (0..t).map(|i| i as f64 / (t - 1) as f64).collect();
        Schedule { betas, kind: ScheduleKind::Linear }
    }

    /// Logistic ramp over `[-4, 4]`, normalized so the endpoints are exact.
    pub fn sigmoid(t: usize) -> Self {
        assert!(t >= 2, "a schedule needs at least its two endpoints");
        let raw: Vec<f64> = (0..t)
            .map(|i| {
                let u = -4.0 + 8.0 * i as f64 / (t - 1) as f64;
                1.0 / (1.0 + (-u).exp())
            })
            .collect();
        let (lo, hi) = (raw[0], raw[t - 1]);
        let betas = raw.iter().map(|r| (r - lo) / (hi - lo)).collect();
        Schedule { betas, kind: ScheduleKind::Sigmoid }
    }

    /// Checks the endpoint and monotonicity contract.
    pub fn validate(&self) -> Result<()> {
        let b = &self.betas;
        if b.len() < 2 || b[0] != 0.0 || *b.last().unwrap() != 1.0 {
            return Err(Error::Config("schedule must run from exactly 0 to exactly 1".into()));
        }
        if b.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("schedule betas must be non-decreasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// Settings bundle for annealed estimation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AisConfig {
    pub schedule_kind: ScheduleKind,
    pub n_intermediate: usize,
    pub n_chains: usize,
    pub n_leapfrog: usize,
}

impl AisConfig {
    /// Quick defaults: 16 chains over 1000 intermediate distributions.
    pub fn desk() -> Self {
        AisConfig {
            schedule_kind: ScheduleKind::Linear,
            n_intermediate: 1000,
            n_chains: 16,
            n_leapfrog: 10,
        }
    }

    /// Full-size run: 100 chains over 10000 intermediate distributions.
    pub fn paper_scale() -> Self {
        AisConfig { n_intermediate: 10_000, n_chains: 100, ..AisConfig::desk() }
    }

    pub fn build_schedule(&self) -> Schedule {
        match self.schedule_kind {
            ScheduleKind::Linear => Schedule::linear(self.n_intermediate),
            ScheduleKind::Sigmoid => Schedule::sigmoid(self.n_intermediate),
        }
    }
}

/// Log of the unnormalized intermediate target `p(z) p(x|z)^beta`.
pub fn intermediate_log_f(model: &VaeModel, x: &[f64], z: &[f64], beta: f64) -> Result<f64> {
    assert!((0.0..=1.0).contains(&beta));
    Ok(log_prior(z) + beta * log_likelihood(model, x, z)?)
}

/// Intermediate target with its gradient w.r.t. `z`.
pub fn grad_intermediate_log_f(
    model: &VaeModel,
    x: &[f64],
    z: &[f64],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    assert!((0.0..=1.0).contains(&beta));
    let (ll, g_ll) = grad_log_likelihood(model, x, z)?;
    let grad = z.iter().zip(&g_ll).map(|(zi, g)| -zi + beta * g).collect();
    Ok((log_prior(z) + beta * ll, grad))
}

/// Outcome of one Hamiltonian transition.
#[derive(Debug, Clone)]
pub struct HmcOutcome {
    pub z: Vec<f64>,
    pub accepted: bool,
    /// Metropolis acceptance probability (used for step-size adaptation).
    pub accept_prob: f64,
}

/// Leapfrog integration of the Hamiltonian `-log f(z) + |p|^2 / 2`.
///
/// Returns the final position, momentum, and target value, or `None` if the
/// target failed or went non-finite anywhere along the trajectory.
pub fn leapfrog<F>(
    log_f: &F,
    z0: &[f64],
    p0: &[f64],
    step: f64,
    n_steps: usize,
) -> Option<(Vec<f64>, Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut z = z0.to_vec();
    let mut p = p0.to_vec();
    let (_, mut grad) = log_f(&z).ok()?;
    for _ in 0..n_steps {
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step * gi;
        }
        for (zi, pi) in z.iter_mut().zip(&p) {
            *zi += step * pi;
        }
        let (value, g) = log_f(&z).ok()?;
        grad = g;
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * step * gi;
        }
        if !value.is_finite() || p.iter().any(|v| !v.is_finite()) {
            return None;
        }
    }
    let (value, _) = log_f(&z).ok()?;
    Some((z, p, value))
}

/// One HMC transition targeting the unnormalized density `log_f`.
///
/// Momentum is standard normal; any numerical failure along the trajectory is
/// treated as a rejection so a chain can never crash.
pub fn hmc_transition<F>(
    log_f: &F,
    z: &[f64],
    step: f64,
    n_leapfrog: usize,
    rng: &mut Prng,
) -> HmcOutcome
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    assert!(step > 0.0 && n_leapfrog >= 1);
    let p0 = standard_normal_vec(rng, z.len());
    let value0 = match log_f(z) {
        Ok((v, _)) if v.is_finite() => v,
        _ => return HmcOutcome { z: z.to_vec(), accepted: false, accept_prob: 0.0 },
    };
    let h0 = -value0 + 0.5 * p0.iter().map(|p| p * p).sum::<f64>();
    let Some((z1, p1, value1)) = leapfrog(log_f, z, &p0, step, n_leapfrog) else {
        return HmcOutcome { z: z.to_vec(), accepted: false, accept_prob: 0.0 };
    };
    let h1 = -value1 + 0.5 * p1.iter().map(|p| p * p).sum::<f64>();
    if !h1.is_finite() {
        return HmcOutcome { z: z.to_vec(), accepted: false, accept_prob: 0.0 };
    }
    let accept_prob = (h0 - h1).exp().min(1.0);
    let accepted = rng.gen::<f64>() < accept_prob;
    HmcOutcome { z: if accepted { z1 } else { z.to_vec() }, accepted, accept_prob }
}

/// Multiplicative step-size controller aiming at [`TARGET_ACCEPTANCE`].
#[derive(Debug, Clone)]
pub struct StepSizeAdapter {
    pub step: f64,
    pub frozen: bool,
}

impl StepSizeAdapter {
    pub fn new(init: f64) -> Self {
        StepSizeAdapter { step: init.clamp(STEP_MIN, STEP_MAX), frozen: false }
    }

    /// Nudges the step toward the target acceptance; no-op once frozen.
    pub fn observe(&mut self, accept_prob: f64) {
        if self.frozen {
            return;
        }
        self.step =
            (self.step * (ADAPT_GAIN * (accept_prob - TARGET_ACCEPTANCE)).exp()).clamp(STEP_MIN, STEP_MAX);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// Which way the annealing ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Aggregate of an annealed run over several chains.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AisResult {
    /// Forward: stochastic lower bound on log p(x). Backward: upper bound.
    pub log_marginal_bound: f64,
    pub log_weights: Vec<f64>,
    pub mean_acceptance: f64,
    pub direction: Direction,
    /// Chains abandoned for numerical failure.
    pub n_dropped: usize,
}

/// Runs the annealed weight recursion over an arbitrary beta sequence,
/// delegating the move after each weight update to `transition(z, beta)`.
///
/// The weight picks up `(beta_t - beta_{t-1}) * log p(x | z_{t-1})` before
/// each move, so a transition that never moves telescopes the likelihood.
pub fn run_weight_recursion(
    model: &VaeModel,
    x: &[f64],
    betas: &[f64],
    z_init: Vec<f64>,
    transition: &mut dyn FnMut(&mut Vec<f64>, f64) -> Result<()>,
) -> Result<(f64, Vec<f64>)> {
    let mut z = z_init;
    let mut log_w = 0.0;
    for t in 1..betas.len() {
        let delta = betas[t] - betas[t - 1];
        if delta != 0.0 {
            log_w += delta * log_likelihood(model, x, &z)?;
        }
        if !log_w.is_finite() {
            return Err(Error::Numerical(format!("chain weight diverged at step {t}")));
        }
        transition(&mut z, betas[t])?;
    }
    Ok((log_w, z))
}

struct ChainOutcome {
    log_w: f64,
    acceptance_sum: f64,
    n_transitions: usize,
}

/// One full annealed chain with adaptive HMC transitions.
fn run_chain(
    model: &VaeModel,
    x: &[f64],
    betas: &[f64],
    z_init: Vec<f64>,
    n_leapfrog: usize,
    rng: &mut Prng,
) -> Result<ChainOutcome> {
    let freeze_after = ((betas.len() as f64) * ADAPT_FRACTION) as usize;
    let mut adapter = StepSizeAdapter::new(DEFAULT_INIT_STEP);
    let mut acceptance_sum = 0.0;
    let mut n_transitions = 0usize;
    let mut t = 0usize;
    let mut chain_rng = rng.clone();
    let (log_w, _) = run_weight_recursion(model, x, betas, z_init, &mut |z, beta| {
        t += 1;
        if t > freeze_after {
            adapter.freeze();
        }
        let target = |zz: &[f64]| grad_intermediate_log_f(model, x, zz, beta);
        let out = hmc_transition(&target, z, adapter.step, n_leapfrog, &mut chain_rng);
        adapter.observe(out.accept_prob);
        acceptance_sum += out.accept_prob;
        n_transitions += 1;
        *z = out.z;
        Ok(())
    })?;
    Ok(ChainOutcome { log_w, acceptance_sum, n_transitions })
}

fn aggregate_chains(
    outcomes: Vec<Result<ChainOutcome>>,
    n_chains: usize,
    direction: Direction,
) -> Result<AisResult> {
    let mut log_weights = Vec::with_capacity(n_chains);
    let mut acceptance_sum = 0.0;
    let mut n_transitions = 0usize;
    let mut n_dropped = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(c) => {
                log_weights.push(c.log_w);
                acceptance_sum += c.acceptance_sum;
                n_transitions += c.n_transitions;
            }
            Err(_) => n_dropped += 1,
        }
    }
    if (n_dropped as f64) > MAX_DROP_FRACTION * n_chains as f64 {
        return Err(Error::Numerical(format!(
            "{n_dropped} of {n_chains} annealed chains diverged"
        )));
    }
    let lme = log_mean_exp(&log_weights);
    Ok(AisResult {
        log_marginal_bound: match direction {
            Direction::Forward => lme,
            Direction::Backward => -lme,
        },
        log_weights,
        mean_acceptance: if n_transitions == 0 {
            1.0
        } else {
            acceptance_sum / n_transitions as f64
        },
        direction,
        n_dropped,
    })
}

/// Forward annealed estimate of log p(x): chains start at the prior and heat
/// the likelihood in; the bound is the log-mean of the chain weights.
pub fn ais_forward(
    model: &VaeModel,
    x: &[f64],
    schedule: &Schedule,
    n_chains: usize,
    n_leapfrog: usize,
    rng: &mut Prng,
) -> Result<AisResult> {
    assert!(n_chains >= 1);
    schedule.validate()?;
    let master: u64 = rng.gen();
    let outcomes: Vec<Result<ChainOutcome>> = (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let mut chain_rng = derive_rng(master, "ais-chain", i as u64);
            let z0 = standard_normal_vec(&mut chain_rng, model.latent_dim);
            run_chain(model, x, &schedule.betas, z0, n_leapfrog, &mut chain_rng)
        })
        .collect();
    aggregate_chains(outcomes, n_chains, Direction::Forward)
}

/// Backward annealed run from an exact posterior sample `z_star` of `x`:
/// the reversed schedule cools the likelihood out, giving an upper bound
/// `-log_mean_exp(weights)` on log p(x).
pub fn ais_backward(
    model: &VaeModel,
    x: &[f64],
    z_star: &[f64],
    schedule: &Schedule,
    n_chains: usize,
    n_leapfrog: usize,
    rng: &mut Prng,
) -> Result<AisResult> {
    assert!(n_chains >= 1);
    schedule.validate()?;
    let reversed: Vec<f64> = schedule.betas.iter().rev().cloned().collect();
    let master: u64 = rng.gen();
    let outcomes: Vec<Result<ChainOutcome>> = (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let mut chain_rng = derive_rng(master, "ais-back-chain", i as u64);
            run_chain(model, x, &reversed, z_star.to_vec(), n_leapfrog, &mut chain_rng)
        })
        .collect();
    aggregate_chains(outcomes, n_chains, Direction::Backward)
}

/// Sandwich estimate on one simulated datapoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BdmcPoint {
    pub lower: f64,
    pub upper: f64,
}

/// Bidirectional validation result, averaged over simulated datapoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BdmcResult {
    pub lower: f64,
    pub upper: f64,
    /// Mean of `upper - lower`; nonnegative in expectation.
    pub gap: f64,
    pub per_point: Vec<BdmcPoint>,
}

/// Bidirectional Monte Carlo on data simulated from the model itself.
///
/// Each point draws `(z*, x*) ~ p(z) p(x|z)`; the forward run lower-bounds
/// log p(x*), and backward chains from `z*` (sharing it, with independent
/// momenta) upper-bound it. The gap brackets the annealing error.
pub fn bdmc(
    model: &VaeModel,
    n_sim: usize,
    schedule: &Schedule,
    n_chains: usize,
    n_leapfrog: usize,
    rng: &mut Prng,
) -> Result<BdmcResult> {
    assert!(n_sim >= 1);
    schedule.validate()?;
    let master: u64 = rng.gen();
    let per_point: Vec<Result<BdmcPoint>> = (0..n_sim)
        .into_par_iter()
        .map(|i| {
            let mut point_rng = derive_rng(master, "bdmc-point", i as u64);
            let z_star = standard_normal_vec(&mut point_rng, model.latent_dim);
            let x_star = sample_observation(model, &z_star, &mut point_rng)?;
            let fwd =
                ais_forward(model, &x_star, schedule, n_chains, n_leapfrog, &mut point_rng)?;
            let bwd = ais_backward(
                model,
                &x_star,
                &z_star,
                schedule,
                n_chains,
                n_leapfrog,
                &mut point_rng,
            )?;
            Ok(BdmcPoint { lower: fwd.log_marginal_bound, upper: bwd.log_marginal_bound })
        })
        .collect();
    let per_point: Result<Vec<BdmcPoint>> = per_point.into_iter().collect();
    let per_point = per_point?;
    let n = per_point.len() as f64;
    let lower = per_point.iter().map(|p| p.lower).sum::<f64>() / n;
    let upper = per_point.iter().map(|p| p.upper).sum::<f64>() / n;
    Ok(BdmcResult { lower, upper, gap: upper - lower, per_point })
}
