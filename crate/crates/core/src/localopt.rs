//! Per-datapoint optimization of variational parameters, run with the
//! decoder frozen. The optimized bound separates what the family could
//! achieve from what the amortized encoder actually delivers.
//!
//! Parameters are a locally owned copy per datapoint: a factorized-Gaussian
//! base initialized at the prior, plus (for flow families) coupling and
//! reverse nets initialized by Xavier draws. Nothing aliases the encoder.

use rand::Rng;

use crate::bounds::{elbo, BoundEstimate, Posterior};
use crate::diffnet::{Activation, AdamHyper, AdamState, Mlp};
use crate::error::{Error, Result};
use crate::flows::{CouplingStep, FlowKind, FlowPosterior, ReverseConditioning, VBase};
use crate::model::{FfgParams, VaeModel};
use crate::objective::annealed_grad;
use crate::rng::{derive_rng, Prng};

/// Variational family optimized per datapoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ffg,
    Flow,
    AuxFlow,
}

/// Locally owned variational parameters for one datapoint.
#[derive(Debug, Clone)]
pub struct LocalQ {
    pub family: Family,
    pub base: FfgParams,
    pub flow: Option<FlowPosterior>,
}

impl LocalQ {
    /// Fresh parameters: base at the prior, coupling steps near the identity
    /// (Xavier hidden layers, zero last layers), so the flow families start
    /// exactly where the diagonal family does and can only move up from it.
    pub fn init(family: Family, model: &VaeModel, cfg: &LocalOptConfig, rng: &mut Prng) -> Result<Self> {
        let dim = model.latent_dim;
        let base = FfgParams::standard(dim);
        let flow = match family {
            Family::Ffg => None,
            Family::Flow => {
                if dim % 2 != 0 {
                    return Err(Error::Config(
                        "split-latent local flow needs an even latent dimension".into(),
                    ));
                }
                let steps = (0..cfg.n_flow_steps)
                    .map(|_| {
                        CouplingStep::near_identity(dim / 2, &cfg.flow_hidden, Activation::Elu, rng)
                    })
                    .collect();
                Some(FlowPosterior { steps, kind: FlowKind::SplitLatent })
            }
            Family::AuxFlow => {
                let steps = (0..cfg.n_flow_steps)
                    .map(|_| CouplingStep::near_identity(dim, &cfg.flow_hidden, Activation::Elu, rng))
                    .collect();
                let mut reverse_dims = vec![dim];
                reverse_dims.extend_from_slice(&cfg.flow_hidden);
                reverse_dims.push(2 * dim);
                // A zeroed reverse head emits the standard normal, matching
                // the auxiliary base, so the starting bound equals the
                // diagonal family's starting bound exactly.
                let mut reverse =
                    Mlp::xavier(&reverse_dims, Activation::Elu, Activation::Identity, rng);
                reverse.zero_last_layer();
                Some(FlowPosterior {
                    steps,
                    kind: FlowKind::Auxiliary {
                        v_base: VBase::Params(FfgParams::standard(dim)),
                        reverse,
                        conditioning: ReverseConditioning::LatentOnly,
                    },
                })
            }
        };
        if let Some(f) = &flow {
            f.validate(dim, model.data_dim())?;
        }
        Ok(LocalQ { family, base, flow })
    }

    /// Sampler view over these parameters.
    pub fn posterior(&self) -> Posterior<'_> {
        Posterior::Local { base: &self.base, flow: self.flow.as_ref() }
    }

    fn n_params(&self) -> usize {
        2 * self.base.dim() + self.flow.as_ref().map_or(0, FlowPosterior::n_params)
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.base.mu);
        out.extend_from_slice(&self.base.logvar);
        if let Some(f) = &self.flow {
            f.write_params(out);
        }
    }

    fn read_params(&mut self, flat: &[f64]) {
        let d = self.base.dim();
        self.base.mu.copy_from_slice(&flat[..d]);
        self.base.logvar.copy_from_slice(&flat[d..2 * d]);
        let rest = &flat[2 * d..];
        if let Some(f) = &mut self.flow {
            let leftover = f.read_params(rest);
            assert!(leftover.is_empty());
        } else {
            assert!(rest.is_empty());
        }
    }
}

/// Settings for one per-datapoint optimization.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LocalOptConfig {
    pub family: Family,
    pub n_flow_steps: usize,
    pub flow_hidden: Vec<usize>,
    /// Monte Carlo samples per optimization step.
    pub mc_samples: usize,
    /// Fresh samples for the final reported bound.
    pub final_samples: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Window length between convergence checks.
    pub check_every: usize,
    /// Consecutive non-improving windows before stopping.
    pub max_stalls: usize,
}

impl LocalOptConfig {
    pub fn new(family: Family) -> Self {
        LocalOptConfig {
            family,
            n_flow_steps: 2,
            flow_hidden: vec![50],
            mc_samples: 100,
            final_samples: 5000,
            lr: 1e-3,
            max_steps: 50_000,
            check_every: 100,
            max_stalls: 10,
        }
    }
}

/// What the monitor says after each recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorVerdict {
    Continue,
    /// A window just completed with a new best average.
    Improved,
    /// The stall limit was reached.
    Stop,
}

/// Windowed stall detector: averages each window of objective values and
/// stops after a fixed number of consecutive non-improving windows.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    window: Vec<f64>,
    check_every: usize,
    max_stalls: usize,
    pub best_window_avg: f64,
    pub stall_count: usize,
}

impl ConvergenceMonitor {
    pub fn new(check_every: usize, max_stalls: usize) -> Self {
        assert!(check_every >= 1 && max_stalls >= 1);
        ConvergenceMonitor {
            window: Vec::with_capacity(check_every),
            check_every,
            max_stalls,
            best_window_avg: f64::NEG_INFINITY,
            stall_count: 0,
        }
    }

    /// Records one objective value; improvement means strictly greater.
    pub fn push(&mut self, value: f64) -> MonitorVerdict {
        self.window.push(value);
        if self.window.len() < self.check_every {
            return MonitorVerdict::Continue;
        }
        let avg = self.window.iter().sum::<f64>() / self.window.len() as f64;
        self.window.clear();
        if avg > self.best_window_avg {
            self.best_window_avg = avg;
            self.stall_count = 0;
            MonitorVerdict::Improved
        } else {
            self.stall_count += 1;
            if self.stall_count >= self.max_stalls {
                MonitorVerdict::Stop
            } else {
                MonitorVerdict::Continue
            }
        }
    }
}

/// Outcome of one per-datapoint optimization.
#[derive(Debug, Clone)]
pub struct LocalOptResult {
    /// Optimized posterior, read at the mean iterate of the last completed
    /// objective window; averaging irons out optimizer jitter the windowed
    /// stall check cannot resolve.
    pub q: LocalQ,
    /// Final bound re-estimated with fresh samples.
    pub elbo_star: BoundEstimate,
    pub steps_used: usize,
    /// False when the budget ran out before the stall rule fired.
    pub converged: bool,
    /// True when a numerical failure forced a fresh start.
    pub restarted: bool,
}

fn optimize_once(
    model: &VaeModel,
    x: &[f64],
    cfg: &LocalOptConfig,
    rng: &mut Prng,
) -> Result<(LocalQ, usize, bool)> {
    let mut q = LocalQ::init(cfg.family, model, cfg, rng)?;
    let mut params = Vec::with_capacity(q.n_params());
    q.write_params(&mut params);
    let mut adam = AdamState::new(params.len(), AdamHyper::with_lr(cfg.lr));
    let mut monitor = ConvergenceMonitor::new(cfg.check_every, cfg.max_stalls);
    // Mean iterate of the most recent completed window; near the optimum the
    // bound is too flat for the stall check to rank single iterates, so the
    // window average is the best available estimate of where Adam settled.
    let mut window_sum = vec![0.0; params.len()];
    let mut window_mean: Option<Vec<f64>> = None;
    let mut in_window = 0usize;
    let mut grad_flat = vec![0.0; params.len()];
    let mut steps_used = 0;
    let mut converged = false;

    for _ in 0..cfg.max_steps {
        let (value, grads) =
            annealed_grad(model, &q.posterior(), x, cfg.mc_samples, 1.0, rng)?;
        grad_flat.clear();
        grad_flat.extend_from_slice(&grads.base_mu);
        grad_flat.extend_from_slice(&grads.base_logvar);
        if let Some(f) = &grads.flow {
            f.write_flat(&mut grad_flat);
        }
        // Adam minimizes; the bound is maximized.
        for g in &mut grad_flat {
            *g = -*g;
        }
        adam.step(&mut params, &grad_flat)?;
        q.read_params(&params);
        steps_used += 1;
        for (s, p) in window_sum.iter_mut().zip(&params) {
            *s += *p;
        }
        in_window += 1;
        let verdict = monitor.push(value);
        if in_window == cfg.check_every {
            let mean = window_mean.get_or_insert_with(|| vec![0.0; params.len()]);
            for (m, s) in mean.iter_mut().zip(&window_sum) {
                *m = *s / cfg.check_every as f64;
            }
            window_sum.fill(0.0);
            in_window = 0;
        }
        match verdict {
            MonitorVerdict::Continue | MonitorVerdict::Improved => {}
            MonitorVerdict::Stop => {
                converged = true;
                break;
            }
        }
    }
    if let Some(mean) = &window_mean {
        q.read_params(mean);
    }
    Ok((q, steps_used, converged))
}

/// Optimizes a fresh local posterior for one datapoint.
///
/// The base starts at the prior and all nets at Xavier draws; the objective
/// is the family's bound estimated with `mc_samples` draws per step. One
/// numerical failure triggers a single restart with fresh initialization.
pub fn optimize_local(
    model: &VaeModel,
    x: &[f64],
    cfg: &LocalOptConfig,
    rng: &mut Prng,
) -> Result<LocalOptResult> {
    let master: u64 = rng.gen();
    let mut restarted = false;
    let attempt = |index: u64| -> Result<(LocalQ, usize, bool, Prng)> {
        let mut attempt_rng = derive_rng(master, "local-opt", index);
        let (q, steps, converged) = optimize_once(model, x, cfg, &mut attempt_rng)?;
        Ok((q, steps, converged, attempt_rng))
    };
    let (q, steps_used, converged, mut eval_rng) = match attempt(0) {
        Ok(out) => out,
        Err(Error::Numerical(_)) => {
            restarted = true;
            attempt(1)?
        }
        Err(e) => return Err(e),
    };
    let elbo_star = elbo(model, &q.posterior(), x, cfg.final_samples, &mut eval_rng)?;
    Ok(LocalOptResult { q, elbo_star, steps_used, converged, restarted })
}

/// Family bound at the encoder's amortized parameters, without optimization.
pub fn amortized_elbo(
    model: &VaeModel,
    flow: Option<&FlowPosterior>,
    x: &[f64],
    n: usize,
    rng: &mut Prng,
) -> Result<BoundEstimate> {
    let q = match flow {
        Some(f) => Posterior::AmortizedFlow(f),
        None => Posterior::AmortizedFfg,
    };
    elbo(model, &q, x, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Likelihood, LN_2PI};
    use crate::rng::derive_rng;

    fn pooled_se(a: &BoundEstimate, b: &BoundEstimate) -> f64 {
        (a.std_error * a.std_error + b.std_error * b.std_error).sqrt()
    }

    fn z_blind_model() -> VaeModel {
        let decoder = Mlp::zeros(&[2, 3], Activation::Tanh, Activation::Identity);
        let encoder = Mlp::zeros(&[3, 4], Activation::Tanh, Activation::Identity);
        VaeModel::new(2, decoder, encoder, Likelihood::BernoulliLogits).unwrap()
    }

    /// 2-D conjugate model with independent coordinates; the optimal
    /// factorized Gaussian is the exact posterior itself.
    fn diag_conjugate(a: &[f64; 2], noise_logvar: f64, exact_encoder: bool) -> VaeModel {
        let mut decoder = Mlp::zeros(&[2, 4], Activation::Identity, Activation::Identity);
        for i in 0..2 {
            decoder.layers[0].weight[i * 2 + i] = a[i];
            decoder.layers[0].bias[2 + i] = noise_logvar;
        }
        let mut encoder = Mlp::zeros(&[2, 4], Activation::Identity, Activation::Identity);
        if exact_encoder {
            let var = noise_logvar.exp();
            for i in 0..2 {
                let post_var = 1.0 / (1.0 + a[i] * a[i] / var);
                encoder.layers[0].weight[i * 2 + i] = post_var * a[i] / var;
                encoder.layers[0].bias[2 + i] = post_var.ln();
            }
        }
        VaeModel::new(2, decoder, encoder, Likelihood::DiagonalGaussian).unwrap()
    }

    fn diag_posterior(a: &[f64; 2], noise_logvar: f64, x: &[f64; 2]) -> FfgParams {
        let var = noise_logvar.exp();
        let mut p = FfgParams::standard(2);
        for i in 0..2 {
            let post_var = 1.0 / (1.0 + a[i] * a[i] / var);
            p.mu[i] = post_var * a[i] * x[i] / var;
            p.logvar[i] = post_var.ln();
        }
        p
    }

    fn diag_log_marginal(a: &[f64; 2], noise_logvar: f64, x: &[f64; 2]) -> f64 {
        (0..2)
            .map(|i| {
                let var = a[i] * a[i] + noise_logvar.exp();
                -0.5 * LN_2PI - 0.5 * var.ln() - 0.5 * x[i] * x[i] / var
            })
            .sum()
    }

    #[test]
    fn monitor_counts_stalls_and_resets_on_improvement() {
        let mut m = ConvergenceMonitor::new(2, 3);
        assert_eq!(m.push(1.0), MonitorVerdict::Continue);
        assert_eq!(m.push(1.0), MonitorVerdict::Improved);
        assert_eq!(m.best_window_avg, 1.0);
        // Two flat windows stall, an improving one resets.
        m.push(1.0);
        assert_eq!(m.push(1.0), MonitorVerdict::Continue);
        assert_eq!(m.stall_count, 1);
        m.push(0.5);
        assert_eq!(m.push(0.5), MonitorVerdict::Continue);
        assert_eq!(m.stall_count, 2);
        m.push(2.0);
        assert_eq!(m.push(2.0), MonitorVerdict::Improved);
        assert_eq!(m.stall_count, 0);
        // Three consecutive stalls reach the limit.
        for _ in 0..2 {
            m.push(0.0);
            assert_eq!(m.push(0.0), MonitorVerdict::Continue);
        }
        m.push(0.0);
        assert_eq!(m.push(0.0), MonitorVerdict::Stop);
    }

    #[test]
    fn z_blind_optimum_is_the_prior() {
        let model = z_blind_model();
        let x = [1.0, 0.0, 1.0];
        let mut cfg = LocalOptConfig::new(Family::Ffg);
        cfg.max_steps = 5000;
        let mut rng = derive_rng(70, "blind-opt", 0);
        let res = optimize_local(&model, &x, &cfg, &mut rng).unwrap();
        assert!(res.converged);
        for i in 0..2 {
            assert!(res.q.base.mu[i].abs() < 0.05, "mu {:?}", res.q.base.mu);
            assert!(res.q.base.logvar[i].abs() < 0.05, "logvar {:?}", res.q.base.logvar);
        }
    }

    #[test]
    fn ffg_optimum_matches_analytic_posterior_on_conjugate_model() {
        let a = [0.9, 1.2];
        let nlv = -0.3;
        let x = [0.8, -0.5];
        let model = diag_conjugate(&a, nlv, false);
        let post = diag_posterior(&a, nlv, &x);
        let logp = diag_log_marginal(&a, nlv, &x);
        let mut cfg = LocalOptConfig::new(Family::Ffg);
        cfg.max_steps = 20_000;
        let mut rng = derive_rng(71, "conj-opt", 0);
        let res = optimize_local(&model, &x, &cfg, &mut rng).unwrap();
        for i in 0..2 {
            assert!(
                (res.q.base.mu[i] - post.mu[i]).abs() < 1e-2,
                "mu {:?} vs {:?}",
                res.q.base.mu,
                post.mu
            );
            let var = res.q.base.logvar[i].exp();
            let want = post.logvar[i].exp();
            assert!((var - want).abs() < 1e-2, "var {var} vs {want}");
        }
        // The diagonal posterior is inside the family, so the optimal bound
        // is the log marginal itself.
        assert!(
            (res.elbo_star.value - logp).abs() < 0.05,
            "elbo* {} logp {logp}",
            res.elbo_star.value
        );
    }

    #[test]
    fn flow_family_at_least_matches_ffg_on_a_correlated_posterior() {
        // Shear decoder: the true posterior is a correlated Gaussian, so the
        // factorized family provably loses nats that the flow can recover.
        let mut decoder = Mlp::zeros(&[2, 4], Activation::Identity, Activation::Identity);
        decoder.layers[0].weight = vec![1.0, 0.8, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        decoder.layers[0].bias = vec![0.0, 0.0, -0.3, -0.3];
        let encoder = Mlp::zeros(&[2, 4], Activation::Identity, Activation::Identity);
        let model = VaeModel::new(2, decoder, encoder, Likelihood::DiagonalGaussian).unwrap();
        let x = [0.8, -0.5];
        let mut ffg_cfg = LocalOptConfig::new(Family::Ffg);
        ffg_cfg.max_steps = 20_000;
        let mut flow_cfg = LocalOptConfig::new(Family::Flow);
        flow_cfg.max_steps = 20_000;
        flow_cfg.flow_hidden = vec![8];
        let mut rng = derive_rng(72, "nest-opt", 0);
        let ffg = optimize_local(&model, &x, &ffg_cfg, &mut rng).unwrap();
        let flow = optimize_local(&model, &x, &flow_cfg, &mut rng).unwrap();
        let se = pooled_se(&flow.elbo_star, &ffg.elbo_star);
        assert!(
            flow.elbo_star.value >= ffg.elbo_star.value - 3.0 * se,
            "flow {} ffg {} se {se}",
            flow.elbo_star.value,
            ffg.elbo_star.value
        );
        // The correlation headroom is about 0.08 nat; the flow should claim
        // a clear part of it.
        assert!(
            flow.elbo_star.value > ffg.elbo_star.value + 0.02,
            "flow {} ffg {}",
            flow.elbo_star.value,
            ffg.elbo_star.value
        );
    }

    #[test]
    fn amortization_gap_is_zero_for_an_exact_encoder() {
        let a = [0.9, 1.2];
        let nlv = -0.3;
        let x = [0.8, -0.5];
        let model = diag_conjugate(&a, nlv, true);
        let mut cfg = LocalOptConfig::new(Family::Ffg);
        cfg.max_steps = 20_000;
        let mut rng = derive_rng(73, "gap-zero", 0);
        let res = optimize_local(&model, &x, &cfg, &mut rng).unwrap();
        let amortized = amortized_elbo(&model, None, &x, 5000, &mut rng).unwrap();
        let gap = res.elbo_star.value - amortized.value;
        let se = pooled_se(&res.elbo_star, &amortized);
        assert!(gap.abs() < 3.0 * se + 0.01, "gap {gap} se {se}");
    }

    #[test]
    fn amortized_never_beats_the_local_optimum() {
        let a = [1.1, 0.7];
        let nlv = -0.4;
        let model = diag_conjugate(&a, nlv, false); // encoder stuck at N(0, I)
        for (i, x) in [[0.9, -0.3], [-0.6, 1.2], [0.2, 0.4]].iter().enumerate() {
            let mut cfg = LocalOptConfig::new(Family::Ffg);
            cfg.max_steps = 10_000;
            let mut rng = derive_rng(74, "amort-le", i as u64);
            let res = optimize_local(&model, x, &cfg, &mut rng).unwrap();
            let amortized = amortized_elbo(&model, None, x, 5000, &mut rng).unwrap();
            let se = pooled_se(&res.elbo_star, &amortized);
            assert!(
                amortized.value <= res.elbo_star.value + 3.0 * se,
                "amortized {} local {}",
                amortized.value,
                res.elbo_star.value
            );
        }
    }

    #[test]
    fn same_seed_reproduces_the_optimization_bitwise() {
        let model = z_blind_model();
        let x = [1.0, 1.0, 0.0];
        let mut cfg = LocalOptConfig::new(Family::Ffg);
        cfg.max_steps = 300;
        let run = || {
            let mut rng = derive_rng(75, "det-opt", 0);
            let res = optimize_local(&model, &x, &cfg, &mut rng).unwrap();
            let mut flat = Vec::new();
            res.q.write_params(&mut flat);
            (flat, res.elbo_star.value)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exhausted_budget_reports_unconverged() {
        let model = z_blind_model();
        let x = [0.0, 1.0, 0.0];
        let mut cfg = LocalOptConfig::new(Family::Ffg);
        cfg.max_steps = 150; // fewer than 11 windows, so the stall rule cannot fire
        let mut rng = derive_rng(76, "budget", 0);
        let res = optimize_local(&model, &x, &cfg, &mut rng).unwrap();
        assert!(!res.converged);
        assert_eq!(res.steps_used, 150);
    }

    #[test]
    fn persistent_numerical_failure_surfaces_after_one_restart() {
        // A decoder that overflows for any z makes every attempt fail.
        let mut decoder = Mlp::zeros(&[2, 3], Activation::Identity, Activation::Identity);
        decoder.layers[0].weight.iter_mut().for_each(|w| *w = 1e308);
        let encoder = Mlp::zeros(&[3, 4], Activation::Tanh, Activation::Identity);
        let model = VaeModel::new(2, decoder, encoder, Likelihood::BernoulliLogits).unwrap();
        let cfg = LocalOptConfig::new(Family::Ffg);
        let mut rng = derive_rng(77, "fail", 0);
        let err = optimize_local(&model, &[1.0, 0.0, 1.0], &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
