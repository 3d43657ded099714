//! Gradient engine for the annealed objective
//! `E_q[log p(x,z) + lambda*(log r - log q)]`.
//!
//! One entry point serves both uses: amortized training (gradients flow into
//! the encoder and any flow) and per-datapoint optimization (gradients flow
//! into locally owned base parameters and any local flow). Decoder gradients
//! are always produced; callers that hold the decoder fixed discard them.

use crate::bounds::Posterior;
use crate::diffnet::MlpGrads;
use crate::error::Result;
use crate::flows::{flow_backward, flow_forward_tape, FlowGrads, FlowPosterior};
use crate::model::{log_joint_backward, log_q_ffg, sample_reparam, FfgParams, VaeModel};
use crate::rng::{standard_normal_vec, Prng};

/// Ascent gradients of the annealed objective, averaged over samples.
/// `encoder` is present only when the base came from the encoder;
/// `base_mu`/`base_logvar` are gradients on the realized base either way.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub decoder: MlpGrads,
    pub encoder: Option<MlpGrads>,
    pub base_mu: Vec<f64>,
    pub base_logvar: Vec<f64>,
    pub flow: Option<FlowGrads>,
}

impl ObjectiveGrads {
    fn zeros(model: &VaeModel, amortized: bool, flow: Option<&FlowPosterior>) -> Self {
        ObjectiveGrads {
            decoder: MlpGrads::zeros_like(&model.decoder),
            encoder: amortized.then(|| MlpGrads::zeros_like(&model.encoder)),
            base_mu: vec![0.0; model.latent_dim],
            base_logvar: vec![0.0; model.latent_dim],
            flow: flow.map(FlowGrads::zeros_like),
        }
    }

    fn scale(&mut self, c: f64) {
        self.decoder.scale(c);
        if let Some(e) = &mut self.encoder {
            e.scale(c);
        }
        for g in self.base_mu.iter_mut().chain(&mut self.base_logvar) {
            *g *= c;
        }
        if let Some(f) = &mut self.flow {
            f.scale(c);
        }
    }
}

/// Monte Carlo value and ascent gradients of the annealed objective.
///
/// Draws `n` samples from `q` (all through one encoder pass when amortized)
/// and averages both the objective and its gradients over them.
pub fn annealed_grad(
    model: &VaeModel,
    q: &Posterior,
    x: &[f64],
    n: usize,
    lambda: f64,
    rng: &mut Prng,
) -> Result<(f64, ObjectiveGrads)> {
    assert!(n >= 1);
    assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    let dim = model.latent_dim;

    let (base, enc_tape, flow) = match q {
        Posterior::AmortizedFfg | Posterior::AmortizedFlow(_) => {
            let (head, tape) = model.encoder.forward(x)?;
            let base = FfgParams { mu: head[..dim].to_vec(), logvar: head[dim..].to_vec() };
            let flow = match q {
                Posterior::AmortizedFlow(f) => Some(*f),
                _ => None,
            };
            (base, Some(tape), flow)
        }
        Posterior::Local { base, flow } => ((*base).clone(), None, *flow),
    };

    let mut total = ObjectiveGrads::zeros(model, enc_tape.is_some(), flow);
    let mut value = 0.0;
    let std: Vec<f64> = base.logvar.iter().map(|lv| (0.5 * lv).exp()).collect();

    for _ in 0..n {
        let eps_z = standard_normal_vec(rng, dim);
        let (g_mu, g_lv) = match flow {
            None => {
                let z = sample_reparam(&base, &eps_z);
                let log_q = log_q_ffg(&z, &base);
                let (lj, g_z, dec) = log_joint_backward(model, x, &z)?;
                value += lj - lambda * log_q;
                total.decoder.accumulate(&dec);
                // Pathwise base gradients; the 0.5*lambda term is the total
                // derivative of -lambda*log q at the sampled point.
                let g_mu = g_z.clone();
                let g_lv: Vec<f64> = (0..dim)
                    .map(|i| g_z[i] * 0.5 * std[i] * eps_z[i] + 0.5 * lambda)
                    .collect();
                (g_mu, g_lv)
            }
            Some(f) => {
                let eps_v = f.is_auxiliary().then(|| standard_normal_vec(rng, dim));
                let (s, tape) = flow_forward_tape(f, &base, x, &eps_z, eps_v.as_deref())?;
                let (lj, g_z, dec) = log_joint_backward(model, x, &s.z)?;
                value += lj + lambda * (s.log_r - s.log_q);
                total.decoder.accumulate(&dec);
                let (fg, g_z0) = flow_backward(f, &tape, &g_z, None, lambda);
                total.flow.as_mut().expect("flow grads allocated").accumulate(&fg);
                let g_mu = g_z0.clone();
                let g_lv: Vec<f64> = (0..dim)
                    .map(|i| g_z0[i] * 0.5 * std[i] * eps_z[i] + 0.5 * lambda)
                    .collect();
                (g_mu, g_lv)
            }
        };
        for i in 0..dim {
            total.base_mu[i] += g_mu[i];
            total.base_logvar[i] += g_lv[i];
        }
        if let (Some(enc), Some(tape)) = (&mut total.encoder, &enc_tape) {
            let mut upstream = g_mu;
            upstream.extend_from_slice(&g_lv);
            enc.accumulate(&model.encoder.backward(tape, &upstream));
        }
    }

    total.scale(1.0 / n as f64);
    Ok((value / n as f64, total))
}
