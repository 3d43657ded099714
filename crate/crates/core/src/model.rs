//! The generative model and its amortized encoder: prior, likelihood, and
//! factorized-Gaussian posterior densities, reparameterized sampling, and
//! grid evaluation of the true posterior for 2-D latent spaces.

use rand::Rng;

use crate::diffnet::{sigmoid, softplus, Mlp, MlpGrads};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, Prng};

/// log(2*pi), the constant in Gaussian log densities.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Observation model attached to the decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Decoder emits one logit per pixel; data must be binary.
    BernoulliLogits,
    /// Decoder emits a mean and a log-variance per pixel.
    DiagonalGaussian,
}

/// Generative model plus amortized encoder.
///
/// The decoder maps `z` to likelihood parameters; the encoder maps `x` to the
/// concatenated `(mu, logvar)` of a factorized Gaussian over `z`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VaeModel {
    pub latent_dim: usize,
    pub decoder: Mlp,
    pub encoder: Mlp,
    pub likelihood: Likelihood,
}

/// Factorized-Gaussian posterior parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FfgParams {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl FfgParams {
    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        FfgParams { mu: vec![0.0; dim], logvar: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

impl VaeModel {
    /// Validates the shape contracts between the nets and the likelihood.
    pub fn new(latent_dim: usize, decoder: Mlp, encoder: Mlp, likelihood: Likelihood) -> Result<Self> {
        if encoder.out_dim() != 2 * latent_dim {
            return Err(Error::Config(format!(
                "encoder output {} != 2 * latent_dim {latent_dim}",
                encoder.out_dim()
            )));
        }
        if decoder.in_dim() != latent_dim {
            return Err(Error::Config(format!(
                "decoder input {} != latent_dim {latent_dim}",
                decoder.in_dim()
            )));
        }
        if likelihood == Likelihood::DiagonalGaussian && decoder.out_dim() % 2 != 0 {
            return Err(Error::Config("Gaussian decoder output must have even length".into()));
        }
        Ok(VaeModel { latent_dim, decoder, encoder, likelihood })
    }

    /// Pixel count of the data this model explains.
    pub fn data_dim(&self) -> usize {
        match self.likelihood {
            Likelihood::BernoulliLogits => self.decoder.out_dim(),
            Likelihood::DiagonalGaussian => self.decoder.out_dim() / 2,
        }
    }
}

/// Runs the encoder and splits its head into `(mu, logvar)`.
pub fn encode(model: &VaeModel, x: &[f64]) -> Result<FfgParams> {
    let (head, _) = model.encoder.forward(x)?;
    let n = model.latent_dim;
    Ok(FfgParams { mu: head[..n].to_vec(), logvar: head[n..].to_vec() })
}

/// Reparameterized sample `z = mu + exp(0.5 logvar) * eps`.
pub fn sample_reparam(q: &FfgParams, eps: &[f64]) -> Vec<f64> {
    assert_eq!(eps.len(), q.dim(), "noise dimension must match the posterior");
    q.mu
        .iter()
        .zip(&q.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Log density of a factorized Gaussian at `z`.
pub fn log_q_ffg(z: &[f64], q: &FfgParams) -> f64 {
    assert_eq!(z.len(), q.dim(), "point dimension must match the posterior");
    let mut total = 0.0;
    for ((zi, m), lv) in z.iter().zip(&q.mu).zip(&q.logvar) {
        let d = zi - m;
        total += -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d / lv.exp();
    }
    total
}

/// Standard-normal log density.
pub fn log_prior(z: &[f64]) -> f64 {
    let mut total = 0.0;
    for zi in z {
        total += -0.5 * LN_2PI - 0.5 * zi * zi;
    }
    total
}

/// Gradient of [`log_prior`], which is `-z`.
pub fn grad_log_prior(z: &[f64]) -> Vec<f64> {
    z.iter().map(|zi| -zi).collect()
}

/// Gaussian log density with gradients w.r.t. the point, mean, and
/// log-variance. Shared by posterior, reverse-model, and likelihood math.
pub fn gaussian_logpdf_grads(
    point: &[f64],
    mu: &[f64],
    logvar: &[f64],
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut value = 0.0;
    let mut d_point = vec![0.0; point.len()];
    let mut d_mu = vec![0.0; point.len()];
    let mut d_logvar = vec![0.0; point.len()];
    for i in 0..point.len() {
        let var = logvar[i].exp();
        let d = point[i] - mu[i];
        value += -0.5 * LN_2PI - 0.5 * logvar[i] - 0.5 * d * d / var;
        d_point[i] = -d / var;
        d_mu[i] = d / var;
        d_logvar[i] = -0.5 + 0.5 * d * d / var;
    }
    (value, d_point, d_mu, d_logvar)
}

/// KL divergence between factorized Gaussians, KL(q || p), in closed form.
pub fn kl_diag_gaussians(q: &FfgParams, p: &FfgParams) -> f64 {
    assert_eq!(q.dim(), p.dim());
    let mut total = 0.0;
    for i in 0..q.dim() {
        let vq = q.logvar[i].exp();
        let vp = p.logvar[i].exp();
        let dm = q.mu[i] - p.mu[i];
        total += 0.5 * (p.logvar[i] - q.logvar[i] + (vq + dm * dm) / vp - 1.0);
    }
    total
}

/// Log likelihood given an already computed decoder output.
pub fn log_likelihood_from_output(likelihood: Likelihood, x: &[f64], out: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    match likelihood {
        Likelihood::BernoulliLogits => {
            assert_eq!(out.len(), x.len(), "one logit per pixel");
            for (i, (xi, logit)) in x.iter().zip(out).enumerate() {
                let term = xi * logit - softplus(*logit);
                if !term.is_finite() {
                    return Err(Error::Numerical(format!("non-finite likelihood at pixel {i}")));
                }
                total += term;
            }
        }
        Likelihood::DiagonalGaussian => {
            assert_eq!(out.len(), 2 * x.len(), "mean and log-variance per pixel");
            let d = x.len();
            for i in 0..d {
                let m = out[i];
                let lv = out[d + i];
                let diff = x[i] - m;
                let term = -0.5 * LN_2PI - 0.5 * lv - 0.5 * diff * diff / lv.exp();
                if !term.is_finite() {
                    return Err(Error::Numerical(format!("non-finite likelihood at pixel {i}")));
                }
                total += term;
            }
        }
    }
    Ok(total)
}

/// Gradient of the log likelihood w.r.t. the decoder output.
pub fn d_loglik_d_output(likelihood: Likelihood, x: &[f64], out: &[f64]) -> Vec<f64> {
    match likelihood {
        Likelihood::BernoulliLogits => {
            x.iter().zip(out).map(|(xi, logit)| xi - sigmoid(*logit)).collect()
        }
        Likelihood::DiagonalGaussian => {
            let d = x.len();
            let mut g = vec![0.0; 2 * d];
            for i in 0..d {
                let var = out[d + i].exp();
                let diff = x[i] - out[i];
                g[i] = diff / var;
                g[d + i] = -0.5 + 0.5 * diff * diff / var;
            }
            g
        }
    }
}

/// Log p(x|z) under the model's likelihood.
pub fn log_likelihood(model: &VaeModel, x: &[f64], z: &[f64]) -> Result<f64> {
    let out = model.decoder.eval(z)?;
    log_likelihood_from_output(model.likelihood, x, &out)
}

/// Log p(x, z) = log p(z) + log p(x|z).
pub fn log_joint(model: &VaeModel, x: &[f64], z: &[f64]) -> Result<f64> {
    Ok(log_prior(z) + log_likelihood(model, x, z)?)
}

/// Log joint with its gradient w.r.t. `z` and the decoder parameters.
///
/// The parameter gradients come from the same backward pass, so call sites
/// that only need `d/dz` (HMC) share this code path with training.
pub fn log_joint_backward(model: &VaeModel, x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>, MlpGrads)> {
    let (out, tape) = model.decoder.forward(z)?;
    let ll = log_likelihood_from_output(model.likelihood, x, &out)?;
    let upstream = d_loglik_d_output(model.likelihood, x, &out);
    let grads = model.decoder.backward(&tape, &upstream);
    let mut dz = grads.input.clone();
    for (g, zi) in dz.iter_mut().zip(z) {
        *g -= zi;
    }
    Ok((log_prior(z) + ll, dz, grads))
}

/// Log joint and its gradient w.r.t. `z` only.
pub fn grad_log_joint(model: &VaeModel, x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (value, dz, _) = log_joint_backward(model, x, z)?;
    Ok((value, dz))
}

/// Log likelihood with its gradient w.r.t. `z` (no prior term).
pub fn grad_log_likelihood(model: &VaeModel, x: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (out, tape) = model.decoder.forward(z)?;
    let ll = log_likelihood_from_output(model.likelihood, x, &out)?;
    let upstream = d_loglik_d_output(model.likelihood, x, &out);
    Ok((ll, model.decoder.backward(&tape, &upstream).input))
}

/// Draws an observation x ~ p(x|z) from the model's likelihood.
pub fn sample_observation(model: &VaeModel, z: &[f64], rng: &mut Prng) -> Result<Vec<f64>> {
    let out = model.decoder.eval(z)?;
    Ok(match model.likelihood {
        Likelihood::BernoulliLogits => out
            .iter()
            .map(|logit| if rng.gen::<f64>() < sigmoid(*logit) { 1.0 } else { 0.0 })
            .collect(),
        Likelihood::DiagonalGaussian => {
            let d = out.len() / 2;
            (0..d)
                .map(|i| out[i] + (0.5 * out[d + i]).exp() * standard_normal(rng))
                .collect()
        }
    })
}

/// Uniform rectangular lattice over a 2-D latent space.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Grid2d {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub n: [usize; 2],
}

impl Default for Grid2d {
    /// The visualization default: [-4, 4]^2 at 200 x 200.
    fn default() -> Self {
        Grid2d { min: [-4.0, -4.0], max: [4.0, 4.0], n: [200, 200] }
    }
}

impl Grid2d {
    /// Cell-center coordinate along `axis` at index `i`.
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        let h = (self.max[axis] - self.min[axis]) / self.n[axis] as f64;
        self.min[axis] + (i as f64 + 0.5) * h
    }

    pub fn cell_area(&self) -> f64 {
        let h0 = (self.max[0] - self.min[0]) / self.n[0] as f64;
        let h1 = (self.max[1] - self.min[1]) / self.n[1] as f64;
        h0 * h1
    }

    pub fn n_cells(&self) -> usize {
        self.n[0] * self.n[1]
    }

    /// Row-major flattening: cell (i, j) holds z = (center(0, i), center(1, j)).
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n[1] + j
    }
}

/// Normalizes nonnegative cell masses so that sum * cell_area = 1.
pub fn normalize_grid(mut mass: Vec<f64>, grid: &Grid2d) -> Result<Vec<f64>> {
    let total: f64 = mass.iter().sum::<f64>() * grid.cell_area();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numerical("grid density has no finite mass".into()));
    }
    for v in &mut mass {
        *v /= total;
    }
    Ok(mass)
}

/// True posterior p(z|x) evaluated on a 2-D grid, normalized to integrate to
/// one over the grid. The max log joint is subtracted before exponentiating.
pub fn true_posterior_grid(model: &VaeModel, x: &[f64], grid: &Grid2d) -> Result<Vec<f64>> {
    assert_eq!(model.latent_dim, 2, "grid evaluation needs a 2-D latent space");
    let mut log_vals = Vec::with_capacity(grid.n_cells());
    for i in 0..grid.n[0] {
        for j in 0..grid.n[1] {
            let z = [grid.center(0, i), grid.center(1, j)];
            log_vals.push(log_joint(model, x, &z)?);
        }
    }
    let m = log_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Numerical("grid posterior mass underflowed everywhere".into()));
    }
    normalize_grid(log_vals.iter().map(|lv| (lv - m).exp()).collect(), grid)
}

/// KL(a || b) for two normalized densities on the same grid, by quadrature.
pub fn kl_on_grid(a: &[f64], b: &[f64], grid: &Grid2d) -> f64 {
    assert_eq!(a.len(), b.len());
    let area = grid.cell_area();
    let mut total = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        if *pa > 0.0 {
            total += area * pa * (pa.ln() - pb.ln());
        }
    }
    total
}
