//! Dataset loading, static binarization, and synthetic generators.
//!
//! Two synthetic sources exist: a linear-Gaussian generator that ships with a
//! closed-form oracle (marginal likelihood, exact posterior, best diagonal
//! approximation), and a lattice generator that renders binary images through
//! a random decoder for training runs that need structured pixel data.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{sigmoid, Activation, Layer, Mlp};
use crate::error::{Error, Result};
use crate::model::{FfgParams, Likelihood, VaeModel, LN_2PI};
use crate::rng::{derive_rng, standard_normal, standard_normal_vec};

/// Magic number opening an IDX file of unsigned-byte images.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// How raw grey-scale pixels were frozen to binary values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Binarization {
    /// Pixel becomes 1 iff its value exceeds the threshold.
    Threshold { threshold: f64 },
    /// One Bernoulli draw per pixel from the recorded seed, then frozen.
    BernoulliOnce { seed: u64 },
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Images parsed from an IDX file on disk.
    IdxFile { path: String },
    /// Linear-Gaussian draws x = A z + b + noise.
    SyntheticGauss { seed: u64 },
    /// Binary images rendered from a latent lattice by a random decoder.
    SyntheticGrid { seed: u64 },
}

/// Which split a datapoint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// In-memory dataset: row-major images plus provenance and split tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    /// One tag per image; `assign_split` rewrites them.
    pub split: Vec<Split>,
    pub source: DatasetSource,
    /// Present iff the images were statically binarized.
    pub binarization: Option<Binarization>,
}

impl Dataset {
    /// Wraps images, defaulting every row to the training split.
    pub fn new(images: Vec<Vec<f64>>, source: DatasetSource) -> Result<Self> {
        if images.is_empty() || images[0].is_empty() {
            return Err(Error::Dataset("dataset must have at least one image and one pixel".into()));
        }
        let dim = images[0].len();
        if let Some(bad) = images.iter().position(|row| row.len() != dim) {
            return Err(Error::Dataset(format!(
                "image {bad} has {} pixels, expected {dim}",
                images[bad].len()
            )));
        }
        let split = vec![Split::Train; images.len()];
        Ok(Dataset { images, split, source, binarization: None })
    }

    pub fn n(&self) -> usize {
        self.images.len()
    }

    pub fn dim(&self) -> usize {
        self.images[0].len()
    }

    /// Tags the first `n_train` images as training data and the rest as
    /// validation data.
    pub fn assign_split(&mut self, n_train: usize) {
        for (i, tag) in self.split.iter_mut().enumerate() {
            *tag = if i < n_train { Split::Train } else { Split::Val };
        }
    }

    /// Indices carrying the given tag, in dataset order.
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    /// Keeps only the first `n` images.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Dataset("cannot truncate a dataset to zero images".into()));
        }
        let n = n.min(self.n());
        self.images.truncate(n);
        self.split.truncate(n);
        Ok(())
    }

    /// True iff every pixel is exactly zero or one.
    pub fn is_binary(&self) -> bool {
        self.images.iter().flatten().all(|&p| p == 0.0 || p == 1.0)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

/// Parses an IDX image buffer into [0,1]-scaled pixel rows.
pub fn parse_idx(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 16 {
        return Err(Error::Dataset(format!(
            "truncated at byte {}: a 16-byte header is required",
            bytes.len()
        )));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Dataset(format!(
            "bad magic 0x{magic:08x} at byte 0: image files start with 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Dataset(format!("empty dimensions in header: {n} images of {rows}x{cols}")));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "file ends at byte {}: header promises {expected} bytes for {n} images of {rows}x{cols}",
            bytes.len()
        )));
    }
    let d = rows * cols;
    Ok(bytes[16..]
        .chunks_exact(d)
        .map(|chunk| chunk.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

/// Reads an IDX image file, transparently decompressing gzip content.
pub fn load_idx(path: &Path) -> Result<Vec<Vec<f64>>> {
    let raw = fs::read(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Dataset(format!("{}: gzip: {e}", path.display())))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes images as a plain IDX file; pixels are rounded to the nearest of
/// the 256 byte levels.
pub fn write_idx(path: &Path, images: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    let d = rows * cols;
    if images.is_empty() || d == 0 {
        return Err(Error::Dataset("nothing to write: need at least one image and one pixel".into()));
    }
    if let Some(bad) = images.iter().position(|row| row.len() != d) {
        return Err(Error::Dataset(format!(
            "image {bad} has {} pixels, expected {rows}x{cols}={d}",
            images[bad].len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + images.len() * d);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for row in images {
        bytes.extend(row.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Freezes grey-scale images to binary ones and records how it was done.
pub fn binarize(
    images: &[Vec<f64>],
    method: Binarization,
    source: DatasetSource,
) -> Result<Dataset> {
    let binary = match method {
        Binarization::Threshold { threshold } => images
            .iter()
            .map(|row| row.iter().map(|&p| f64::from(p > threshold)).collect())
            .collect(),
        Binarization::BernoulliOnce { seed } => {
            let mut rng = derive_rng(seed, "binarize", 0);
            images
                .iter()
                .map(|row| row.iter().map(|&p| f64::from(rng.gen::<f64>() < p)).collect())
                .collect()
        }
    };
    let mut dataset = Dataset::new(binary, source)?;
    dataset.binarization = Some(method);
    Ok(dataset)
}

/// Settings for the linear-Gaussian synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussDataConfig {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub n_points: usize,
    /// Log of the shared observation noise variance.
    pub noise_logvar: f64,
    /// Standard deviation of the random map's entries.
    pub map_scale: f64,
    pub seed: u64,
}

impl Default for GaussDataConfig {
    fn default() -> Self {
        GaussDataConfig {
            latent_dim: 2,
            data_dim: 4,
            n_points: 200,
            noise_logvar: -1.0,
            map_scale: 1.0,
            seed: 7,
        }
    }
}

/// Closed-form reference quantities for data generated as x = A z + b + noise
/// with z ~ N(0, I) and isotropic noise.
#[derive(Debug, Clone)]
pub struct LinearGaussianOracle {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub noise_logvar: f64,
    marginal_chol: Cholesky<f64, Dyn>,
    marginal_logdet: f64,
    /// Posterior precision P = I + A^T A / noise_var; shared by every x.
    precision: DMatrix<f64>,
    posterior_cov: DMatrix<f64>,
    posterior_logdet: f64,
}

impl LinearGaussianOracle {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, noise_logvar: f64) -> Result<Self> {
        let (d, k) = a.shape();
        if d == 0 || k == 0 || b.len() != d {
            return Err(Error::Config(format!(
                "map is {d}x{k} with offset of length {}",
                b.len()
            )));
        }
        let noise_var = noise_logvar.exp();
        let marginal = &a * a.transpose() + DMatrix::identity(d, d) * noise_var;
        let marginal_chol = Cholesky::new(marginal)
            .ok_or_else(|| Error::Numerical("marginal covariance is not positive definite".into()))?;
        let marginal_logdet = 2.0 * marginal_chol.l().diagonal().map(f64::ln).sum();
        let precision = DMatrix::identity(k, k) + a.transpose() * &a / noise_var;
        let precision_chol = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::Numerical("posterior precision is not positive definite".into()))?;
        let posterior_logdet = -2.0 * precision_chol.l().diagonal().map(f64::ln).sum();
        let posterior_cov = precision_chol.inverse();
        Ok(LinearGaussianOracle {
            a,
            b,
            noise_logvar,
            marginal_chol,
            marginal_logdet,
            precision,
            posterior_cov,
            posterior_logdet,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn data_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Analytic log p(x) = log N(x; b, A A^T + noise_var I).
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.b;
        let solved = self.marginal_chol.solve(&diff);
        -0.5 * (self.data_dim() as f64 * LN_2PI + self.marginal_logdet + diff.dot(&solved))
    }

    /// Exact posterior mean P^-1 A^T (x - b) / noise_var.
    pub fn posterior_mean(&self, x: &[f64]) -> Vec<f64> {
        let diff = DVector::from_column_slice(x) - &self.b;
        let rhs = self.a.transpose() * diff / self.noise_logvar.exp();
        (&self.posterior_cov * rhs).iter().copied().collect()
    }

    /// Exact posterior covariance, shared by every datapoint.
    pub fn posterior_cov(&self) -> &DMatrix<f64> {
        &self.posterior_cov
    }

    /// Exact posterior log density log N(z; mean(x), P^-1).
    pub fn log_posterior(&self, x: &[f64], z: &[f64]) -> f64 {
        let mean = self.posterior_mean(x);
        let diff = DVector::from_iterator(z.len(), z.iter().zip(&mean).map(|(a, b)| a - b));
        let quad = diff.dot(&(&self.precision * &diff));
        -0.5 * (self.latent_dim() as f64 * LN_2PI + self.posterior_logdet + quad)
    }

    /// Best diagonal Gaussian under the exclusive KL: exact mean, variances
    /// equal to the reciprocal diagonal of the posterior precision.
    pub fn optimal_ffg(&self, x: &[f64]) -> FfgParams {
        let mu = self.posterior_mean(x);
        let logvar = (0..self.latent_dim()).map(|i| -self.precision[(i, i)].ln()).collect();
        FfgParams { mu, logvar }
    }

    /// KL from the best diagonal Gaussian to the exact posterior; independent
    /// of x because the posterior covariance is.
    pub fn ffg_projection_kl(&self) -> f64 {
        let sum_ln_pii: f64 = (0..self.latent_dim()).map(|i| self.precision[(i, i)].ln()).sum();
        0.5 * (sum_ln_pii + self.posterior_logdet)
    }

    /// Tightest diagonal-family bound: log p(x) minus the projection KL.
    pub fn optimal_ffg_elbo(&self, x: &[f64]) -> f64 {
        self.log_marginal(x) - self.ffg_projection_kl()
    }

    /// Expresses the generator as a linear-decoder model whose encoder emits
    /// the best diagonal posterior for every x, so it has no amortization
    /// error inside the diagonal family.
    pub fn to_model(&self) -> Result<VaeModel> {
        let (d, k) = self.a.shape();
        let noise_var = self.noise_logvar.exp();

        let mut dec_weight = vec![0.0; 2 * d * k];
        let mut dec_bias = vec![0.0; 2 * d];
        for r in 0..d {
            for c in 0..k {
                dec_weight[r * k + c] = self.a[(r, c)];
            }
            dec_bias[r] = self.b[r];
            dec_bias[d + r] = self.noise_logvar;
        }
        let decoder = Mlp {
            layers: vec![Layer { in_dim: k, out_dim: 2 * d, weight: dec_weight, bias: dec_bias }],
            activation: Activation::Identity,
            output_activation: Activation::Identity,
        };

        // mean(x) = W x + c with W = P^-1 A^T / noise_var and c = -W b.
        let w = &self.posterior_cov * self.a.transpose() / noise_var;
        let c = -(&w * &self.b);
        let mut enc_weight = vec![0.0; 2 * k * d];
        let mut enc_bias = vec![0.0; 2 * k];
        for r in 0..k {
            for col in 0..d {
                enc_weight[r * d + col] = w[(r, col)];
            }
            enc_bias[r] = c[r];
            enc_bias[k + r] = -self.precision[(r, r)].ln();
        }
        let encoder = Mlp {
            layers: vec![Layer { in_dim: d, out_dim: 2 * k, weight: enc_weight, bias: enc_bias }],
            activation: Activation::Identity,
            output_activation: Activation::Identity,
        };

        VaeModel::new(k, decoder, encoder, Likelihood::DiagonalGaussian)
    }
}

/// Draws a dataset from a random linear-Gaussian generator and returns the
/// generator's closed-form oracle alongside it.
pub fn synthesize_gauss(cfg: &GaussDataConfig) -> Result<(Dataset, LinearGaussianOracle)> {
    if cfg.latent_dim == 0 || cfg.data_dim == 0 || cfg.n_points == 0 {
        return Err(Error::Config("synthetic data needs positive dimensions and counts".into()));
    }
    let mut rng = derive_rng(cfg.seed, "gauss-data", 0);
    let a = DMatrix::from_fn(cfg.data_dim, cfg.latent_dim, |_, _| {
        cfg.map_scale * standard_normal(&mut rng)
    });
    let b = DVector::from_fn(cfg.data_dim, |_, _| 0.5 * standard_normal(&mut rng));
    let oracle = LinearGaussianOracle::new(a, b, cfg.noise_logvar)?;
    let noise_std = (0.5 * cfg.noise_logvar).exp();
    let images = (0..cfg.n_points)
        .map(|_| {
            let z = standard_normal_vec(&mut rng, cfg.latent_dim);
            let mean = &oracle.a * DVector::from_column_slice(&z) + &oracle.b;
            (0..cfg.data_dim).map(|d| mean[d] + noise_std * standard_normal(&mut rng)).collect()
        })
        .collect();
    let dataset = Dataset::new(images, DatasetSource::SyntheticGauss { seed: cfg.seed })?;
    Ok((dataset, oracle))
}

/// Settings for the decoder-rendered lattice dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDataConfig {
    /// Lattice side length; the dataset holds side^2 images.
    pub side: usize,
    pub data_dim: usize,
    /// Hidden widths of the rendering network.
    pub hidden: Vec<usize>,
    /// The lattice covers [-span, span] on both latent axes.
    pub span: f64,
    /// Multiplier on the rendering network's logits; larger values push
    /// pixel probabilities away from one half.
    pub logit_gain: f64,
    pub seed: u64,
}

impl Default for GridDataConfig {
    fn default() -> Self {
        GridDataConfig {
            side: 16,
            data_dim: 64,
            hidden: vec![32],
            span: 2.0,
            logit_gain: 4.0,
            seed: 11,
        }
    }
}

/// Renders binary images from a regular 2-D latent lattice through a randomly
/// initialized network, Bernoulli-sampling each pixel once.
pub fn synthesize_grid(cfg: &GridDataConfig) -> Result<Dataset> {
    if cfg.side == 0 || cfg.data_dim == 0 {
        return Err(Error::Config("lattice data needs a positive side and pixel count".into()));
    }
    let mut rng = derive_rng(cfg.seed, "grid-data", 0);
    let mut dims = vec![2];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.data_dim);
    let net = Mlp::xavier(&dims, Activation::Tanh, Activation::Identity, &mut rng);
    let coord = |i: usize| {
        if cfg.side == 1 {
            0.0
        } else {
            -cfg.span + 2.0 * cfg.span * i as f64 / (cfg.side - 1) as f64
        }
    };
    let mut images = Vec::with_capacity(cfg.side * cfg.side);
    for i in 0..cfg.side {
        for j in 0..cfg.side {
            let logits = net.eval(&[coord(i), coord(j)])?;
            let row = logits
                .iter()
                .map(|&l| f64::from(rng.gen::<f64>() < sigmoid(cfg.logit_gain * l)))
                .collect();
            images.push(row);
        }
    }
    let mut dataset = Dataset::new(images, DatasetSource::SyntheticGrid { seed: cfg.seed })?;
    dataset.binarization = Some(Binarization::BernoulliOnce { seed: cfg.seed });
    Ok(dataset)
}
