//! Expressive posteriors built from two-part coupling transformations:
//! pure-flow posteriors over a split latent vector and auxiliary-variable
//! posteriors over a (z, v) pair with a learned reverse model.
//!
//! Sampling records tapes so the local optimizer and the trainer can run
//! reverse-mode gradients through the whole transformation by hand; the
//! pieces are MLP backward passes chained with the coupling algebra.

use crate::diffnet::{Activation, GradTape, Mlp, MlpGrads};
use crate::error::{Error, Result};
use crate::model::{gaussian_logpdf_grads, log_q_ffg, sample_reparam, FfgParams};
use crate::rng::Prng;

/// Raw scale outputs are clamped to this magnitude before exponentiation, so
/// scales live in [e^-7, e^7] and can never overflow.
pub const RAW_SCALE_CLAMP: f64 = 7.0;

/// One coupling step: the first half is rescaled and shifted conditioned on
/// the second, then the second conditioned on the updated first.
///
/// All four nets map `R^h -> R^h` where `h` is the half width. Scales are
/// `exp` of the (clamped) raw net output, so the log determinant is the sum
/// of the clamped raw outputs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CouplingStep {
    pub scale1: Mlp,
    pub shift1: Mlp,
    pub scale2: Mlp,
    pub shift2: Mlp,
}

/// Tape for one coupling step forward pass.
#[derive(Debug, Clone)]
pub struct CoupleTape {
    a_in: Vec<f64>,
    b_in: Vec<f64>,
    s1: Vec<f64>,
    mask1: Vec<f64>,
    s2: Vec<f64>,
    mask2: Vec<f64>,
    t_scale1: GradTape,
    t_shift1: GradTape,
    t_scale2: GradTape,
    t_shift2: GradTape,
}

/// Gradients for one coupling step, shaped like its four nets.
#[derive(Debug, Clone)]
pub struct CouplingGrads {
    pub scale1: MlpGrads,
    pub shift1: MlpGrads,
    pub scale2: MlpGrads,
    pub shift2: MlpGrads,
}

fn clamp_raw(raw: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut c = Vec::with_capacity(raw.len());
    let mut s = Vec::with_capacity(raw.len());
    let mut mask = Vec::with_capacity(raw.len());
    for &r in raw {
        let cl = r.clamp(-RAW_SCALE_CLAMP, RAW_SCALE_CLAMP);
        c.push(cl);
        s.push(cl.exp());
        mask.push(if r.abs() < RAW_SCALE_CLAMP { 1.0 } else { 0.0 });
    }
    (c, s, mask)
}

impl CouplingStep {
    /// Validates that all four nets share the half width `h`.
    pub fn new(scale1: Mlp, shift1: Mlp, scale2: Mlp, shift2: Mlp) -> Result<Self> {
        let h = scale1.in_dim();
        for (name, net) in
            [("scale1", &scale1), ("shift1", &shift1), ("scale2", &scale2), ("shift2", &shift2)]
        {
            if net.in_dim() != h || net.out_dim() != h {
                return Err(Error::Config(format!(
                    "coupling net {name} must map R^{h} -> R^{h}, got {} -> {}",
                    net.in_dim(),
                    net.out_dim()
                )));
            }
        }
        Ok(CouplingStep { scale1, shift1, scale2, shift2 })
    }

    /// Xavier-initialized step with the given hidden widths; zero biases.
    pub fn xavier(h: usize, hidden: &[usize], activation: Activation, rng: &mut Prng) -> Self {
        let mut dims = vec![h];
        dims.extend_from_slice(hidden);
        dims.push(h);
        let mk = |rng: &mut Prng| Mlp::xavier(&dims, activation, Activation::Identity, rng);
        CouplingStep { scale1: mk(rng), shift1: mk(rng), scale2: mk(rng), shift2: mk(rng) }
    }

    /// Zero-weight step: scales one, shifts zero, the identity map.
    pub fn identity(h: usize, hidden: &[usize], activation: Activation) -> Self {
        let mut dims = vec![h];
        dims.extend_from_slice(hidden);
        dims.push(h);
        let mk = || Mlp::zeros(&dims, activation, Activation::Identity);
        CouplingStep { scale1: mk(), shift1: mk(), scale2: mk(), shift2: mk() }
    }

    /// Xavier hidden layers under a zeroed last layer: the step starts as the
    /// identity map, but its hidden features are alive, so gradient descent
    /// can move it off the identity without a symmetry-breaking phase.
    pub fn near_identity(h: usize, hidden: &[usize], activation: Activation, rng: &mut Prng) -> Self {
        let mut step = CouplingStep::xavier(h, hidden, activation, rng);
        for net in [&mut step.scale1, &mut step.shift1, &mut step.scale2, &mut step.shift2] {
            net.zero_last_layer();
        }
        step
    }

    pub fn half_dim(&self) -> usize {
        self.scale1.in_dim()
    }

    /// Forward map with tape: `a' = a*s1(b) + m1(b)`, `b' = b*s2(a') + m2(a')`,
    /// `log_det = sum(log s1(b)) + sum(log s2(a'))`.
    pub fn forward_tape(&self, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64, CoupleTape)> {
        let h = self.half_dim();
        assert_eq!(a.len(), h, "first half width");
        assert_eq!(b.len(), h, "second half width");
        let (raw1, t_scale1) = self.scale1.forward(b)?;
        let (c1, s1, mask1) = clamp_raw(&raw1);
        let (m1, t_shift1) = self.shift1.forward(b)?;
        let a2: Vec<f64> = (0..h).map(|i| a[i] * s1[i] + m1[i]).collect();
        let (raw2, t_scale2) = self.scale2.forward(&a2)?;
        let (c2, s2, mask2) = clamp_raw(&raw2);
        let (m2, t_shift2) = self.shift2.forward(&a2)?;
        let b2: Vec<f64> = (0..h).map(|i| b[i] * s2[i] + m2[i]).collect();
        let log_det = c1.iter().sum::<f64>() + c2.iter().sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Numerical("non-finite coupling log determinant".into()));
        }
        let tape = CoupleTape {
            a_in: a.to_vec(),
            b_in: b.to_vec(),
            s1,
            mask1,
            s2,
            mask2,
            t_scale1,
            t_shift1,
            t_scale2,
            t_shift2,
        };
        Ok((a2, b2, log_det, tape))
    }

    /// Forward map without the tape.
    pub fn forward(&self, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (a2, b2, ld, _) = self.forward_tape(a, b)?;
        Ok((a2, b2, ld))
    }

    /// Exact algebraic inverse: `b = (b' - m2(a'))/s2(a')`, then
    /// `a = (a' - m1(b))/s1(b)`.
    pub fn inverse(&self, a2: &[f64], b2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.half_dim();
        assert_eq!(a2.len(), h);
        assert_eq!(b2.len(), h);
        let (raw2, _) = self.scale2.forward(a2)?;
        let (_, s2, _) = clamp_raw(&raw2);
        let m2 = self.scale_shift_eval(&self.shift2, a2)?;
        let b: Vec<f64> = (0..h).map(|i| (b2[i] - m2[i]) / s2[i]).collect();
        let (raw1, _) = self.scale1.forward(&b)?;
        let (_, s1, _) = clamp_raw(&raw1);
        let m1 = self.scale_shift_eval(&self.shift1, &b)?;
        let a: Vec<f64> = (0..h).map(|i| (a2[i] - m1[i]) / s1[i]).collect();
        Ok((a, b))
    }

    fn scale_shift_eval(&self, net: &Mlp, input: &[f64]) -> Result<Vec<f64>> {
        net.eval(input)
    }

    /// Reverse-mode pass. `g_a2`, `g_b2` are upstream gradients on the
    /// outputs; `g_log_det` multiplies this step's log-determinant term.
    /// Returns parameter gradients and the gradients on the inputs.
    pub fn backward(
        &self,
        tape: &CoupleTape,
        g_a2: &[f64],
        g_b2: &[f64],
        g_log_det: f64,
    ) -> (CouplingGrads, Vec<f64>, Vec<f64>) {
        let h = self.half_dim();
        // Second sub-update: b' = b * s2(a') + m2(a').
        let mut g_b: Vec<f64> = (0..h).map(|i| g_b2[i] * tape.s2[i]).collect();
        let g_c2: Vec<f64> =
            (0..h).map(|i| g_b2[i] * tape.b_in[i] * tape.s2[i] + g_log_det).collect();
        let g_raw2: Vec<f64> = (0..h).map(|i| g_c2[i] * tape.mask2[i]).collect();
        let scale2_g = self.scale2.backward(&tape.t_scale2, &g_raw2);
        let shift2_g = self.shift2.backward(&tape.t_shift2, g_b2);
        let g_a2_total: Vec<f64> =
            (0..h).map(|i| g_a2[i] + scale2_g.input[i] + shift2_g.input[i]).collect();
        // First sub-update: a' = a * s1(b) + m1(b).
        let g_a: Vec<f64> = (0..h).map(|i| g_a2_total[i] * tape.s1[i]).collect();
        let g_c1: Vec<f64> =
            (0..h).map(|i| g_a2_total[i] * tape.a_in[i] * tape.s1[i] + g_log_det).collect();
        let g_raw1: Vec<f64> = (0..h).map(|i| g_c1[i] * tape.mask1[i]).collect();
        let scale1_g = self.scale1.backward(&tape.t_scale1, &g_raw1);
        let shift1_g = self.shift1.backward(&tape.t_shift1, &g_a2_total);
        for i in 0..h {
            g_b[i] += scale1_g.input[i] + shift1_g.input[i];
        }
        (CouplingGrads { scale1: scale1_g, shift1: shift1_g, scale2: scale2_g, shift2: shift2_g }, g_a, g_b)
    }

    pub fn n_params(&self) -> usize {
        self.scale1.n_params() + self.shift1.n_params() + self.scale2.n_params() + self.shift2.n_params()
    }

    /// Parameter order: scale1, shift1, scale2, shift2.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        self.scale1.write_params(out);
        self.shift1.write_params(out);
        self.scale2.write_params(out);
        self.shift2.write_params(out);
    }

    pub fn read_params<'a>(&mut self, flat: &'a [f64]) -> &'a [f64] {
        let flat = self.scale1.read_params(flat);
        let flat = self.shift1.read_params(flat);
        let flat = self.scale2.read_params(flat);
        self.shift2.read_params(flat)
    }
}

impl CouplingGrads {
    pub fn zeros_like(step: &CouplingStep) -> Self {
        CouplingGrads {
            scale1: MlpGrads::zeros_like(&step.scale1),
            shift1: MlpGrads::zeros_like(&step.shift1),
            scale2: MlpGrads::zeros_like(&step.scale2),
            shift2: MlpGrads::zeros_like(&step.shift2),
        }
    }

    pub fn accumulate(&mut self, other: &CouplingGrads) {
        self.scale1.accumulate(&other.scale1);
        self.shift1.accumulate(&other.shift1);
        self.scale2.accumulate(&other.scale2);
        self.shift2.accumulate(&other.shift2);
    }

    pub fn scale(&mut self, c: f64) {
        self.scale1.scale(c);
        self.shift1.scale(c);
        self.scale2.scale(c);
        self.shift2.scale(c);
    }

    /// Same order as [`CouplingStep::write_params`].
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.scale1.write_flat(out);
        self.shift1.write_flat(out);
        self.scale2.write_flat(out);
        self.shift2.write_flat(out);
    }
}

/// How the reverse model is conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseConditioning {
    /// r(v | z): input is the transformed latent only.
    LatentOnly,
    /// r(v | x, z): input is the datapoint concatenated with the latent.
    DataAndLatent,
}

/// Where the auxiliary variable's base distribution comes from.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum VBase {
    /// N(0, I), independent of everything.
    StandardNormal,
    /// Locally owned Gaussian parameters (per-datapoint optimization).
    Params(FfgParams),
    /// An MLP mapping z0 to the (mu, logvar) of v.
    Conditional(Mlp),
}

/// Posterior family selector.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum FlowKind {
    /// The latent vector is split into halves by index.
    SplitLatent,
    /// The latent is paired with an auxiliary v of the same dimension.
    Auxiliary { v_base: VBase, reverse: Mlp, conditioning: ReverseConditioning },
}

/// A stack of coupling steps over either a split latent or a (z, v) pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowPosterior {
    pub steps: Vec<CouplingStep>,
    pub kind: FlowKind,
}

/// One draw from a posterior, with the log-weight pieces every bound needs.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub z: Vec<f64>,
    /// Transformed auxiliary variable, if the family has one.
    pub v: Option<Vec<f64>>,
    /// Log density of the draw in its (possibly extended) space.
    pub log_q: f64,
    /// Reverse-model log density; zero for families without one.
    pub log_r: f64,
}

/// Splits an even-length vector into its two index halves.
pub fn split_halves(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert!(z.len() % 2 == 0, "split-latent flows need an even latent dimension");
    let h = z.len() / 2;
    (z[..h].to_vec(), z[h..].to_vec())
}

/// Everything recorded while drawing one sample through a flow.
#[derive(Debug, Clone)]
pub struct FlowTape {
    pub eps_z: Vec<f64>,
    pub eps_v: Option<Vec<f64>>,
    pub z0: Vec<f64>,
    pub v0: Option<Vec<f64>>,
    /// Realized v-base parameters (whichever variant produced them).
    pub v_base_params: Option<FfgParams>,
    pub v_base_tape: Option<GradTape>,
    pub step_tapes: Vec<CoupleTape>,
    pub reverse_tape: Option<GradTape>,
    pub reverse_out: Option<Vec<f64>>,
    pub log_det_total: f64,
    /// Transformed sample, kept for the backward pass.
    pub z_t: Vec<f64>,
    pub v_t: Option<Vec<f64>>,
}

/// Gradients for every parameter a flow owns, in checkpoint order.
#[derive(Debug, Clone)]
pub struct FlowGrads {
    pub steps: Vec<CouplingGrads>,
    pub v_base_mu: Option<Vec<f64>>,
    pub v_base_logvar: Option<Vec<f64>>,
    pub v_base_net: Option<MlpGrads>,
    pub reverse: Option<MlpGrads>,
}

impl FlowPosterior {
    /// Checks net widths against the latent (and data) dimensions.
    pub fn validate(&self, latent_dim: usize, data_dim: usize) -> Result<()> {
        let h = match &self.kind {
            FlowKind::SplitLatent => {
                if latent_dim % 2 != 0 {
                    return Err(Error::Config("split-latent flow needs even latent_dim".into()));
                }
                latent_dim / 2
            }
            FlowKind::Auxiliary { v_base, reverse, conditioning } => {
                let want_in = match conditioning {
                    ReverseConditioning::LatentOnly => latent_dim,
                    ReverseConditioning::DataAndLatent => data_dim + latent_dim,
                };
                if reverse.in_dim() != want_in || reverse.out_dim() != 2 * latent_dim {
                    return Err(Error::Config(format!(
                        "reverse model must map R^{want_in} -> R^{}, got {} -> {}",
                        2 * latent_dim,
                        reverse.in_dim(),
                        reverse.out_dim()
                    )));
                }
                if let VBase::Conditional(net) = v_base {
                    if net.in_dim() != latent_dim || net.out_dim() != 2 * latent_dim {
                        return Err(Error::Config("v-base net must map z to (mu, logvar) of v".into()));
                    }
                }
                if let VBase::Params(p) = v_base {
                    if p.dim() != latent_dim {
                        return Err(Error::Config("v-base parameters must match latent_dim".into()));
                    }
                }
                latent_dim
            }
        };
        for (i, step) in self.steps.iter().enumerate() {
            if step.half_dim() != h {
                return Err(Error::Config(format!(
                    "coupling step {i} half width {} != expected {h}",
                    step.half_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn is_auxiliary(&self) -> bool {
        matches!(self.kind, FlowKind::Auxiliary { .. })
    }

    pub fn n_params(&self) -> usize {
        let mut n: usize = self.steps.iter().map(CouplingStep::n_params).sum();
        if let FlowKind::Auxiliary { v_base, reverse, .. } = &self.kind {
            n += match v_base {
                VBase::StandardNormal => 0,
                VBase::Params(p) => 2 * p.dim(),
                VBase::Conditional(net) => net.n_params(),
            };
            n += reverse.n_params();
        }
        n
    }

    /// Parameter order: steps, then v-base (mu then logvar, or net), then the
    /// reverse model.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for s in &self.steps {
            s.write_params(out);
        }
        if let FlowKind::Auxiliary { v_base, reverse, .. } = &self.kind {
            match v_base {
                VBase::StandardNormal => {}
                VBase::Params(p) => {
                    out.extend_from_slice(&p.mu);
                    out.extend_from_slice(&p.logvar);
                }
                VBase::Conditional(net) => net.write_params(out),
            }
            reverse.write_params(out);
        }
    }

    pub fn read_params<'a>(&mut self, mut flat: &'a [f64]) -> &'a [f64] {
        for s in &mut self.steps {
            flat = s.read_params(flat);
        }
        if let FlowKind::Auxiliary { v_base, reverse, .. } = &mut self.kind {
            match v_base {
                VBase::StandardNormal => {}
                VBase::Params(p) => {
                    let d = p.dim();
                    p.mu.copy_from_slice(&flat[..d]);
                    flat = &flat[d..];
                    p.logvar.copy_from_slice(&flat[..d]);
                    flat = &flat[d..];
                }
                VBase::Conditional(net) => flat = net.read_params(flat),
            }
            flat = reverse.read_params(flat);
        }
        flat
    }
}

impl FlowGrads {
    pub fn zeros_like(flow: &FlowPosterior) -> Self {
        let steps = flow.steps.iter().map(CouplingGrads::zeros_like).collect();
        let (mut v_base_mu, mut v_base_logvar, mut v_base_net, mut reverse) = (None, None, None, None);
        if let FlowKind::Auxiliary { v_base, reverse: r, .. } = &flow.kind {
            match v_base {
                VBase::StandardNormal => {}
                VBase::Params(p) => {
                    v_base_mu = Some(vec![0.0; p.dim()]);
                    v_base_logvar = Some(vec![0.0; p.dim()]);
                }
                VBase::Conditional(net) => v_base_net = Some(MlpGrads::zeros_like(net)),
            }
            reverse = Some(MlpGrads::zeros_like(r));
        }
        FlowGrads { steps, v_base_mu, v_base_logvar, v_base_net, reverse }
    }

    pub fn accumulate(&mut self, other: &FlowGrads) {
        for (a, b) in self.steps.iter_mut().zip(&other.steps) {
            a.accumulate(b);
        }
        if let (Some(a), Some(b)) = (self.v_base_mu.as_mut(), other.v_base_mu.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        if let (Some(a), Some(b)) = (self.v_base_logvar.as_mut(), other.v_base_logvar.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        if let (Some(a), Some(b)) = (self.v_base_net.as_mut(), other.v_base_net.as_ref()) {
            a.accumulate(b);
        }
        if let (Some(a), Some(b)) = (self.reverse.as_mut(), other.reverse.as_ref()) {
            a.accumulate(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in &mut self.steps {
            s.scale(c);
        }
        if let Some(v) = self.v_base_mu.as_mut() {
            v.iter_mut().for_each(|x| *x *= c);
        }
        if let Some(v) = self.v_base_logvar.as_mut() {
            v.iter_mut().for_each(|x| *x *= c);
        }
        if let Some(g) = self.v_base_net.as_mut() {
            g.scale(c);
        }
        if let Some(g) = self.reverse.as_mut() {
            g.scale(c);
        }
    }

    /// Same order as [`FlowPosterior::write_params`].
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for s in &self.steps {
            s.write_flat(out);
        }
        if let Some(v) = &self.v_base_mu {
            out.extend_from_slice(v);
        }
        if let Some(v) = &self.v_base_logvar {
            out.extend_from_slice(v);
        }
        if let Some(g) = &self.v_base_net {
            g.write_flat(out);
        }
        if let Some(g) = &self.reverse {
            g.write_flat(out);
        }
    }
}

fn reverse_input(conditioning: ReverseConditioning, x: &[f64], z_t: &[f64]) -> Vec<f64> {
    match conditioning {
        ReverseConditioning::LatentOnly => z_t.to_vec(),
        ReverseConditioning::DataAndLatent => {
            let mut u = Vec::with_capacity(x.len() + z_t.len());
            u.extend_from_slice(x);
            u.extend_from_slice(z_t);
            u
        }
    }
}

/// Draws one sample through the flow, recording tapes for a backward pass.
///
/// `eps_v` must be provided exactly when the flow is auxiliary.
pub fn flow_forward_tape(
    flow: &FlowPosterior,
    base: &FfgParams,
    x: &[f64],
    eps_z: &[f64],
    eps_v: Option<&[f64]>,
) -> Result<(PosteriorSample, FlowTape)> {
    let z0 = sample_reparam(base, eps_z);
    let mut log_q = log_q_ffg(&z0, base);
    let mut tape = FlowTape {
        eps_z: eps_z.to_vec(),
        eps_v: eps_v.map(<[f64]>::to_vec),
        z0: z0.clone(),
        v0: None,
        v_base_params: None,
        v_base_tape: None,
        step_tapes: Vec::with_capacity(flow.steps.len()),
        reverse_tape: None,
        reverse_out: None,
        log_det_total: 0.0,
        z_t: Vec::new(),
        v_t: None,
    };
    match &flow.kind {
        FlowKind::SplitLatent => {
            let (mut a, mut b) = split_halves(&z0);
            for step in &flow.steps {
                let (a2, b2, ld, t) = step.forward_tape(&a, &b)?;
                a = a2;
                b = b2;
                log_q -= ld;
                tape.log_det_total += ld;
                tape.step_tapes.push(t);
            }
            let mut z_t = a;
            z_t.extend_from_slice(&b);
            tape.z_t = z_t.clone();
            Ok((PosteriorSample { z: z_t, v: None, log_q, log_r: 0.0 }, tape))
        }
        FlowKind::Auxiliary { v_base, reverse, conditioning } => {
            let eps_v = eps_v.expect("auxiliary flow sampling needs eps_v");
            let vb = match v_base {
                VBase::StandardNormal => FfgParams::standard(z0.len()),
                VBase::Params(p) => p.clone(),
                VBase::Conditional(net) => {
                    let (head, t) = net.forward(&z0)?;
                    tape.v_base_tape = Some(t);
                    let n = z0.len();
                    FfgParams { mu: head[..n].to_vec(), logvar: head[n..].to_vec() }
                }
            };
            let v0 = sample_reparam(&vb, eps_v);
            log_q += log_q_ffg(&v0, &vb);
            tape.v0 = Some(v0.clone());
            tape.v_base_params = Some(vb);
            let (mut a, mut b) = (z0, v0);
            for step in &flow.steps {
                let (a2, b2, ld, t) = step.forward_tape(&a, &b)?;
                a = a2;
                b = b2;
                log_q -= ld;
                tape.log_det_total += ld;
                tape.step_tapes.push(t);
            }
            let u = reverse_input(*conditioning, x, &a);
            let (head, t_r) = reverse.forward(&u)?;
            let n = a.len();
            let r_params = FfgParams { mu: head[..n].to_vec(), logvar: head[n..].to_vec() };
            let log_r = log_q_ffg(&b, &r_params);
            tape.reverse_tape = Some(t_r);
            tape.reverse_out = Some(head);
            tape.z_t = a.clone();
            tape.v_t = Some(b.clone());
            Ok((PosteriorSample { z: a, v: Some(b), log_q, log_r }, tape))
        }
    }
}

/// Tape-free sampling for evaluation-only call sites.
pub fn flow_sample(
    flow: &FlowPosterior,
    base: &FfgParams,
    x: &[f64],
    eps_z: &[f64],
    eps_v: Option<&[f64]>,
) -> Result<PosteriorSample> {
    flow_forward_tape(flow, base, x, eps_z, eps_v).map(|(s, _)| s)
}

/// Draws a split-latent flow sample: `(z_T, log q(z_T))`.
pub fn sample_q_flow(
    flow: &FlowPosterior,
    base: &FfgParams,
    eps: &[f64],
) -> Result<(Vec<f64>, f64)> {
    assert!(!flow.is_auxiliary(), "sample_q_flow is for split-latent flows");
    let s = flow_sample(flow, base, &[], eps, None)?;
    Ok((s.z, s.log_q))
}

/// Draws an auxiliary-flow sample: `(z_T, v_T, log q(z_T, v_T), log r)`.
pub fn sample_q_af(
    flow: &FlowPosterior,
    base: &FfgParams,
    x: &[f64],
    eps_z: &[f64],
    eps_v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    assert!(flow.is_auxiliary(), "sample_q_af is for auxiliary flows");
    let s = flow_sample(flow, base, x, eps_z, Some(eps_v))?;
    Ok((s.z, s.v.expect("auxiliary sample carries v"), s.log_q, s.log_r))
}

/// Reverse-model log density r(v | x, z).
pub fn log_r(flow: &FlowPosterior, x: &[f64], z: &[f64], v: &[f64]) -> Result<f64> {
    match &flow.kind {
        FlowKind::Auxiliary { reverse, conditioning, .. } => {
            let u = reverse_input(*conditioning, x, z);
            let head = reverse.eval(&u)?;
            let n = z.len();
            let r_params = FfgParams { mu: head[..n].to_vec(), logvar: head[n..].to_vec() };
            Ok(log_q_ffg(v, &r_params))
        }
        FlowKind::SplitLatent => Err(Error::Config("split-latent flow has no reverse model".into())),
    }
}

/// Exact density of a split-latent flow at a point, via the inverse map:
/// `log q(z_T) = log q0(z0) - log|det|` with `z0` recovered by inversion.
pub fn log_density_split(flow: &FlowPosterior, base: &FfgParams, z_t: &[f64]) -> Result<f64> {
    assert!(!flow.is_auxiliary());
    let (mut a, mut b) = split_halves(z_t);
    for step in flow.steps.iter().rev() {
        let (pa, pb) = step.inverse(&a, &b)?;
        a = pa;
        b = pb;
    }
    let mut z0 = a.clone();
    z0.extend_from_slice(&b);
    let mut log_det = 0.0;
    for step in &flow.steps {
        let (a2, b2, ld) = step.forward(&a, &b)?;
        a = a2;
        b = b2;
        log_det += ld;
    }
    Ok(log_q_ffg(&z0, base) - log_det)
}

/// Reverse-mode pass through a recorded flow sample.
///
/// `g_z_ext` and `g_v_ext` are gradients of the downstream objective on the
/// transformed sample (for the latent, typically d log p(x,z)/dz; the
/// reverse-model and entropy contributions are added here). `lambda` scales
/// the entropy side of the annealed objective
/// `log p(x,z) + lambda*(log r - log q)`.
///
/// Returns the flow parameter gradients and the gradient arriving at `z0`,
/// from which the caller differentiates its base (or encoder). The caller
/// must add `0.5 * lambda` to each base log-variance gradient; that term is
/// the pathwise derivative of `-lambda log q0` at the sampled point.
pub fn flow_backward(
    flow: &FlowPosterior,
    tape: &FlowTape,
    g_z_ext: &[f64],
    g_v_ext: Option<&[f64]>,
    lambda: f64,
) -> (FlowGrads, Vec<f64>) {
    let mut grads = FlowGrads::zeros_like(flow);
    let (mut g_a, mut g_b): (Vec<f64>, Vec<f64>) = match &flow.kind {
        FlowKind::SplitLatent => {
            let h = g_z_ext.len() / 2;
            (g_z_ext[..h].to_vec(), g_z_ext[h..].to_vec())
        }
        FlowKind::Auxiliary { reverse, .. } => {
            // log r contributes lambda * d log r / d (mu_r, logvar_r, v_T, z_T).
            let head = tape.reverse_out.as_ref().expect("aux tape has reverse output");
            let n = g_z_ext.len();
            let v_t = tape.v_t.as_ref().expect("aux tape has v_t");
            let (_, d_v, d_mu, d_lv) =
                gaussian_logpdf_grads(v_t, &head[..n], &head[n..]);
            let mut upstream = Vec::with_capacity(2 * n);
            upstream.extend(d_mu.iter().map(|g| lambda * g));
            upstream.extend(d_lv.iter().map(|g| lambda * g));
            let r_grads = reverse.backward(tape.reverse_tape.as_ref().unwrap(), &upstream);
            let mut g_z: Vec<f64> = g_z_ext.to_vec();
            let skip = r_grads.input.len() - n;
            for i in 0..n {
                g_z[i] += r_grads.input[skip + i];
            }
            let mut g_v: Vec<f64> = d_v.iter().map(|g| lambda * g).collect();
            if let Some(ext) = g_v_ext {
                for (gi, e) in g_v.iter_mut().zip(ext) {
                    *gi += e;
                }
            }
            grads.reverse = Some(r_grads);
            (g_z, g_v)
        }
    };
    for (i, step) in flow.steps.iter().enumerate().rev() {
        let (sg, ga, gb) = step.backward(&tape.step_tapes[i], &g_a, &g_b, lambda);
        grads.steps[i] = sg;
        g_a = ga;
        g_b = gb;
    }
    let mut g_z0 = g_a;
    match &flow.kind {
        FlowKind::SplitLatent => {
            g_z0.extend_from_slice(&g_b);
        }
        FlowKind::Auxiliary { v_base, .. } => {
            // g_b is the gradient on v0. The v-base log-variance picks up the
            // pathwise entropy term 0.5*lambda; the mean term cancels.
            let vb = tape.v_base_params.as_ref().expect("aux tape has v-base params");
            let eps_v = tape.eps_v.as_ref().expect("aux tape has eps_v");
            let g_lv: Vec<f64> = (0..g_b.len())
                .map(|i| g_b[i] * 0.5 * (0.5 * vb.logvar[i]).exp() * eps_v[i] + 0.5 * lambda)
                .collect();
            match v_base {
                VBase::StandardNormal => {}
                VBase::Params(_) => {
                    grads.v_base_mu = Some(g_b.clone());
                    grads.v_base_logvar = Some(g_lv);
                }
                VBase::Conditional(net) => {
                    let mut upstream = g_b.clone();
                    upstream.extend_from_slice(&g_lv);
                    let net_grads = net.backward(tape.v_base_tape.as_ref().unwrap(), &upstream);
                    for (gi, ni) in g_z0.iter_mut().zip(&net_grads.input) {
                        *gi += ni;
                    }
                    grads.v_base_net = Some(net_grads);
                }
            }
        }
    }
    (grads, g_z0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{finite_difference_grad, rel_err};
    use crate::model::log_prior;
    use crate::rng::{derive_rng, standard_normal_vec};

    /// log|det| of a square matrix by plain Gaussian elimination with partial
    /// pivoting; independent of the analytic path under test.
    fn log_abs_det(mut m: Vec<Vec<f64>>) -> f64 {
        let n = m.len();
        let mut log_det = 0.0;
        for col in 0..n {
            let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, pivot);
            let p = m[col][col];
            log_det += p.abs().ln();
            for row in col + 1..n {
                let factor = m[row][col] / p;
                for k in col..n {
                    let v = m[col][k];
                    m[row][k] -= factor * v;
                }
            }
        }
        log_det
    }

    fn random_step(h: usize, rng: &mut Prng) -> CouplingStep {
        let mut step = CouplingStep::xavier(h, &[6], Activation::Tanh, rng);
        // Nonzero biases exercise the general case.
        for net in [&mut step.scale1, &mut step.shift1, &mut step.scale2, &mut step.shift2] {
            for l in &mut net.layers {
                for b in &mut l.bias {
                    *b = 0.1 * crate::rng::standard_normal(rng);
                }
            }
        }
        step
    }

    #[test]
    fn zero_nets_give_identity_and_zero_logdet() {
        let step = CouplingStep::identity(3, &[4], Activation::Elu);
        let a = [0.5, -1.0, 2.0];
        let b = [1.5, 0.0, -0.5];
        let (a2, b2, ld) = step.forward(&a, &b).unwrap();
        assert_eq!(a2, a.to_vec());
        assert_eq!(b2, b.to_vec());
        assert_eq!(ld, 0.0);
        let (ai, bi) = step.inverse(&a2, &b2).unwrap();
        assert_eq!(ai, a.to_vec());
        assert_eq!(bi, b.to_vec());
    }

    #[test]
    fn near_identity_init_is_the_identity_with_live_features() {
        let mut rng = derive_rng(41, "near-id", 0);
        let step = CouplingStep::near_identity(2, &[5], Activation::Elu, &mut rng);
        let a = [0.7, -0.2];
        let b = [-1.1, 0.4];
        let (a2, b2, ld) = step.forward(&a, &b).unwrap();
        assert_eq!(a2, a.to_vec());
        assert_eq!(b2, b.to_vec());
        assert_eq!(ld, 0.0);
        // Hidden layers keep their Xavier weights so gradients reach them.
        let hidden_norm: f64 =
            step.scale1.layers[0].weight.iter().map(|w| w * w).sum::<f64>();
        assert!(hidden_norm > 0.0);
        let last = step.scale1.layers.last().unwrap();
        assert!(last.weight.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn log_det_matches_numeric_jacobian() {
        for (case, h) in [(0u64, 1usize), (1, 2), (2, 2), (3, 5)] {
            let mut rng = derive_rng(40, "jac", case);
            let step = random_step(h, &mut rng);
            let point = standard_normal_vec(&mut rng, 2 * h);
            let eps = 1e-6;
            let f = |p: &[f64]| -> Vec<f64> {
                let (a2, b2, _) = step.forward(&p[..h], &p[h..]).unwrap();
                let mut out = a2;
                out.extend_from_slice(&b2);
                out
            };
            let mut jac = vec![vec![0.0; 2 * h]; 2 * h];
            for j in 0..2 * h {
                let mut up = point.clone();
                up[j] += eps;
                let mut down = point.clone();
                down[j] -= eps;
                let fu = f(&up);
                let fd = f(&down);
                for i in 0..2 * h {
                    jac[i][j] = (fu[i] - fd[i]) / (2.0 * eps);
                }
            }
            let numeric = log_abs_det(jac);
            let (_, _, analytic) = step.forward(&point[..h], &point[h..]).unwrap();
            assert!(
                rel_err(analytic, numeric) < 1e-6,
                "h={h} analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn stacked_steps_add_log_dets() {
        let mut rng = derive_rng(40, "stack", 0);
        let s1 = random_step(2, &mut rng);
        let s2 = random_step(2, &mut rng);
        let a = standard_normal_vec(&mut rng, 2);
        let b = standard_normal_vec(&mut rng, 2);
        let (a1, b1, ld1) = s1.forward(&a, &b).unwrap();
        let (_, _, ld2) = s2.forward(&a1, &b1).unwrap();

        let flow = FlowPosterior { steps: vec![s1, s2], kind: FlowKind::SplitLatent };
        let base = FfgParams::standard(4);
        let mut z0 = a;
        z0.extend_from_slice(&b);
        // Recover the eps that produces this z0 under a standard base: eps = z0.
        let (_, log_q) = sample_q_flow(&flow, &base, &z0).unwrap();
        assert!((log_q - (log_q_ffg(&z0, &base) - ld1 - ld2)).abs() < 1e-12);
    }

    #[test]
    fn round_trips_to_1e10_in_both_directions() {
        for (case, h) in [(0u64, 1usize), (1, 2), (2, 5)] {
            let mut rng = derive_rng(41, "round", case);
            let step = random_step(h, &mut rng);
            let a = standard_normal_vec(&mut rng, h);
            let b = standard_normal_vec(&mut rng, h);
            let (a2, b2, _) = step.forward(&a, &b).unwrap();
            let (ar, br) = step.inverse(&a2, &b2).unwrap();
            for (x, y) in ar.iter().zip(&a).chain(br.iter().zip(&b)) {
                assert!((x - y).abs() < 1e-10);
            }
            let (af, bf, _) = step.forward(&ar, &br).unwrap();
            for (x, y) in af.iter().zip(&a2).chain(bf.iter().zip(&b2)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_flow_reduces_to_ffg() {
        let flow = FlowPosterior { steps: vec![], kind: FlowKind::SplitLatent };
        let base = FfgParams { mu: vec![0.5, -1.0], logvar: vec![0.2, -0.3] };
        let eps = [0.7, -0.2];
        let (z, log_q) = sample_q_flow(&flow, &base, &eps).unwrap();
        let z_direct = sample_reparam(&base, &eps);
        assert_eq!(z, z_direct);
        assert_eq!(log_q, log_q_ffg(&z_direct, &base));
    }

    #[test]
    fn identity_steps_keep_base_density() {
        let flow = FlowPosterior {
            steps: vec![CouplingStep::identity(1, &[3], Activation::Elu)],
            kind: FlowKind::SplitLatent,
        };
        let base = FfgParams { mu: vec![0.3, -0.6], logvar: vec![0.1, 0.4] };
        let eps = [1.2, 0.5];
        let (z, log_q) = sample_q_flow(&flow, &base, &eps).unwrap();
        assert_eq!(z, sample_reparam(&base, &eps));
        assert_eq!(log_q, log_q_ffg(&z, &base));
    }

    #[test]
    fn flow_density_via_inverse_matches_sampling_histogram() {
        // Total variation between a 2e5-sample histogram and the density
        // implied by change of variables, integrated per cell.
        let mut rng = derive_rng(42, "tv", 0);
        let mut step = CouplingStep::xavier(1, &[4], Activation::Tanh, &mut rng);
        for net in [&mut step.scale1, &mut step.shift1, &mut step.scale2, &mut step.shift2] {
            for l in &mut net.layers {
                for w in &mut l.weight {
                    *w *= 0.8;
                }
            }
        }
        let flow = FlowPosterior { steps: vec![step], kind: FlowKind::SplitLatent };
        let base = FfgParams::standard(2);

        let n_samples = 200_000;
        let cells = 12usize;
        let (lo, hi) = (-5.0, 5.0);
        let w = (hi - lo) / cells as f64;
        let mut hist = vec![0.0f64; cells * cells];
        let mut outside = 0.0f64;
        for _ in 0..n_samples {
            let eps = standard_normal_vec(&mut rng, 2);
            let (z, _) = sample_q_flow(&flow, &base, &eps).unwrap();
            let i = ((z[0] - lo) / w).floor();
            let j = ((z[1] - lo) / w).floor();
            if i >= 0.0 && i < cells as f64 && j >= 0.0 && j < cells as f64 {
                hist[i as usize * cells + j as usize] += 1.0;
            } else {
                outside += 1.0;
            }
        }
        for c in &mut hist {
            *c /= n_samples as f64;
        }
        outside /= n_samples as f64;

        // Integrate the implied density over each cell with a 5x5 rule.
        let sub = 5;
        let mut tv = 0.0;
        let mut covered = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                let mut mass = 0.0;
                for si in 0..sub {
                    for sj in 0..sub {
                        let z = [
                            lo + (i as f64 + (si as f64 + 0.5) / sub as f64) * w,
                            lo + (j as f64 + (sj as f64 + 0.5) / sub as f64) * w,
                        ];
                        mass += log_density_split(&flow, &base, &z).unwrap().exp();
                    }
                }
                mass *= w * w / (sub * sub) as f64;
                covered += mass;
                tv += (hist[i * cells + j] - mass).abs();
            }
        }
        tv += (outside - (1.0 - covered)).abs();
        tv *= 0.5;
        assert!(tv < 0.02, "total variation {tv}");
    }

    fn aux_flow_identity(n: usize) -> FlowPosterior {
        FlowPosterior {
            steps: vec![CouplingStep::identity(n, &[3], Activation::Elu)],
            kind: FlowKind::Auxiliary {
                v_base: VBase::StandardNormal,
                reverse: Mlp::zeros(&[n, 2 * n], Activation::Elu, Activation::Identity),
                conditioning: ReverseConditioning::LatentOnly,
            },
        }
    }

    #[test]
    fn identity_aux_flow_matches_plain_elbo_pieces() {
        // With an identity flow, q(v)=N(0,I) and r=N(0,I), the auxiliary
        // pieces cancel: log_r - log_q == -log q0(z).
        let n = 2;
        let flow = aux_flow_identity(n);
        let base = FfgParams { mu: vec![0.4, -0.9], logvar: vec![0.3, -0.2] };
        let mut rng = derive_rng(43, "aux-id", 0);
        for _ in 0..10 {
            let eps_z = standard_normal_vec(&mut rng, n);
            let eps_v = standard_normal_vec(&mut rng, n);
            let (z, v, log_q_zv, log_r) = sample_q_af(&flow, &base, &[], &eps_z, &eps_v).unwrap();
            assert_eq!(z, sample_reparam(&base, &eps_z));
            assert_eq!(v, eps_v);
            let expected_log_q = log_q_ffg(&z, &base) + log_prior(&v);
            assert!((log_q_zv - expected_log_q).abs() < 1e-12);
            assert!((log_r - log_prior(&v)).abs() < 1e-12);
            assert!(((log_r - log_q_zv) - (-log_q_ffg(&z, &base))).abs() < 1e-12);
        }
    }

    #[test]
    fn log_r_is_a_proper_density_in_v() {
        let mut rng = derive_rng(43, "logr", 0);
        let reverse = Mlp::xavier(&[1, 5, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let flow = FlowPosterior {
            steps: vec![],
            kind: FlowKind::Auxiliary {
                v_base: VBase::StandardNormal,
                reverse,
                conditioning: ReverseConditioning::LatentOnly,
            },
        };
        let z = [0.3];
        // Quadrature over v.
        let n = 200_000;
        let (lo, hi) = (-14.0, 14.0);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let v = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * log_r(&flow, &[], &z, &[v]).unwrap().exp();
        }
        total *= h;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn lotus_expectation_matches_grid_quadrature() {
        // E[h(z)] from transformed samples vs. quadrature under the implied
        // density, for polynomial h in 2-D.
        let mut rng = derive_rng(44, "lotus", 0);
        let mut step = CouplingStep::xavier(1, &[4], Activation::Tanh, &mut rng);
        for net in [&mut step.scale1, &mut step.shift1, &mut step.scale2, &mut step.shift2] {
            for l in &mut net.layers {
                for w in &mut l.weight {
                    *w *= 0.5;
                }
            }
        }
        let flow = FlowPosterior { steps: vec![step], kind: FlowKind::SplitLatent };
        let base = FfgParams::standard(2);
        let h_fns: [fn(&[f64]) -> f64; 2] =
            [|z| z[0] * z[0] + z[1], |z| z[0] * z[1]];

        let n_samples = 100_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n_samples {
            let eps = standard_normal_vec(&mut rng, 2);
            let (z, _) = sample_q_flow(&flow, &base, &eps).unwrap();
            for (k, h_fn) in h_fns.iter().enumerate() {
                let v = h_fn(&z);
                sums[k] += v;
                sq[k] += v * v;
            }
        }

        let cells = 250usize;
        let (lo, hi) = (-10.0, 10.0);
        let w = (hi - lo) / cells as f64;
        let mut quad = [0.0f64; 2];
        let mut mass = 0.0;
        for i in 0..cells {
            for j in 0..cells {
                let z = [lo + (i as f64 + 0.5) * w, lo + (j as f64 + 0.5) * w];
                let dens = log_density_split(&flow, &base, &z).unwrap().exp();
                mass += dens;
                for (k, h_fn) in h_fns.iter().enumerate() {
                    quad[k] += h_fn(&z) * dens;
                }
            }
        }
        mass *= w * w;
        assert!((mass - 1.0).abs() < 1e-4, "grid mass {mass}");
        for k in 0..2 {
            let mc_mean = sums[k] / n_samples as f64;
            let mc_var = sq[k] / n_samples as f64 - mc_mean * mc_mean;
            let se = (mc_var / n_samples as f64).sqrt();
            let grid_mean = quad[k] * w * w / mass;
            assert!(
                (mc_mean - grid_mean).abs() < 3.0 * se,
                "h{k}: mc {mc_mean} grid {grid_mean} se {se}"
            );
        }
    }

    /// Finite-difference check of the full backward pass: the scalar
    /// objective `w . z_T + lambda * (log_r - log_q)` differentiated with
    /// respect to base and flow parameters jointly.
    fn check_flow_gradients(flow: &FlowPosterior, base: &FfgParams, x: &[f64], lambda: f64, seed: u64) {
        let n = base.dim();
        let mut rng = derive_rng(seed, "flow-fd", 0);
        let eps_z = standard_normal_vec(&mut rng, n);
        let eps_v = if flow.is_auxiliary() { Some(standard_normal_vec(&mut rng, n)) } else { None };
        let w: Vec<f64> = standard_normal_vec(&mut rng, n);

        // Analytic gradients.
        let (_, tape) = flow_forward_tape(flow, base, x, &eps_z, eps_v.as_deref()).unwrap();
        let (fg, g_z0) = flow_backward(flow, &tape, &w, None, lambda);
        let mut analytic = Vec::new();
        // Base gradients first: mu then logvar.
        analytic.extend_from_slice(&g_z0);
        for i in 0..n {
            analytic.push(
                g_z0[i] * 0.5 * (0.5 * base.logvar[i]).exp() * tape.eps_z[i] + 0.5 * lambda,
            );
        }
        fg.write_flat(&mut analytic);

        // Numeric gradients over [base.mu, base.logvar, flow params].
        let mut params = Vec::new();
        params.extend_from_slice(&base.mu);
        params.extend_from_slice(&base.logvar);
        flow.write_params(&mut params);
        let mut scratch_flow = flow.clone();
        let objective = |p: &[f64]| -> f64 {
            let b = FfgParams { mu: p[..n].to_vec(), logvar: p[n..2 * n].to_vec() };
            scratch_flow.read_params(&p[2 * n..]);
            let s = flow_sample(&scratch_flow, &b, x, &eps_z, eps_v.as_deref()).unwrap();
            let dot: f64 = s.z.iter().zip(&w).map(|(a, b)| a * b).sum();
            dot + lambda * (s.log_r - s.log_q)
        };
        let numeric = finite_difference_grad(objective, &params, 1e-5);
        assert_eq!(analytic.len(), numeric.len());
        let worst = analytic.iter().zip(&numeric).map(|(&a, &b)| rel_err(a, b)).fold(0.0, f64::max);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn split_flow_gradients_match_finite_differences() {
        let mut rng = derive_rng(45, "split-fd", 0);
        let steps = vec![random_step(1, &mut rng), random_step(1, &mut rng)];
        let flow = FlowPosterior { steps, kind: FlowKind::SplitLatent };
        let base = FfgParams { mu: vec![0.3, -0.5], logvar: vec![0.2, -0.4] };
        check_flow_gradients(&flow, &base, &[], 1.0, 45);
        check_flow_gradients(&flow, &base, &[], 0.35, 46);
    }

    #[test]
    fn aux_flow_gradients_match_finite_differences() {
        let mut rng = derive_rng(47, "aux-fd", 0);
        let n = 2;
        for (case, conditioning) in
            [(0u64, ReverseConditioning::LatentOnly), (1, ReverseConditioning::DataAndLatent)]
        {
            let steps = vec![random_step(n, &mut rng)];
            let v_net = Mlp::xavier(&[n, 5, 2 * n], Activation::Tanh, Activation::Identity, &mut rng);
            let rev_in = match conditioning {
                ReverseConditioning::LatentOnly => n,
                ReverseConditioning::DataAndLatent => 3 + n,
            };
            let reverse =
                Mlp::xavier(&[rev_in, 5, 2 * n], Activation::Tanh, Activation::Identity, &mut rng);
            let flow = FlowPosterior {
                steps,
                kind: FlowKind::Auxiliary { v_base: VBase::Conditional(v_net), reverse, conditioning },
            };
            let base = FfgParams { mu: vec![-0.2, 0.6], logvar: vec![0.1, -0.3] };
            let x = [0.8, 0.1, -0.4];
            check_flow_gradients(&flow, &base, &x, 1.0, 48 + case);
            check_flow_gradients(&flow, &base, &x, 0.6, 50 + case);
        }
    }

    #[test]
    fn aux_flow_with_local_v_params_gradients_match() {
        let mut rng = derive_rng(51, "aux-local-fd", 0);
        let n = 2;
        let steps = vec![random_step(n, &mut rng)];
        let reverse = Mlp::xavier(&[n, 4, 2 * n], Activation::Tanh, Activation::Identity, &mut rng);
        let flow = FlowPosterior {
            steps,
            kind: FlowKind::Auxiliary {
                v_base: VBase::Params(FfgParams { mu: vec![0.2, -0.1], logvar: vec![-0.2, 0.3] }),
                reverse,
                conditioning: ReverseConditioning::LatentOnly,
            },
        };
        let base = FfgParams { mu: vec![0.5, 0.0], logvar: vec![0.0, -0.5] };
        check_flow_gradients(&flow, &base, &[], 1.0, 52);
    }

    #[test]
    fn validate_catches_shape_problems() {
        let flow = FlowPosterior {
            steps: vec![CouplingStep::identity(2, &[3], Activation::Elu)],
            kind: FlowKind::SplitLatent,
        };
        assert!(flow.validate(4, 10).is_ok());
        assert!(flow.validate(3, 10).is_err());
        assert!(flow.validate(6, 10).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = derive_rng(53, "flat", 0);
        let n = 2;
        let flow = FlowPosterior {
            steps: vec![random_step(n, &mut rng)],
            kind: FlowKind::Auxiliary {
                v_base: VBase::Conditional(Mlp::xavier(
                    &[n, 3, 2 * n],
                    Activation::Tanh,
                    Activation::Identity,
                    &mut rng,
                )),
                reverse: Mlp::xavier(&[n, 3, 2 * n], Activation::Tanh, Activation::Identity, &mut rng),
                conditioning: ReverseConditioning::LatentOnly,
            },
        };
        let mut flat = Vec::new();
        flow.write_params(&mut flat);
        assert_eq!(flat.len(), flow.n_params());
        let mut other = flow.clone();
        for v in flat.iter_mut() {
            *v += 1.0;
        }
        let rest = other.read_params(&flat);
        assert!(rest.is_empty());
        let mut flat2 = Vec::new();
        other.write_params(&mut flat2);
        assert_eq!(flat, flat2);
    }
}
