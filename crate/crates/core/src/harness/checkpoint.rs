//! Versioned JSON checkpoints carrying model parameters, the training flow,
//! the config echo, and the per-epoch bound curve.
//!
//! Layers serialize as shapes plus flat row-major parameter arrays, and the
//! decoder's parameter hash is stored so frozen-decoder retraining can prove
//! the decoder never moved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::diffnet::Mlp;
use crate::error::{Error, Result};
use crate::flows::{FlowKind, FlowPosterior, VBase};
use crate::model::VaeModel;

/// Schema version of the checkpoint document.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-epoch progress row: full-bound estimates on the fixed eval subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Epochs completed when the estimate was taken.
    pub epoch: usize,
    /// Entropy weight used while training this epoch.
    pub lambda: f64,
    pub train_bound: f64,
    pub val_bound: f64,
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: VaeModel,
    /// Amortized flow trained alongside the encoder, when the family has one.
    pub flow: Option<FlowPosterior>,
    /// Seed the run was started with.
    pub seed: u64,
    /// Epochs completed at this snapshot.
    pub epoch: usize,
    /// Entropy weight in effect at the snapshot.
    pub lambda: f64,
    /// FNV-1a hash of the decoder parameter bits.
    pub decoder_hash: u64,
    pub config: ExperimentConfig,
    pub curve: Vec<EpochRecord>,
}

fn fnv1a64(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hash of the decoder parameters, in layer order, over their exact bits.
pub fn decoder_hash(decoder: &Mlp) -> u64 {
    let mut flat = Vec::new();
    decoder.write_params(&mut flat);
    fnv1a64(flat.iter().flat_map(|p| p.to_bits().to_le_bytes()))
}

fn check_mlp(name: &str, net: &Mlp) -> Result<()> {
    if net.layers.is_empty() {
        return Err(Error::Config(format!("{name} has no layers")));
    }
    let mut prev_out = net.layers[0].in_dim;
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.in_dim != prev_out {
            return Err(Error::Config(format!(
                "{name} layer {i} consumes {} values but the previous layer emits {prev_out}",
                layer.in_dim
            )));
        }
        if layer.weight.len() != layer.in_dim * layer.out_dim || layer.bias.len() != layer.out_dim {
            return Err(Error::Config(format!(
                "{name} layer {i} parameter arrays do not match its {}x{} shape",
                layer.out_dim, layer.in_dim
            )));
        }
        prev_out = layer.out_dim;
    }
    Ok(())
}

impl Checkpoint {
    /// Bundles a snapshot, computing the decoder hash.
    pub fn new(
        model: VaeModel,
        flow: Option<FlowPosterior>,
        config: ExperimentConfig,
        seed: u64,
        epoch: usize,
        lambda: f64,
        curve: Vec<EpochRecord>,
    ) -> Self {
        let hash = decoder_hash(&model.decoder);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            flow,
            seed,
            epoch,
            lambda,
            decoder_hash: hash,
            config,
            curve,
        }
    }

    /// Checks the version, every parameter-array shape, and the stored
    /// decoder hash.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        check_mlp("encoder", &self.model.encoder)?;
        check_mlp("decoder", &self.model.decoder)?;
        // Re-runs the construction-time shape contracts.
        VaeModel::new(
            self.model.latent_dim,
            self.model.decoder.clone(),
            self.model.encoder.clone(),
            self.model.likelihood,
        )?;
        if let Some(flow) = &self.flow {
            for (i, step) in flow.steps.iter().enumerate() {
                for (part, net) in [
                    ("scale1", &step.scale1),
                    ("shift1", &step.shift1),
                    ("scale2", &step.scale2),
                    ("shift2", &step.shift2),
                ] {
                    check_mlp(&format!("flow step {i} {part}"), net)?;
                }
            }
            if let FlowKind::Auxiliary { v_base, reverse, .. } = &flow.kind {
                check_mlp("reverse model", reverse)?;
                if let VBase::Conditional(net) = v_base {
                    check_mlp("auxiliary base", net)?;
                }
            }
            flow.validate(self.model.latent_dim, self.model.data_dim())?;
        }
        let actual = decoder_hash(&self.model.decoder);
        if actual != self.decoder_hash {
            return Err(Error::Config(format!(
                "decoder hash {actual:#018x} does not match the stored {:#018x}",
                self.decoder_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
