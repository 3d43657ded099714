//! Minibatch training of the annealed bound, with entropy warm-up, snapshot
//! collection, divergence recovery, and frozen-decoder encoder retraining.

use rand::seq::SliceRandom;

use super::checkpoint::{decoder_hash, Checkpoint, EpochRecord};
use super::config::ExperimentConfig;
use super::dataset::{Dataset, Split};
use crate::bounds::{elbo, Posterior};
use crate::diffnet::{Activation, AdamHyper, AdamState, Mlp, MlpGrads};
use crate::error::{Error, Result};
use crate::flows::{CouplingStep, FlowGrads, FlowKind, FlowPosterior, ReverseConditioning, VBase};
use crate::localopt::Family;
use crate::model::VaeModel;
use crate::objective::{annealed_grad, ObjectiveGrads};
use crate::rng::derive_rng;

/// Entropy weight for the given epoch: a linear ramp over the warm-up
/// epochs, or always one when no warm-up is configured.
pub fn lambda_at(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

/// A finished (or aborted) training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final state, or the last epoch that was still finite.
    pub checkpoint: Checkpoint,
    /// True when training aborted on a non-finite objective.
    pub diverged: bool,
}

/// Builds the configured encoder/decoder pair for the given pixel count.
pub fn build_model(
    config: &ExperimentConfig,
    data_dim: usize,
    rng: &mut crate::rng::Prng,
) -> Result<VaeModel> {
    let m = &config.model;
    let mut enc_dims = vec![data_dim];
    enc_dims.extend_from_slice(&m.encoder_hidden);
    enc_dims.push(2 * m.latent_dim);
    let encoder = Mlp::xavier(&enc_dims, m.activation, Activation::Identity, rng);

    let out_dim = match m.likelihood {
        crate::model::Likelihood::BernoulliLogits => data_dim,
        crate::model::Likelihood::DiagonalGaussian => 2 * data_dim,
    };
    let mut dec_dims = vec![m.latent_dim];
    dec_dims.extend_from_slice(&m.decoder_hidden);
    dec_dims.push(out_dim);
    let decoder = Mlp::xavier(&dec_dims, m.activation, Activation::Identity, rng);

    VaeModel::new(m.latent_dim, decoder, encoder, m.likelihood)
}

/// Builds the amortized flow for the configured family; the auxiliary flow
/// conditions its base on z and its reverse model on (x, z).
pub fn build_amortized_flow(
    config: &ExperimentConfig,
    data_dim: usize,
    rng: &mut crate::rng::Prng,
) -> Result<Option<FlowPosterior>> {
    let m = &config.model;
    let dim = m.latent_dim;
    let flow = match m.family {
        Family::Ffg => None,
        Family::Flow => {
            let steps = (0..m.flow_steps)
                .map(|_| CouplingStep::xavier(dim / 2, &m.flow_hidden, m.activation, rng))
                .collect();
            Some(FlowPosterior { steps, kind: FlowKind::SplitLatent })
        }
        Family::AuxFlow => {
            let steps = (0..m.flow_steps)
                .map(|_| CouplingStep::xavier(dim, &m.flow_hidden, m.activation, rng))
                .collect();
            let mut base_dims = vec![dim];
            base_dims.extend_from_slice(&m.flow_hidden);
            base_dims.push(2 * dim);
            let mut rev_dims = vec![data_dim + dim];
            rev_dims.extend_from_slice(&m.flow_hidden);
            rev_dims.push(2 * dim);
            Some(FlowPosterior {
                steps,
                kind: FlowKind::Auxiliary {
                    v_base: VBase::Conditional(Mlp::xavier(
                        &base_dims,
                        m.activation,
                        Activation::Identity,
                        rng,
                    )),
                    reverse: Mlp::xavier(&rev_dims, m.activation, Activation::Identity, rng),
                    conditioning: ReverseConditioning::DataAndLatent,
                },
            })
        }
    };
    if let Some(f) = &flow {
        f.validate(dim, data_dim)?;
    }
    Ok(flow)
}

fn adam_update_mlp(net: &mut Mlp, grads: &MlpGrads, adam: &mut AdamState) -> Result<()> {
    let mut params = Vec::with_capacity(net.n_params());
    net.write_params(&mut params);
    let mut g = Vec::with_capacity(params.len());
    grads.write_flat(&mut g);
    for v in &mut g {
        *v = -*v;
    }
    adam.step(&mut params, &g)?;
    net.read_params(&params);
    Ok(())
}

fn adam_update_flow(flow: &mut FlowPosterior, grads: &FlowGrads, adam: &mut AdamState) -> Result<()> {
    let mut params = Vec::with_capacity(flow.n_params());
    flow.write_params(&mut params);
    let mut g = Vec::with_capacity(params.len());
    grads.write_flat(&mut g);
    for v in &mut g {
        *v = -*v;
    }
    adam.step(&mut params, &g)?;
    flow.read_params(&params);
    Ok(())
}

fn accumulate_obj(acc: &mut Option<ObjectiveGrads>, g: ObjectiveGrads) {
    match acc {
        None => *acc = Some(g),
        Some(a) => {
            a.decoder.accumulate(&g.decoder);
            if let (Some(ae), Some(ge)) = (a.encoder.as_mut(), g.encoder.as_ref()) {
                ae.accumulate(ge);
            }
            if let (Some(af), Some(gf)) = (a.flow.as_mut(), g.flow.as_ref()) {
                af.accumulate(gf);
            }
        }
    }
}

fn scale_obj(g: &mut ObjectiveGrads, c: f64) {
    g.decoder.scale(c);
    if let Some(e) = g.encoder.as_mut() {
        e.scale(c);
    }
    if let Some(f) = g.flow.as_mut() {
        f.scale(c);
    }
}

/// Mean full bound (entropy weight one) over a fixed subset.
fn subset_bound(
    model: &VaeModel,
    flow: Option<&FlowPosterior>,
    dataset: &Dataset,
    subset: &[usize],
    n_samples: usize,
    rng: &mut crate::rng::Prng,
) -> Result<f64> {
    let q = match flow {
        Some(f) => Posterior::AmortizedFlow(f),
        None => Posterior::AmortizedFfg,
    };
    let mut total = 0.0;
    for &i in subset {
        total += elbo(model, &q, &dataset.images[i], n_samples, rng)?.value;
    }
    Ok(total / subset.len() as f64)
}

struct EpochLoop<'a> {
    config: &'a ExperimentConfig,
    dataset: &'a Dataset,
    update_decoder: bool,
    train_idx: Vec<usize>,
    eval_train: Vec<usize>,
    eval_val: Vec<usize>,
}

impl EpochLoop<'_> {
    fn checkpoint(
        &self,
        model: &VaeModel,
        flow: &Option<FlowPosterior>,
        epoch: usize,
        curve: &[EpochRecord],
    ) -> Checkpoint {
        Checkpoint::new(
            model.clone(),
            flow.clone(),
            self.config.clone(),
            self.config.train.seed,
            epoch,
            lambda_at(epoch, self.config.train.warmup_epochs),
            curve.to_vec(),
        )
    }

    fn eval_record(
        &self,
        model: &VaeModel,
        flow: &Option<FlowPosterior>,
        epoch: usize,
        lambda: f64,
    ) -> Result<EpochRecord> {
        let seed = self.config.train.seed;
        let n = self.config.train.eval_samples;
        let mut rng = derive_rng(seed, "epoch-eval", epoch as u64);
        let train_bound = subset_bound(model, flow.as_ref(), self.dataset, &self.eval_train, n, &mut rng)?;
        let val_bound = subset_bound(model, flow.as_ref(), self.dataset, &self.eval_val, n, &mut rng)?;
        Ok(EpochRecord { epoch, lambda, train_bound, val_bound })
    }

    fn run(
        &self,
        mut model: VaeModel,
        mut flow: Option<FlowPosterior>,
        snapshot_epochs: &[usize],
    ) -> Result<(TrainOutcome, Vec<Checkpoint>)> {
        let t = &self.config.train;
        let hyper = AdamHyper::with_lr(t.learning_rate);
        let mut adam_enc = AdamState::new(model.encoder.n_params(), hyper);
        let mut adam_dec = AdamState::new(model.decoder.n_params(), hyper);
        let mut adam_flow = flow.as_ref().map(|f| AdamState::new(f.n_params(), hyper));

        let mut curve = vec![self.eval_record(&model, &flow, 0, lambda_at(0, t.warmup_epochs))?];
        let mut snapshots = Vec::new();
        let mut last_good = (model.clone(), flow.clone(), 0usize, curve.clone());
        let mut global_step = 0u64;

        let diverged_outcome = |this: &Self,
                                snapshots: Vec<Checkpoint>,
                                last: (VaeModel, Option<FlowPosterior>, usize, Vec<EpochRecord>)| {
            let (m, f, e, c) = last;
            Ok((
                TrainOutcome { checkpoint: this.checkpoint(&m, &f, e, &c), diverged: true },
                snapshots,
            ))
        };

        for epoch in 0..t.epochs {
            if snapshot_epochs.contains(&epoch) {
                snapshots.push(self.checkpoint(&model, &flow, epoch, &curve));
            }
            let lambda = lambda_at(epoch, t.warmup_epochs);
            let mut order = self.train_idx.clone();
            order.shuffle(&mut derive_rng(t.seed, "epoch-shuffle", epoch as u64));

            for batch in order.chunks(t.batch_size) {
                let mut rng = derive_rng(t.seed, "train-step", global_step);
                global_step += 1;
                let mut acc: Option<ObjectiveGrads> = None;
                let mut batch_value = 0.0;
                let mut numerical_failure = false;
                {
                    let q = match &flow {
                        Some(f) => Posterior::AmortizedFlow(f),
                        None => Posterior::AmortizedFfg,
                    };
                    for &i in batch {
                        match annealed_grad(&model, &q, &self.dataset.images[i], 1, lambda, &mut rng)
                        {
                            Ok((value, grads)) => {
                                batch_value += value;
                                accumulate_obj(&mut acc, grads);
                            }
                            Err(Error::Numerical(_)) => {
                                numerical_failure = true;
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                if numerical_failure || !batch_value.is_finite() {
                    return diverged_outcome(self, snapshots, last_good);
                }
                let mut grads = acc.expect("non-empty batch");
                scale_obj(&mut grads, 1.0 / batch.len() as f64);

                let enc_grads = grads.encoder.as_ref().expect("amortized training");
                let step = adam_update_mlp(&mut model.encoder, enc_grads, &mut adam_enc)
                    .and_then(|()| {
                        if self.update_decoder {
                            adam_update_mlp(&mut model.decoder, &grads.decoder, &mut adam_dec)
                        } else {
                            Ok(())
                        }
                    })
                    .and_then(|()| match (&mut flow, grads.flow.as_ref(), adam_flow.as_mut()) {
                        (Some(f), Some(g), Some(a)) => adam_update_flow(f, g, a),
                        _ => Ok(()),
                    });
                match step {
                    Ok(()) => {}
                    Err(Error::Numerical(_)) => return diverged_outcome(self, snapshots, last_good),
                    Err(e) => return Err(e),
                }
            }

            match self.eval_record(&model, &flow, epoch + 1, lambda) {
                Ok(record) if record.train_bound.is_finite() && record.val_bound.is_finite() => {
                    curve.push(record);
                }
                Ok(_) | Err(Error::Numerical(_)) => {
                    return diverged_outcome(self, snapshots, last_good)
                }
                Err(e) => return Err(e),
            }
            last_good = (model.clone(), flow.clone(), epoch + 1, curve.clone());
        }

        if snapshot_epochs.contains(&t.epochs) {
            snapshots.push(self.checkpoint(&model, &flow, t.epochs, &curve));
        }
        let checkpoint = self.checkpoint(&model, &flow, t.epochs, &curve);
        Ok((TrainOutcome { checkpoint, diverged: false }, snapshots))
    }
}

fn epoch_loop<'a>(
    config: &'a ExperimentConfig,
    dataset: &'a Dataset,
    update_decoder: bool,
) -> Result<EpochLoop<'a>> {
    config.validate()?;
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("no training datapoints after the split".into()));
    }
    let val_idx = dataset.indices_of(Split::Val);
    let eval_train: Vec<usize> =
        train_idx.iter().take(config.train.eval_points.max(1)).copied().collect();
    // With no validation split the validation curve mirrors the training one.
    let eval_val: Vec<usize> = if val_idx.is_empty() {
        eval_train.clone()
    } else {
        val_idx.iter().take(config.train.eval_points.max(1)).copied().collect()
    };
    Ok(EpochLoop { config, dataset, update_decoder, train_idx, eval_train, eval_val })
}

/// Trains the configured model from scratch.
pub fn train(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with_snapshots(config, dataset, &[]).map(|(outcome, _)| outcome)
}

/// Trains while collecting checkpoints at the requested epoch numbers;
/// epoch 0 denotes the untrained initialization.
pub fn train_with_snapshots(
    config: &ExperimentConfig,
    dataset: &Dataset,
    snapshot_epochs: &[usize],
) -> Result<(TrainOutcome, Vec<Checkpoint>)> {
    let driver = epoch_loop(config, dataset, true)?;
    let mut rng = derive_rng(config.train.seed, "model-init", 0);
    let model = build_model(config, dataset.dim(), &mut rng)?;
    let flow = build_amortized_flow(config, dataset.dim(), &mut rng)?;
    driver.run(model, flow, snapshot_epochs)
}

/// Retrains a fresh encoder (and flow, per the new config's family) against
/// the checkpoint's frozen decoder. The decoder is verified unchanged by
/// parameter hash.
pub fn retrain_encoder(
    base: &Checkpoint,
    config: &ExperimentConfig,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    base.validate()?;
    if config.model.latent_dim != base.model.latent_dim {
        return Err(Error::Config(format!(
            "retraining latent_dim {} against a decoder built for {}",
            config.model.latent_dim, base.model.latent_dim
        )));
    }
    if config.model.likelihood != base.model.likelihood {
        return Err(Error::Config("retraining cannot change the likelihood".into()));
    }
    if dataset.dim() != base.model.data_dim() {
        return Err(Error::Dataset(format!(
            "dataset has {} pixels but the decoder emits {}",
            dataset.dim(),
            base.model.data_dim()
        )));
    }
    let driver = epoch_loop(config, dataset, false)?;
    let mut rng = derive_rng(config.train.seed, "retrain-init", 0);
    let fresh = build_model(config, dataset.dim(), &mut rng)?;
    let flow = build_amortized_flow(config, dataset.dim(), &mut rng)?;
    let model =
        VaeModel::new(base.model.latent_dim, base.model.decoder.clone(), fresh.encoder, base.model.likelihood)?;
    let (outcome, _) = driver.run(model, flow, &[])?;
    assert_eq!(
        decoder_hash(&outcome.checkpoint.model.decoder),
        base.decoder_hash,
        "frozen decoder moved during retraining"
    );
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DataSpec;
    use crate::harness::dataset::GaussDataConfig;
    use crate::model::Likelihood;

    fn tiny_config(family: Family) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset("viz2d", false).unwrap();
        cfg.preset = "custom".into();
        cfg.data = DataSpec::Gauss(GaussDataConfig {
            latent_dim: 2,
            data_dim: 4,
            n_points: 20,
            noise_logvar: -1.0,
            map_scale: 1.0,
            seed: 5,
        });
        cfg.model.latent_dim = 2;
        cfg.model.likelihood = Likelihood::DiagonalGaussian;
        cfg.model.encoder_hidden = vec![8];
        cfg.model.decoder_hidden = vec![8];
        cfg.model.family = family;
        cfg.model.flow_steps = 1;
        cfg.model.flow_hidden = vec![6];
        cfg.train.epochs = 2;
        cfg.train.batch_size = 5;
        cfg.train.learning_rate = 1e-2;
        cfg.train.warmup_epochs = 0;
        cfg.train.val_fraction = 0.2;
        cfg.train.eval_points = 4;
        cfg.train.eval_samples = 1000;
        cfg.train.seed = 3;
        cfg
    }

    #[test]
    fn lambda_ramps_linearly_and_saturates() {
        assert_eq!(lambda_at(0, 4), 0.0);
        assert_eq!(lambda_at(2, 4), 0.5);
        assert_eq!(lambda_at(4, 4), 1.0);
        assert_eq!(lambda_at(9, 4), 1.0);
        assert_eq!(lambda_at(0, 0), 1.0);
    }

    #[test]
    fn one_epoch_improves_the_bound_on_most_seeds() {
        let mut improved = 0;
        for seed in 0..10 {
            let mut cfg = tiny_config(Family::Ffg);
            cfg.train.epochs = 1;
            cfg.train.batch_size = 2;
            cfg.train.seed = 100 + seed;
            let dataset = cfg.load_dataset().unwrap();
            let outcome = train(&cfg, &dataset).unwrap();
            assert!(!outcome.diverged);
            let curve = &outcome.checkpoint.curve;
            assert_eq!(curve.len(), 2);
            if curve[1].train_bound > curve[0].train_bound {
                improved += 1;
            }
        }
        assert!(improved >= 9, "improved on {improved}/10 seeds");
    }

    #[test]
    fn warmup_schedule_is_recorded_per_epoch() {
        let mut cfg = tiny_config(Family::Ffg);
        cfg.train.epochs = 3;
        cfg.train.warmup_epochs = 2;
        let dataset = cfg.load_dataset().unwrap();
        let outcome = train(&cfg, &dataset).unwrap();
        let lambdas: Vec<f64> = outcome.checkpoint.curve.iter().map(|r| r.lambda).collect();
        // Record 0 is the pre-training state; epoch e trains with lambda_at(e).
        assert_eq!(lambdas, vec![0.0, 0.0, 0.5, 1.0]);
        assert_eq!(outcome.checkpoint.lambda, 1.0);
        assert_eq!(outcome.checkpoint.epoch, 3);
    }

    #[test]
    fn exploding_learning_rate_aborts_with_the_last_good_epoch() {
        let mut cfg = tiny_config(Family::Ffg);
        cfg.train.epochs = 6;
        cfg.train.learning_rate = 1e6;
        let dataset = cfg.load_dataset().unwrap();
        let outcome = train(&cfg, &dataset).unwrap();
        assert!(outcome.diverged);
        assert!(outcome.checkpoint.epoch < 6, "kept epoch {}", outcome.checkpoint.epoch);
        // The kept snapshot is still finite end to end.
        outcome.checkpoint.validate().unwrap();
        for r in &outcome.checkpoint.curve {
            assert!(r.train_bound.is_finite());
        }
    }

    #[test]
    fn snapshots_cover_requested_epochs_including_initialization() {
        let mut cfg = tiny_config(Family::Ffg);
        cfg.train.epochs = 3;
        let dataset = cfg.load_dataset().unwrap();
        let (outcome, snaps) = train_with_snapshots(&cfg, &dataset, &[0, 2, 3]).unwrap();
        assert_eq!(snaps.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![0, 2, 3]);
        // Epoch-0 snapshot has only the pre-training record.
        assert_eq!(snaps[0].curve.len(), 1);
        assert_eq!(snaps[2].curve.len(), 4);
        // The final snapshot is the returned checkpoint.
        let a = serde_json::to_string(&snaps[2]).unwrap();
        let b = serde_json::to_string(&outcome.checkpoint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = tiny_config(Family::AuxFlow);
        let dataset = cfg.load_dataset().unwrap();
        let once = train(&cfg, &dataset).unwrap();
        let again = train(&cfg, &dataset).unwrap();
        let a = serde_json::to_string(&once.checkpoint).unwrap();
        let b = serde_json::to_string(&again.checkpoint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auxiliary_family_trains_all_parameter_groups() {
        let cfg = tiny_config(Family::AuxFlow);
        let dataset = cfg.load_dataset().unwrap();
        let mut rng = derive_rng(cfg.train.seed, "model-init", 0);
        let init_model = build_model(&cfg, dataset.dim(), &mut rng).unwrap();
        let init_flow = build_amortized_flow(&cfg, dataset.dim(), &mut rng).unwrap().unwrap();

        let outcome = train(&cfg, &dataset).unwrap();
        assert!(!outcome.diverged);
        let trained_flow = outcome.checkpoint.flow.as_ref().unwrap();
        let (mut f0, mut f1) = (Vec::new(), Vec::new());
        init_flow.write_params(&mut f0);
        trained_flow.write_params(&mut f1);
        assert_ne!(f0, f1, "flow parameters never moved");
        let (mut e0, mut e1) = (Vec::new(), Vec::new());
        init_model.encoder.write_params(&mut e0);
        outcome.checkpoint.model.encoder.write_params(&mut e1);
        assert_ne!(e0, e1, "encoder parameters never moved");
    }

    #[test]
    fn retraining_freezes_the_decoder_and_supports_linear_encoders() {
        let cfg = tiny_config(Family::Ffg);
        let dataset = cfg.load_dataset().unwrap();
        let base = train(&cfg, &dataset).unwrap().checkpoint;

        let mut re_cfg = cfg.clone();
        re_cfg.model.encoder_hidden = vec![];
        re_cfg.model.family = Family::Flow;
        re_cfg.train.seed = 77;
        re_cfg.train.epochs = 2;
        let outcome = retrain_encoder(&base, &re_cfg, &dataset).unwrap();
        assert!(!outcome.diverged);
        assert_eq!(outcome.checkpoint.decoder_hash, base.decoder_hash);

        let mut dec0 = Vec::new();
        base.model.decoder.write_params(&mut dec0);
        let mut dec1 = Vec::new();
        outcome.checkpoint.model.decoder.write_params(&mut dec1);
        assert_eq!(dec0, dec1);

        // No hidden layers: a single linear map into the posterior head.
        assert_eq!(outcome.checkpoint.model.encoder.layers.len(), 1);
        assert!(outcome.checkpoint.flow.is_some());

        let mut enc0 = Vec::new();
        base.model.encoder.write_params(&mut enc0);
        let mut enc1 = Vec::new();
        outcome.checkpoint.model.encoder.write_params(&mut enc1);
        assert_ne!(enc0, enc1);
    }

    #[test]
    fn retraining_rejects_mismatched_shapes() {
        let cfg = tiny_config(Family::Ffg);
        let dataset = cfg.load_dataset().unwrap();
        let base = train(&cfg, &dataset).unwrap().checkpoint;

        let mut bad = cfg.clone();
        bad.model.latent_dim = 4;
        assert!(matches!(retrain_encoder(&base, &bad, &dataset), Err(Error::Config(_))));
    }
}
