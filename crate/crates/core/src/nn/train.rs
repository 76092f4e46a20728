//! Training loops: erasure-augmented classifier training and the public-data
//! decoder prior.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::arch::{ArchKind, ArchSpec};
use super::loss::{argmax, softmax_cross_entropy};
use super::model::{build_model, extract_features, TrainedModel};
use super::network::Network;
use super::optim::{Adam, OptimizerConfig};
use crate::batch::ImageBatch;
use crate::erasing::{augment_sites, ErasePolicy, SampleSite};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "constant_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Fraction of `epochs` actually run.
    #[serde(default = "one")]
    pub epoch_budget_fraction: f64,
}

fn constant_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 2e-3,
            lr_schedule: LrSchedule::Constant,
            optimizer: OptimizerConfig::default(),
            epoch_budget_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epoch_budget_fraction) {
            return Err(Error::Config(format!(
                "epoch_budget_fraction {} outside [0,1]",
                self.epoch_budget_fraction
            )));
        }
        Ok(())
    }

    pub fn epochs_to_run(&self) -> usize {
        (self.epochs as f64 * self.epoch_budget_fraction).round() as usize
    }
}

/// What a model was trained with; stored in its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config: TrainConfig,
    pub policy: ErasePolicy,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Natural accuracy on the unmasked held-out split.
    pub test_acc: Option<f64>,
    /// Per-pixel reconstruction error on held-out images (decoders).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_loss: Option<f64>,
}

/// Minibatch exactly as it enters the loss, handed to training hooks.
pub struct TrainStep<'a> {
    pub epoch: usize,
    pub step: usize,
    pub inputs: &'a ImageBatch,
    pub sites: &'a [SampleSite],
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("shuffle"), epoch as u64]));
    order
}

pub fn train_classifier(
    model: &TrainedModel,
    train: &ImageBatch,
    test: &ImageBatch,
    policy: &ErasePolicy,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    train_classifier_with_hook(model, train, test, policy, config, seed, &mut |_| {})
}

/// Minibatch training where every minibatch is masked by `policy` before the
/// gradient step. Accuracy on `test` is measured without masking.
pub fn train_classifier_with_hook(
    model: &TrainedModel,
    train: &ImageBatch,
    test: &ImageBatch,
    policy: &ErasePolicy,
    config: &TrainConfig,
    seed: u64,
    hook: &mut dyn FnMut(&TrainStep<'_>),
) -> Result<TrainedModel> {
    config.validate()?;
    policy.validate()?;
    if !model.arch.is_classifier() {
        return Err(Error::Config("train_classifier needs a classifier architecture".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let classes = model.arch.num_classes();
    if train.num_classes() > classes || test.num_classes() > classes {
        return Err(Error::Config(format!("labels exceed the model's {classes} classes")));
    }
    let epochs = config.epochs_to_run();
    if epochs == 0 {
        return Ok(model.clone());
    }
    let net = model.network()?;
    let policy = ErasePolicy {
        fill: policy.fill.resolved(&train.channel_means()),
        ..policy.clone()
    };
    policy.fill.validate(Some(train.geometry.channels))?;
    let mask_seed = rng::derive_seed(seed, &[rng::tag("mask")]);
    let sites = SampleSite::from_labels(&train.labels);

    let mut params = model.params.clone();
    let mut grad = vec![0f32; params.len()];
    let mut opt = Adam::new(config.optimizer, config.learning_rate, params.len());
    let mut history = model.history.clone();
    let mut trained = model.clone();

    for epoch in 0..epochs {
        let order = shuffled(train.len(), seed, epoch);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let mut inputs = train.select(idx);
            let batch_sites: Vec<SampleSite> = idx.iter().map(|&i| sites[i]).collect();
            augment_sites(&mut inputs, &batch_sites, &policy, epoch as u64, mask_seed)?;
            hook(&TrainStep { epoch, step, inputs: &inputs, sites: &batch_sites });

            let n = inputs.len();
            let acts = net.forward(&params, &inputs.data, n)?;
            let logits = net.output(&acts);
            let (losses, mut dlogits) = softmax_cross_entropy(&logits, &inputs.labels, classes);
            let batch_loss: f64 = losses.iter().map(|&l| l as f64).sum();
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            loss_sum += batch_loss;
            hits += logits
                .chunks_exact(classes)
                .zip(&inputs.labels)
                .filter(|(row, &y)| argmax(row) == y as usize)
                .count();
            let scale = 1.0 / n as f32;
            dlogits.iter_mut().for_each(|g| *g *= scale);
            grad.fill(0.0);
            net.backward(&params, &acts, &dlogits, Some(&mut grad), false)?;
            opt.step(&mut params, &grad);
        }
        trained.params.clone_from(&params);
        let test_acc = if test.is_empty() { None } else { Some(extract_features(&trained, test)?.accuracy()) };
        history.push(EpochStats {
            epoch: history.len(),
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            test_acc,
            heldout_loss: None,
        });
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    trained.history = history;
    trained.train_config = Some(TrainRecord {
        config: config.clone(),
        policy,
        seed,
        decoder: None,
    });
    Ok(trained)
}

/// Settings for fitting the latent decoder as the generator half of a
/// noise-regularized autoencoder on public images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub train: TrainConfig,
    /// Std of Gaussian noise added to codes before decoding.
    pub latent_noise: f64,
    /// Weight of the mean squared code norm.
    pub latent_penalty: f64,
    /// Public samples per identity held out for the reconstruction check.
    pub holdout_per_identity: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            train: TrainConfig {
                epochs: 60,
                batch_size: 32,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            latent_noise: 0.2,
            latent_penalty: 0.01,
            holdout_per_identity: 2,
        }
    }
}

fn mse_per_pixel(recon: &[f32], target: &[f32]) -> f64 {
    recon.iter().zip(target).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / target.len().max(1) as f64
}

/// Trains a decoder `z -> image` on public data. The paired encoder is
/// discarded; only the decoder is returned.
pub fn train_decoder(public: &ImageBatch, arch: &ArchSpec, config: &DecoderConfig, seed: u64) -> Result<TrainedModel> {
    config.train.validate()?;
    if arch.kind != ArchKind::Decoder {
        return Err(Error::Config("train_decoder needs a decoder architecture".into()));
    }
    if public.is_empty() {
        return Err(Error::Config("cannot train a decoder on an empty public split".into()));
    }
    let g = public.geometry;
    let latent = arch.latent_dim();
    let dec_net = Network::new(arch)?;
    if dec_net.output_shape().len() != g.len() {
        return Err(Error::Shape("decoder output does not match public image geometry".into()));
    }
    let enc_arch = ArchSpec::encoder(g, latent);
    let enc_net = Network::new(&enc_arch)?;

    let (mut train_idx, mut hold_idx) = (Vec::new(), Vec::new());
    for label in 0..public.num_classes() as u32 {
        let rows = public.indices_of(label);
        let keep = rows.len().saturating_sub(config.holdout_per_identity).max(1);
        train_idx.extend_from_slice(&rows[..keep.min(rows.len())]);
        hold_idx.extend_from_slice(&rows[keep.min(rows.len())..]);
    }
    let train = public.select(&train_idx);
    let heldout = public.select(&hold_idx);

    let mut dec = build_model(arch, rng::derive_seed(seed, &[rng::tag("decoder")]))?;
    let mut enc = enc_net.init_params(rng::derive_seed(seed, &[rng::tag("encoder")]));
    let (nd, ne) = (dec.params.len(), enc.len());
    let mut opt = Adam::new(config.train.optimizer, config.train.learning_rate, nd + ne);
    let mut grad_dec = vec![0f32; nd];
    let mut grad_enc = vec![0f32; ne];
    let noise = config.latent_noise as f32;
    let penalty = config.latent_penalty as f32;
    let mut history = Vec::new();

    for epoch in 0..config.train.epochs_to_run() {
        let order = shuffled(train.len(), seed, epoch);
        let mut loss_sum = 0.0f64;
        for (step, idx) in order.chunks(config.train.batch_size).enumerate() {
            let x = train.select(idx);
            let n = x.len();
            let enc_acts = enc_net.forward(&enc, &x.data, n)?;
            let codes = enc_net.output(&enc_acts);
            let mut r = rng::stream(seed, &[rng::tag("latent-noise"), epoch as u64, step as u64]);
            let noisy: Vec<f32> = codes
                .iter()
                .map(|&c| c + noise * Distribution::<f32>::sample(&StandardNormal, &mut r))
                .collect();
            let dec_acts = dec_net.forward(&dec.params, &noisy, n)?;
            let recon = dec_net.output(&dec_acts);
            let rec_loss = mse_per_pixel(&recon, &x.data);
            let code_loss = codes.iter().map(|&c| (c * c) as f64).sum::<f64>() / (n * latent) as f64;
            let loss = rec_loss + penalty as f64 * code_loss;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("decoder loss non-finite at epoch {epoch}")));
            }
            loss_sum += loss * n as f64;

            let scale = 2.0 / x.data.len() as f32;
            let drecon: Vec<f32> = recon.iter().zip(&x.data).map(|(a, b)| scale * (a - b)).collect();
            grad_dec.fill(0.0);
            grad_enc.fill(0.0);
            let dnoisy = dec_net
                .backward(&dec.params, &dec_acts, &drecon, Some(&mut grad_dec), true)?
                .expect("input gradient requested");
            let code_scale = 2.0 * penalty / (n * latent) as f32;
            let dcodes: Vec<f32> = dnoisy.iter().zip(&codes).map(|(g, c)| g + code_scale * c).collect();
            enc_net.backward(&enc, &enc_acts, &dcodes, Some(&mut grad_enc), false)?;
            opt.tick();
            opt.step_slice(0, &mut dec.params, &grad_dec);
            opt.step_slice(nd, &mut enc, &grad_enc);
        }
        let heldout_loss = if heldout.is_empty() {
            None
        } else {
            let acts = enc_net.forward(&enc, &heldout.data, heldout.len())?;
            let recon = dec.decode(&enc_net.output(&acts), heldout.len())?;
            Some(mse_per_pixel(&recon, &heldout.data))
        };
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: 0.0,
            test_acc: None,
            heldout_loss,
        });
    }
    if dec.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("decoder parameters became non-finite".into()));
    }
    dec.history = history;
    dec.train_config = Some(TrainRecord {
        config: config.train.clone(),
        policy: ErasePolicy::no_defense(),
        seed,
        decoder: Some(config.clone()),
    });
    Ok(dec)
}
