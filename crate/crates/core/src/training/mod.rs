//! Ablation training runs, reference classifiers and evaluation metrics.

pub mod classify;
pub mod data;
pub mod eval;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Preprocessing};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WaeModel, DECODER, DISCRIMINATOR, ENCODER, FILM};
use crate::objectives::{adversarial_nll, bce_logits, class_nll, mmd_rbf_median, LossWeights, Variant};
use crate::LATENT_DIM;
use data::{batches, spec_tensor, Dataset, Item};

pub use classify::{f1_macro, train_reference_classifier, Attribute, Classifier, ClassifierConfig, ClassifierReport, ClassifierSet};
pub use eval::{
    eval_conditioning, eval_latent, eval_reconstruction, evaluate, export_latent_map, ConditioningScores, EvalConfig,
    EvalReport, LatentPoint, LatentScores, ReconstructionScores,
};

/// Hyper-parameters of one auto-encoder training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// End of the reconstruction-only phase; see [`default_warmup_start`].
    pub warmup_start: Option<usize>,
}

impl TrainConfig {
    /// Full-size settings: Adam at 5e-4, batch 90.
    pub fn paper(variant: Variant) -> Self {
        Self {
            variant,
            model: ModelConfig::paper(),
            epochs: 400,
            batch_size: 90,
            learning_rate: 5e-4,
            seed: 0,
            warmup_start: None,
        }
    }

    /// Reduced geometry and smaller batches for CPU runs over a few hundred notes.
    pub fn desk(variant: Variant) -> Self {
        Self { model: ModelConfig::desk(), epochs: 60, batch_size: 24, ..Self::paper(variant) }
    }

    pub fn warmup_start(&self) -> usize {
        self.warmup_start.unwrap_or_else(|| default_warmup_start(self.epochs))
    }

    pub fn weights(&self) -> LossWeights {
        self.variant.weights(self.epochs, self.warmup_start())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::invalid("need at least one epoch and batches of two or more"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.model.validate()?;
        self.weights().validate()
    }
}

/// max(30, epochs/10), capped at a quarter of the run so short runs keep a ramp.
pub fn default_warmup_start(epochs: usize) -> usize {
    (epochs / 10).max(30).min(epochs / 4)
}

/// A fresh model shaped for `cfg` with the variant's conditioning.
pub fn build_model(cfg: &TrainConfig, n_style: usize) -> Result<WaeModel> {
    WaeModel::new(cfg.model.clone(), n_style, cfg.variant.conditioning(), DType::F32, cfg.seed)
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub alpha: f64,
    /// Training reconstruction BCE.
    pub recon: f64,
    pub mmd: f64,
    pub adversarial: f64,
    /// Discriminator classification NLL, zero without a discriminator.
    pub disc_nll: f64,
    pub disc_accuracy: f64,
    pub val_recon: f64,
    pub seconds: f64,
}

impl EpochLog {
    const HEADER: &'static str = "epoch,beta,alpha,recon,mmd,adversarial,disc_nll,disc_accuracy,val_recon,seconds";

    fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.6},{:.2}",
            self.epoch,
            self.beta,
            self.alpha,
            self.recon,
            self.mmd,
            self.adversarial,
            self.disc_nll,
            self.disc_accuracy,
            self.val_recon,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_recon: f64,
    pub checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRICS_LOG: &str = "metrics.csv";

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn styles(items: &[&Item]) -> Vec<u32> {
    items.iter().map(|i| i.style as u32).collect()
}

fn prior_sample(n: usize, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let v: Vec<f64> = (0..n * LATENT_DIM).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (n, LATENT_DIM), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean reconstruction BCE of `items` in evaluation mode.
pub fn reconstruction_bce(model: &WaeModel, items: &[&Item], batch_size: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("no items to evaluate"));
    }
    let mut total = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let x = spec_tensor(chunk, model.dtype())?;
        let conds = chunk.iter().map(|i| i.condition(model.n_style())).collect::<Result<Vec<_>>>()?;
        let z = model.encode(&x, false)?;
        let logits = model.decode_logits(&z, &model.condition_tensor(&conds)?, false)?;
        total += scalar(&bce_logits(&x, &logits)?)? * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Encoder, decoder and FiLM generator parameters. Without any active
/// condition the generator always sees the zero vector, so only its output
/// bias (a constant modulation) can learn; every hidden layer sits behind a
/// zero-variance batch norm whose true gradient is zero, and Adam would
/// otherwise turn rounding noise into parameter drift.
pub fn autoencoder_vars(model: &WaeModel) -> Vec<Var> {
    let c = model.conditioning();
    if c.note || c.style {
        model.trainable(&[ENCODER, DECODER, FILM])
    } else {
        model.trainable(&[ENCODER, DECODER, FILM_BIAS])
    }
}

const FILM_BIAS: &str = "film.out.bias";

fn check_data(model: &WaeModel, data: &Dataset) -> Result<()> {
    if model.n_style() != data.n_style() {
        return Err(Error::invalid(format!(
            "model has {} styles but the corpus has {}",
            model.n_style(),
            data.n_style()
        )));
    }
    if let Some(i) = data.items.iter().find(|i| i.style >= model.n_style()) {
        return Err(Error::invalid(format!("item {} has style {} outside the vocabulary", i.entry, i.style)));
    }
    Ok(())
}

/// One minibatch ready for a training step.
pub struct Batch {
    pub x: Tensor,
    pub cond: Tensor,
    pub styles: Vec<u32>,
}

impl Batch {
    pub fn new(model: &WaeModel, items: &[&Item]) -> Result<Self> {
        let conds = items.iter().map(|i| i.condition(model.n_style())).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: spec_tensor(items, model.dtype())?,
            cond: model.condition_tensor(&conds)?,
            styles: styles(items),
        })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }
}

/// Loss values of one auto-encoder step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub recon: f64,
    pub mmd: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Optimizers and random streams of a run. Steps fail with
/// [`Error::Diverged`] (epoch 0) before touching parameters when a loss is
/// not finite.
pub struct TrainState {
    ae_opt: AdamW,
    disc_opt: AdamW,
    prior_rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &WaeModel, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            ae_opt: adam(autoencoder_vars(model), cfg.learning_rate)?,
            disc_opt: adam(model.trainable(&[DISCRIMINATOR]), cfg.learning_rate)?,
            prior_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9),
            drop_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x85eb_ca6b),
        })
    }

    /// Updates only the discriminator on detached codes; returns (NLL, correct predictions).
    pub fn discriminator_step(&mut self, model: &WaeModel, z: &Tensor, styles: &[u32]) -> Result<(f64, usize)> {
        let probs = model.fader_discriminate(&z.detach(), Some(&mut self.drop_rng))?;
        let loss = class_nll(&probs, styles)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::Diverged { epoch: 0, last_good: None });
        }
        self.disc_opt.backward_step(&loss)?;
        let pred = probs.argmax(D::Minus1)?.to_vec1::<u32>()?;
        Ok((v, pred.iter().zip(styles).filter(|(p, t)| p == t).count()))
    }

    /// Updates the encoder, decoder and FiLM generator on BCE + β·MMD, plus
    /// α·adversarial NLL when `adversarial` is set. `z` must be the
    /// training-mode encoding of `batch.x`.
    pub fn autoencoder_step(
        &mut self,
        model: &WaeModel,
        batch: &Batch,
        z: &Tensor,
        beta: f64,
        alpha: f64,
        adversarial: bool,
    ) -> Result<StepLosses> {
        let recon = bce_logits(&batch.x, &model.decode_logits(z, &batch.cond, true)?)?;
        let mmd = mmd_rbf_median(z, &prior_sample(batch.len(), model.dtype(), &mut self.prior_rng)?)?;
        let mut loss = (&recon + (&mmd * beta)?)?;
        let mut adv_val = 0.0;
        if adversarial {
            let adv = adversarial_nll(&model.fader_discriminate(z, Some(&mut self.drop_rng))?, &batch.styles)?;
            adv_val = scalar(&adv)?;
            loss = (loss + (adv * alpha)?)?;
        }
        let total = scalar(&loss)?;
        if !total.is_finite() {
            return Err(Error::Diverged { epoch: 0, last_good: None });
        }
        self.ae_opt.backward_step(&loss)?;
        Ok(StepLosses { recon: scalar(&recon)?, mmd: scalar(&mmd)?, adversarial: adv_val, total })
    }
}

/// Trains `model` in place and leaves it at the best-validation epoch.
///
/// Each step encodes the batch once. For the Fader variant the
/// discriminator is first updated on the detached codes, then the
/// auto-encoder on BCE + β·MMD + α·adversarial NLL against the updated
/// discriminator. Candidates for the best epoch start once β and α have
/// reached their targets. With `out` set the best checkpoint and a per-epoch
/// CSV log are written there.
pub fn train(model: &WaeModel, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data)?;
    if model.conditioning() != cfg.variant.conditioning() {
        return Err(Error::invalid(format!("model conditioning does not match variant {}", cfg.variant)));
    }
    let train_items = data.split(Split::Train);
    if train_items.len() < 2 {
        return Err(Error::invalid("train split needs at least two items"));
    }
    let val_split = data.split(Split::Validation);
    let val_items = if val_split.is_empty() { train_items.clone() } else { val_split };
    let weights = cfg.weights();
    let select_from = weights.warmup_end.min(cfg.epochs - 1);
    let adversarial = cfg.variant.adversarial();
    let pre = Preprocessing { style_vocab: data.style_vocab.clone(), ref_max: data.ref_max, octaves: data.octaves() };

    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_LOG);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", EpochLog::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let best_path = out.map(|d| d.join(BEST_CHECKPOINT));

    let mut state = TrainState::new(model, cfg)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.store().snapshot()?;
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (beta, alpha) = weights.at(epoch);
        let mut sums = [0.0f64; 5];
        let mut seen = 0usize;
        let saved = || best.as_ref().and(best_path.clone());
        for items in batches(&train_items, cfg.batch_size, &mut shuffle_rng) {
            let batch = Batch::new(model, &items)?;
            let n = batch.len() as f64;
            let z = model.encode(&batch.x, true)?;
            let step = (|| {
                if adversarial {
                    let (nll, correct) = state.discriminator_step(model, &z, &batch.styles)?;
                    sums[3] += nll * n;
                    sums[4] += correct as f64;
                }
                state.autoencoder_step(model, &batch, &z, beta, alpha, adversarial)
            })();
            let losses = match step {
                Ok(l) => l,
                Err(Error::Diverged { .. }) => return Err(diverged(model, &last_good, epoch, saved())),
                Err(e) => return Err(e),
            };
            sums[0] += losses.recon * n;
            sums[1] += losses.mmd * n;
            sums[2] += losses.adversarial * n;
            seen += batch.len();
        }
        let val_recon = reconstruction_bce(model, &val_items, cfg.batch_size)?;
        if !val_recon.is_finite() {
            return Err(diverged(model, &last_good, epoch, saved()));
        }
        let m = |v: f64| v / seen as f64;
        let entry = EpochLog {
            epoch,
            beta,
            alpha,
            recon: m(sums[0]),
            mmd: m(sums[1]),
            adversarial: m(sums[2]),
            disc_nll: m(sums[3]),
            disc_accuracy: m(sums[4]),
            val_recon,
            seconds: started.elapsed().as_secs_f64(),
        };
        tracing::info!(variant = %cfg.variant, epoch, recon = entry.recon, val = val_recon, "epoch");
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", entry.csv()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        epochs.push(entry);
        last_good = model.store().snapshot()?;
        if epoch >= select_from && best.as_ref().is_none_or(|(_, v, _)| val_recon < *v) {
            if let Some(p) = &best_path {
                checkpoint::save(p, &pre, Some(cfg.variant), Some(model), None, false)?;
            }
            best = Some((epoch, val_recon, last_good.clone()));
        }
    }
    let (best_epoch, best_val_recon, snap) = best.expect("at least one candidate epoch");
    model.store().restore(&snap)?;
    Ok(TrainReport { variant: cfg.variant, epochs, best_epoch, best_val_recon, checkpoint: best_path })
}

fn diverged(model: &WaeModel, last_good: &[(String, Tensor)], epoch: usize, saved: Option<PathBuf>) -> Error {
    if let Err(e) = model.store().restore(last_good) {
        return e;
    }
    tracing::warn!(epoch, "non-finite loss, restored the last good parameters");
    Error::Diverged { epoch, last_good: saved }
}
