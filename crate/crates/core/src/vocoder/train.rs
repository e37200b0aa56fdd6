use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mcnn_loss, stft_magnitude_tensor, LossParts, Mcnn, SpectralTarget};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::model::{WaeModel, DECODER, FILM};
use crate::training::data::{batches, spec_tensor, wave_tensor, Dataset, Item};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McnnTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for McnnTrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 4, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean train-split loss before the first update.
    pub initial: LossParts,
    /// Mean training loss of every epoch.
    pub epochs: Vec<LossParts>,
}

pub type FinetuneConfig = McnnTrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<LossParts>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
    /// Mean linear-scale spectral convergence of test reconstructions.
    pub test_sc_before: f64,
    pub test_sc_after: f64,
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
}

fn check_finite(parts: &LossParts, epoch: usize) -> Result<()> {
    if parts.total().is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, last_good: None })
    }
}

fn train_items(data: &Dataset) -> Result<Vec<&Item>> {
    let items = data.split(Split::Train);
    if items.is_empty() {
        return Err(Error::invalid("empty train split"));
    }
    Ok(items)
}

/// Fits the vocoder to reproduce train-split waveforms from their Mel
/// spectrograms. On divergence the last good epoch is restored.
pub fn pretrain_mcnn(mcnn: &Mcnn, data: &Dataset, cfg: &McnnTrainConfig) -> Result<PretrainReport> {
    let items = train_items(data)?;
    let dt = mcnn.store().dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut initial = LossParts::default();
    for chunk in items.chunks(cfg.batch_size.max(1)) {
        let target = SpectralTarget::new(&wave_tensor(chunk, dt)?)?;
        let (_, parts) = mcnn_loss(&mcnn.forward(&spec_tensor(chunk, dt)?)?.detach(), &target)?;
        initial.add(&parts, chunk.len() as f64 / items.len() as f64);
    }
    let mut opt = adam(mcnn.trainable(), cfg.learning_rate)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut good = mcnn.store().snapshot()?;
    for epoch in 0..cfg.epochs {
        let mut acc = LossParts::default();
        for batch in batches(&items, cfg.batch_size, &mut rng) {
            let target = SpectralTarget::new(&wave_tensor(&batch, dt)?)?;
            let (loss, parts) = mcnn_loss(&mcnn.forward(&spec_tensor(&batch, dt)?)?, &target)?;
            if let Err(e) = check_finite(&parts, epoch) {
                mcnn.store().restore(&good)?;
                return Err(e);
            }
            opt.backward_step(&loss)?;
            acc.add(&parts, batch.len() as f64 / items.len() as f64);
        }
        tracing::info!(epoch, loss = acc.total(), "mcnn pretrain");
        epochs.push(acc);
        good = mcnn.store().snapshot()?;
    }
    Ok(PretrainReport { initial, epochs })
}

/// Mean linear-scale SC of decode→vocoder reconstructions of `items`.
pub fn spectral_convergence_of(model: &WaeModel, mcnn: &Mcnn, items: &[&Item], batch_size: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("no items to evaluate"));
    }
    let dt = model.dtype();
    let n_style = model.n_style();
    let mut total = 0.0;
    for chunk in items.chunks(batch_size.max(1)) {
        let wave = wave_tensor(chunk, dt)?;
        let y = reconstruct(model, mcnn, chunk, n_style, false)?;
        let s = stft_magnitude_tensor(&wave)?.to_dtype(DType::F64)?;
        let s_hat = stft_magnitude_tensor(&y)?.to_dtype(DType::F64)?;
        let num = (&s - &s_hat)?.sqr()?.sum((1, 2))?.sqrt()?;
        let den = s.sqr()?.sum((1, 2))?.sqrt()?;
        total += (num / den)?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total / items.len() as f64)
}

/// Frozen encoder, then decoder (and FiLM generator) and vocoder.
fn reconstruct(model: &WaeModel, mcnn: &Mcnn, items: &[&Item], n_style: usize, train: bool) -> Result<Tensor> {
    let x = spec_tensor(items, model.dtype())?;
    let z = model.encode(&x, false)?.detach();
    let conds = items.iter().map(|i| i.condition(n_style)).collect::<Result<Vec<_>>>()?;
    let y = model.decode(&z, &model.condition_tensor(&conds)?, train)?;
    mcnn.forward(&y)
}

/// Jointly optimizes the decoder, its FiLM generator and the vocoder on the
/// waveform loss, with the encoder frozen.
pub fn finetune_decoder(model: &WaeModel, mcnn: &Mcnn, data: &Dataset, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    if model.n_style() != data.n_style() {
        return Err(Error::invalid(format!("model has {} styles, data {}", model.n_style(), data.n_style())));
    }
    let items = train_items(data)?;
    let test = data.split(Split::Test);
    let eval_set = if test.is_empty() { items.clone() } else { test };
    let encoder_hash_before = model.hash(crate::model::ENCODER)?;
    let test_sc_before = spectral_convergence_of(model, mcnn, &eval_set, cfg.batch_size)?;
    let mut vars = model.trainable(&[DECODER, FILM]);
    vars.extend(mcnn.trainable());
    let mut opt = adam(vars, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = model.dtype();
    let mut good_model = model.store().snapshot()?;
    let mut good_mcnn = mcnn.store().snapshot()?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = LossParts::default();
        for batch in batches(&items, cfg.batch_size, &mut rng) {
            let target = SpectralTarget::new(&wave_tensor(&batch, dt)?)?;
            let y = reconstruct(model, mcnn, &batch, model.n_style(), true)?;
            let (loss, parts) = mcnn_loss(&y, &target)?;
            if let Err(e) = check_finite(&parts, epoch) {
                model.store().restore(&good_model)?;
                mcnn.store().restore(&good_mcnn)?;
                return Err(e);
            }
            opt.backward_step(&loss)?;
            acc.add(&parts, batch.len() as f64 / items.len() as f64);
        }
        tracing::info!(epoch, loss = acc.total(), "finetune");
        epochs.push(acc);
        good_model = model.store().snapshot()?;
        good_mcnn = mcnn.store().snapshot()?;
    }
    let test_sc_after = spectral_convergence_of(model, mcnn, &eval_set, cfg.batch_size)?;
    Ok(FinetuneReport {
        epochs,
        encoder_hash_before,
        encoder_hash_after: model.hash(crate::model::ENCODER)?,
        test_sc_before,
        test_sc_after,
    })
}
