//! Evaluation of trained auto-encoders.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::classify::{Attribute, ClassifierSet};
use super::data::{spec_tensor, Dataset, Item};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::model::{Discriminator, NoteCondition, WaeModel};
use crate::nn::ParamStore;
use crate::objectives::{class_nll, mmd_rbf_median, Variant};
use crate::spectral::{lsd, rmse, unscale, NormalizedSpectrogram};
use crate::{LATENT_DIM, N_SEMITONES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Prior samples per conditioning evaluation.
    pub n_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub post_epochs: usize,
    pub post_learning_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 1000, batch_size: 50, seed: 0, post_epochs: 200, post_learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionScores {
    /// Mean squared error on the normalized [0, 1] scale.
    pub mse: f64,
    pub rmse: f64,
    /// Log-spectral distance of the unscaled Mel magnitudes, dB.
    pub lsd: f64,
}

/// Scores `(target, reconstruction)` pairs, averaged over items.
pub fn reconstruction_scores(
    pairs: &[(NormalizedSpectrogram, NormalizedSpectrogram)],
    ref_max: f64,
) -> Result<ReconstructionScores> {
    if pairs.is_empty() {
        return Err(Error::invalid("no reconstructions to score"));
    }
    let (mut mse, mut rm, mut ls) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let r = rmse(x.values().view(), y.values().view())?;
        mse += r * r;
        rm += r;
        let (mx, my) = (unscale(x, ref_max)?, unscale(y, ref_max)?);
        ls += lsd(mx.magnitude().view(), my.magnitude().view())?;
    }
    let n = pairs.len() as f64;
    Ok(ReconstructionScores { mse: mse / n, rmse: rm / n, lsd: ls / n })
}

fn to_specs(t: &Tensor) -> Result<Vec<NormalizedSpectrogram>> {
    let (b, h, w) = t.dims3()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    v.chunks_exact(h * w).take(b).map(NormalizedSpectrogram::from_f32_slice).collect()
}

/// Encode then decode every test item with its own condition.
pub fn eval_reconstruction(model: &WaeModel, data: &Dataset, batch_size: usize) -> Result<ReconstructionScores> {
    let items = data.split(Split::Test);
    let mut pairs = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let x = spec_tensor(chunk, model.dtype())?;
        let conds = chunk.iter().map(|i| i.condition(model.n_style())).collect::<Result<Vec<_>>>()?;
        let y = model.decode(&model.encode(&x, false)?, &model.condition_tensor(&conds)?, false)?;
        pairs.extend(to_specs(&x)?.into_iter().zip(to_specs(&y)?));
    }
    reconstruction_scores(&pairs, data.ref_max)
}

/// Accuracy of reference classifiers on notes decoded from prior samples.
/// Fields are `None` where the model has no such condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningScores {
    /// Octave targets actually drawn: the requested range within the corpus.
    pub octaves: Vec<u8>,
    pub semitone: Option<f64>,
    pub octave: Option<f64>,
    pub style: Option<f64>,
}

/// Draws `n` latent points with uniform semitone and octave targets, decodes
/// each once per style and classifies every decode.
pub fn eval_conditioning(
    model: &WaeModel,
    classifiers: &ClassifierSet,
    octave_range: (u8, u8),
    corpus_octaves: &[u8],
    cfg: &EvalConfig,
) -> Result<ConditioningScores> {
    let octaves: Vec<u8> =
        corpus_octaves.iter().copied().filter(|o| (octave_range.0..=octave_range.1).contains(o)).collect();
    if octaves.is_empty() {
        return Err(Error::invalid(format!("no corpus octave inside {octave_range:?}")));
    }
    if cfg.n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let cond = model.conditioning();
    let semi = classifiers.get(Attribute::Semitone)?;
    let oct = classifiers.get(Attribute::Octave)?;
    let sty = classifiers.get(Attribute::Style)?;
    if sty.n_classes() != model.n_style() {
        return Err(Error::invalid("style classifier and model disagree on the number of styles"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z: Vec<f64> = (0..cfg.n_samples * LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let targets: Vec<(u8, u8)> = (0..cfg.n_samples)
        .map(|_| (rng.gen_range(0..N_SEMITONES as u8), *octaves.choose(&mut rng).unwrap()))
        .collect();
    // a model blind to style decodes the same note for every style
    let styles: Vec<usize> = if cond.style { (0..model.n_style()).collect() } else { vec![0] };
    let (mut hit_s, mut hit_o, mut hit_y, mut total) = (0usize, 0usize, 0usize, 0usize);
    let bs = cfg.batch_size.max(1);
    for &style in &styles {
        for start in (0..cfg.n_samples).step_by(bs) {
            let end = (start + bs).min(cfg.n_samples);
            let zt = Tensor::from_slice(&z[start * LATENT_DIM..end * LATENT_DIM], (end - start, LATENT_DIM), &Device::Cpu)?
                .to_dtype(model.dtype())?;
            let conds = targets[start..end]
                .iter()
                .map(|&(s, o)| NoteCondition::one_hot(s, o, style, model.n_style()))
                .collect::<Result<Vec<_>>>()?;
            let y = model.decode(&zt, &model.condition_tensor(&conds)?, false)?;
            let ps = semi.predict(&y)?;
            let po = oct.predict(&y)?;
            let py = sty.predict(&y)?;
            for (i, &(s, o)) in targets[start..end].iter().enumerate() {
                hit_s += (ps[i] == s as u32) as usize;
                hit_o += (po[i] == o as u32) as usize;
                hit_y += (py[i] == style as u32) as usize;
            }
            total += end - start;
        }
    }
    let acc = |h: usize| h as f64 / total as f64;
    Ok(ConditioningScores {
        octaves,
        semitone: cond.note.then(|| acc(hit_s)),
        octave: cond.note.then(|| acc(hit_o)),
        style: cond.style.then(|| acc(hit_y)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerAttribute {
    pub semitone: f64,
    pub octave: f64,
    pub style: f64,
}

impl PerAttribute {
    fn from_fn(mut f: impl FnMut(Attribute) -> Result<f64>) -> Result<Self> {
        Ok(Self { semitone: f(Attribute::Semitone)?, octave: f(Attribute::Octave)?, style: f(Attribute::Style)? })
    }

    pub fn get(&self, a: Attribute) -> f64 {
        match a {
            Attribute::Semitone => self.semitone,
            Attribute::Octave => self.octave,
            Attribute::Style => self.style,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScores {
    /// Mean MMD over all pairs of classes of each attribute.
    pub inter_class_mmd: PerAttribute,
    /// Held-out accuracy of a classifier trained on the latent codes.
    pub post_accuracy: PerAttribute,
    /// Class pairs left out because a class had fewer than two points.
    pub skipped_pairs: Vec<String>,
}

fn encode_items(model: &WaeModel, items: &[&Item], batch_size: usize) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let z = model.encode(&spec_tensor(chunk, model.dtype())?, false)?;
        for row in z.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            out.push([row[0], row[1], row[2]]);
        }
    }
    Ok(out)
}

fn points_tensor(z: &[[f64; 3]]) -> Result<Tensor> {
    let flat: Vec<f64> = z.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (z.len(), LATENT_DIM), &Device::Cpu)?)
}

/// Mean pairwise MMD between the classes of `labels`; pairs involving a
/// class with fewer than two points are skipped and reported.
pub fn inter_class_mmd(z: &[[f64; 3]], labels: &[u32], name: &str) -> Result<(f64, Vec<String>)> {
    let mut groups: BTreeMap<u32, Vec<[f64; 3]>> = BTreeMap::new();
    for (p, l) in z.iter().zip(labels) {
        groups.entry(*l).or_default().push(*p);
    }
    let classes: Vec<u32> = groups.keys().copied().collect();
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, Vec::new());
    for (i, a) in classes.iter().enumerate() {
        for b in &classes[i + 1..] {
            let (ga, gb) = (&groups[a], &groups[b]);
            if ga.len() < 2 || gb.len() < 2 {
                skipped.push(format!("{name} {a}/{b}"));
                continue;
            }
            let v = mmd_rbf_median(&points_tensor(ga)?, &points_tensor(gb)?)?.to_scalar::<f64>()?;
            sum += v.max(0.0);
            n += 1;
        }
    }
    Ok((if n == 0 { 0.0 } else { sum / n as f64 }, skipped))
}

/// Trains a discriminator-shaped classifier on 80 % of the codes and
/// returns its accuracy on the other 20 %.
pub fn post_classification(
    model: &WaeModel,
    z: &[[f64; 3]],
    labels: &[u32],
    n_classes: usize,
    cfg: &EvalConfig,
) -> Result<f64> {
    if z.len() != labels.len() || z.len() < 5 {
        return Err(Error::invalid("post-classification needs at least five labelled codes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.shuffle(&mut rng);
    let cut = (z.len() * 4).div_ceil(5).min(z.len() - 1);
    let (fit, held) = order.split_at(cut);
    let mut store = ParamStore::new(DType::F32, cfg.seed);
    let net = Discriminator::new(&mut store, "post", model.config(), LATENT_DIM, n_classes)?;
    let mut opt = AdamW::new(
        store.trainable(&["post."]),
        ParamsAdamW { lr: cfg.post_learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let gather = |idx: &[usize]| -> Result<(Tensor, Vec<u32>)> {
        let pts: Vec<[f64; 3]> = idx.iter().map(|&i| z[i]).collect();
        Ok((points_tensor(&pts)?.to_dtype(DType::F32)?, idx.iter().map(|&i| labels[i]).collect()))
    };
    let mut fit_order = fit.to_vec();
    for _ in 0..cfg.post_epochs {
        fit_order.shuffle(&mut rng);
        for chunk in fit_order.chunks(32) {
            let (x, y) = gather(chunk)?;
            let logits = net.logits(&x, Some(&mut rng))?;
            let loss = class_nll(&candle_nn::ops::softmax(&logits, D::Minus1)?, &y)?;
            opt.backward_step(&loss)?;
        }
    }
    let (x, y) = gather(held)?;
    let pred = net.logits::<ChaCha8Rng>(&x, None)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
    Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

/// Latent statistics over every item of the corpus.
pub fn eval_latent(model: &WaeModel, data: &Dataset, cfg: &EvalConfig) -> Result<LatentScores> {
    let items: Vec<&Item> = data.items.iter().collect();
    let z = encode_items(model, &items, cfg.batch_size)?;
    let mut skipped = Vec::new();
    let inter_class_mmd = PerAttribute::from_fn(|a| {
        let labels: Vec<u32> = items.iter().map(|i| a.label(i)).collect();
        let (v, s) = inter_class_mmd(&z, &labels, a.name())?;
        skipped.extend(s);
        Ok(v)
    })?;
    let post_accuracy = PerAttribute::from_fn(|a| {
        let labels: Vec<u32> = items.iter().map(|i| a.label(i)).collect();
        post_classification(model, &z, &labels, a.n_classes(model.n_style()), cfg)
    })?;
    Ok(LatentScores { inter_class_mmd, post_accuracy, skipped_pairs: skipped })
}

/// Test reconstruction, conditioning accuracy on the [3,4] and [0,8]
/// octave ranges, and latent statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Option<Variant>,
    pub reconstruction: ReconstructionScores,
    pub conditioning_34: ConditioningScores,
    pub conditioning_08: ConditioningScores,
    pub latent: LatentScores,
}

pub fn evaluate(
    model: &WaeModel,
    variant: Option<Variant>,
    classifiers: &ClassifierSet,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if classifiers.style_vocab != data.style_vocab {
        return Err(Error::invalid("classifiers were trained on a different style vocabulary"));
    }
    let octaves = data.octaves();
    let conditioning_34 = eval_conditioning(model, classifiers, (3, 4), &octaves, cfg)?;
    let conditioning_08 = if octaves.iter().all(|o| (3..=4).contains(o)) {
        // both ranges reduce to the same targets
        conditioning_34.clone()
    } else {
        eval_conditioning(model, classifiers, (0, 8), &octaves, cfg)?
    };
    Ok(EvalReport {
        variant,
        reconstruction: eval_reconstruction(model, data, cfg.batch_size)?,
        conditioning_34,
        conditioning_08,
        latent: eval_latent(model, data, cfg)?,
    })
}

/// One encoded corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub z: [f64; 3],
    pub semitone: u8,
    pub octave: u8,
    pub style: String,
    pub split: Split,
}

pub fn export_latent_map(model: &WaeModel, data: &Dataset) -> Result<Vec<LatentPoint>> {
    let items: Vec<&Item> = data.items.iter().collect();
    let z = encode_items(model, &items, 32)?;
    Ok(items
        .iter()
        .zip(z)
        .map(|(i, z)| LatentPoint {
            z,
            semitone: i.semitone,
            octave: i.octave,
            style: data.style_vocab[i.style].clone(),
            split: i.split,
        })
        .collect())
}
