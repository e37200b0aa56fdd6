//! Reference classifiers: encoder-shaped networks that recognize semitone,
//! octave or style from a spectrogram. They score how well generated notes
//! follow their conditions.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{batches, spec_tensor, Dataset, Item};
use crate::checkpoint::{read_tensors, write_tensors};
use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig};
use crate::nn::ParamStore;
use crate::objectives::class_nll;
use crate::{N_OCTAVES, N_SEMITONES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Semitone,
    Octave,
    Style,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Semitone, Attribute::Octave, Attribute::Style];

    pub fn name(&self) -> &'static str {
        match self {
            Attribute::Semitone => "semitone",
            Attribute::Octave => "octave",
            Attribute::Style => "style",
        }
    }

    pub fn n_classes(&self, n_style: usize) -> usize {
        match self {
            Attribute::Semitone => N_SEMITONES,
            Attribute::Octave => N_OCTAVES,
            Attribute::Style => n_style,
        }
    }

    pub fn label(&self, item: &Item) -> u32 {
        match self {
            Attribute::Semitone => item.semitone as u32,
            Attribute::Octave => item.octave as u32,
            Attribute::Style => item.style as u32,
        }
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        Self { model: ModelConfig::desk(), epochs: 12, batch_size: 24, learning_rate: 1e-3, seed: 0 }
    }
}

pub struct Classifier {
    attribute: Attribute,
    n_classes: usize,
    store: ParamStore,
    net: Encoder,
}

impl Classifier {
    pub fn new(attribute: Attribute, n_classes: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("{attribute} classifier needs at least 2 classes")));
        }
        let mut store = ParamStore::new(DType::F32, seed);
        let net = Encoder::new(&mut store, &format!("classifier.{attribute}"), config, n_classes)?;
        Ok(Self { attribute, n_classes, store, net })
    }

    pub fn attribute(&self) -> Attribute {
        self.attribute
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Class probabilities of a (B, H, W) batch.
    pub fn probs(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let logits = self.net.forward(&x.to_dtype(self.store.dtype())?, train)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// Most likely class of every spectrogram in the batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u32>> {
        Ok(self.probs(x, false)?.argmax(D::Minus1)?.to_vec1::<u32>()?)
    }

    pub fn predict_items(&self, items: &[&Item], batch_size: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(batch_size.max(1)) {
            out.extend(self.predict(&spec_tensor(chunk, self.store.dtype())?)?);
        }
        Ok(out)
    }
}

/// Macro-averaged F1 over the classes that occur in `truth` or `pred`.
pub fn f1_macro(truth: &[u32], pred: &[u32]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::invalid("f1 of an empty set"));
    }
    let classes: BTreeSet<u32> = truth.iter().chain(pred).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
    }
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub attribute: Attribute,
    /// Mean training NLL per epoch.
    pub losses: Vec<f64>,
    pub f1_train: f64,
    /// `None` when the split is empty.
    pub f1_validation: Option<f64>,
    pub f1_test: Option<f64>,
}

fn split_f1(c: &Classifier, items: &[&Item], batch: usize) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let truth: Vec<u32> = items.iter().map(|i| c.attribute.label(i)).collect();
    Ok(Some(f1_macro(&truth, &c.predict_items(items, batch)?)?))
}

/// Trains a classifier of `attribute` on the train split.
pub fn train_reference_classifier(
    data: &Dataset,
    attribute: Attribute,
    cfg: &ClassifierConfig,
) -> Result<(Classifier, ClassifierReport)> {
    let train = data.split(Split::Train);
    let present: BTreeSet<u32> = train.iter().map(|i| attribute.label(i)).collect();
    if present.len() < 2 {
        return Err(Error::invalid(format!(
            "{attribute} has {} class(es) in the train split, a classifier needs at least 2",
            present.len()
        )));
    }
    let clf = Classifier::new(attribute, attribute.n_classes(data.n_style()), &cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(
        clf.store.trainable(&["classifier."]),
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for batch in batches(&train, cfg.batch_size, &mut rng) {
            let x = spec_tensor(&batch, clf.store.dtype())?;
            let y: Vec<u32> = batch.iter().map(|i| attribute.label(i)).collect();
            let loss = class_nll(&clf.probs(&x, true)?, &y)?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::Diverged { epoch, last_good: None });
            }
            opt.backward_step(&loss)?;
            sum += v * batch.len() as f64;
        }
        losses.push(sum / train.len() as f64);
        tracing::info!(%attribute, epoch, loss = sum / train.len() as f64, "classifier");
    }
    let report = ClassifierReport {
        attribute,
        losses,
        f1_train: split_f1(&clf, &train, cfg.batch_size)?.expect("train split is not empty"),
        f1_validation: split_f1(&clf, &data.split(Split::Validation), cfg.batch_size)?,
        f1_test: split_f1(&clf, &data.split(Split::Test), cfg.batch_size)?,
    };
    Ok((clf, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SetHeader {
    version: u32,
    model: ModelConfig,
    style_vocab: Vec<String>,
    classes: Vec<(Attribute, usize)>,
}

const SET_KEY: &str = "fadersynth-classifiers";

/// One classifier per attribute, stored together.
pub struct ClassifierSet {
    pub model: ModelConfig,
    pub style_vocab: Vec<String>,
    pub classifiers: Vec<Classifier>,
}

impl ClassifierSet {
    pub fn get(&self, attribute: Attribute) -> Result<&Classifier> {
        self.classifiers
            .iter()
            .find(|c| c.attribute == attribute)
            .ok_or_else(|| Error::invalid(format!("no {attribute} classifier")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = SetHeader {
            version: crate::checkpoint::VERSION,
            model: self.model.clone(),
            style_vocab: self.style_vocab.clone(),
            classes: self.classifiers.iter().map(|c| (c.attribute, c.n_classes)).collect(),
        };
        let mut tensors = Vec::new();
        for c in &self.classifiers {
            tensors.extend(c.store.snapshot()?);
        }
        write_tensors(path.as_ref(), SET_KEY, &serde_json::to_string(&header)?, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (json, tensors) = read_tensors(path.as_ref(), SET_KEY)?;
        let header: SetHeader = serde_json::from_str(&json)?;
        if header.version != crate::checkpoint::VERSION {
            return Err(Error::Checkpoint(format!("unsupported classifier version {}", header.version)));
        }
        let classifiers = header
            .classes
            .iter()
            .map(|&(a, n)| {
                let c = Classifier::new(a, n, &header.model, 0)?;
                c.store.load(&tensors)?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model: header.model, style_vocab: header.style_vocab, classifiers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_values() {
        assert_eq!(f1_macro(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // class 0: tp 1 fp 0 fn 1 -> 2/3; class 1: tp 1 fp 1 fn 0 -> 2/3
        assert!((f1_macro(&[0, 0, 1], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_macro(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(f1_macro(&[], &[]).is_err());
        assert!(f1_macro(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk();
        let set = ClassifierSet {
            model: cfg.clone(),
            style_vocab: vec!["a".into(), "b".into()],
            classifiers: vec![
                Classifier::new(Attribute::Octave, 9, &cfg, 1).unwrap(),
                Classifier::new(Attribute::Style, 2, &cfg, 2).unwrap(),
            ],
        };
        let path = dir.path().join("c.safetensors");
        set.save(&path).unwrap();
        let back = ClassifierSet::load(&path).unwrap();
        for a in [Attribute::Octave, Attribute::Style] {
            assert_eq!(
                back.get(a).unwrap().store().hash("").unwrap(),
                set.get(a).unwrap().store().hash("").unwrap()
            );
        }
        assert!(back.get(Attribute::Semitone).is_err());
        assert!(Classifier::new(Attribute::Style, 1, &cfg, 0).is_err());
    }
}
