use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{CorpusIndex, Split, Waveform};
use crate::error::{Error, Result};
use crate::model::NoteCondition;
use crate::spectral::{log_scale, mel_project, stft_magnitude, MelSpectrogram, NormalizedSpectrogram};
use crate::{NOTE_LENGTH, N_FRAMES, N_MELS};

/// One preprocessed note.
#[derive(Debug, Clone)]
pub struct Item {
    /// Row-major 500×128 normalized Mel grid.
    pub spec: Vec<f32>,
    pub wave: Vec<f32>,
    pub semitone: u8,
    pub octave: u8,
    pub style: usize,
    pub split: Split,
    /// Position in the corpus index.
    pub entry: usize,
}

impl Item {
    pub fn condition(&self, n_style: usize) -> Result<NoteCondition> {
        NoteCondition::one_hot(self.semitone, self.octave, self.style, n_style)
    }

    pub fn spectrogram(&self) -> Result<NormalizedSpectrogram> {
        NormalizedSpectrogram::from_f32_slice(&self.spec)
    }

    pub fn waveform(&self) -> Result<Waveform> {
        Waveform::new(self.wave.iter().map(|&v| v as f64).collect())
    }
}

/// A split corpus turned into model-ready spectrograms.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
    /// Largest Mel magnitude over the train split.
    pub ref_max: f64,
    pub style_vocab: Vec<String>,
}

impl Dataset {
    /// Loads and preprocesses every entry of a split index.
    pub fn from_index(index: &CorpusIndex) -> Result<Self> {
        let waves = index.entries.iter().map(|e| index.load(e)).collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(index, &waves)
    }

    /// Preprocesses already loaded clips aligned with `index.entries`.
    pub fn from_waveforms(index: &CorpusIndex, waves: &[Waveform]) -> Result<Self> {
        if waves.len() != index.entries.len() {
            return Err(Error::shape(index.entries.len(), waves.len()));
        }
        let mels = waves
            .iter()
            .map(|w| mel_project(&stft_magnitude(w)?))
            .collect::<Result<Vec<MelSpectrogram>>>()?;
        let mut ref_max: f64 = 0.0;
        for (entry, mel) in index.entries.iter().zip(&mels) {
            if entry.split.is_none() {
                return Err(Error::invalid(format!("{} has no split assignment", entry.audio_ref)));
            }
            if entry.split == Some(Split::Train) {
                ref_max = mel.magnitude().iter().fold(ref_max, |a, &b| a.max(b));
            }
        }
        if !(ref_max > 0.0) {
            return Err(Error::invalid("train split is empty or silent"));
        }
        let mut items = Vec::with_capacity(mels.len());
        for (i, ((entry, mel), wave)) in index.entries.iter().zip(&mels).zip(waves).enumerate() {
            let style = index
                .style_index(&entry.style)
                .ok_or_else(|| Error::invalid(format!("style `{}` not in the vocabulary", entry.style)))?;
            items.push(Item {
                spec: log_scale(mel, ref_max)?.to_f32_vec(),
                wave: wave.samples().iter().map(|&v| v as f32).collect(),
                semitone: entry.semitone,
                octave: entry.octave,
                style,
                split: entry.split.unwrap(),
                entry: i,
            });
        }
        Ok(Self { items, ref_max, style_vocab: index.style_vocab.clone() })
    }

    pub fn n_style(&self) -> usize {
        self.style_vocab.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    /// Sorted octave classes present in the data.
    pub fn octaves(&self) -> Vec<u8> {
        let mut o: Vec<u8> = self.items.iter().map(|i| i.octave).collect();
        o.sort_unstable();
        o.dedup();
        o
    }
}

/// Shuffled mini-batches of `items`; a trailing batch of one is merged into
/// the previous one so batch statistics are always defined.
pub fn batches<'a, R: Rng>(items: &[&'a Item], size: usize, rng: &mut R) -> Vec<Vec<&'a Item>> {
    let mut order: Vec<&Item> = items.to_vec();
    order.shuffle(rng);
    let mut out: Vec<Vec<&Item>> = order.chunks(size.max(2)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// (B, 500, 128) spectrogram tensor.
pub fn spec_tensor(items: &[&Item], dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(items.len() * N_MELS * N_FRAMES);
    for it in items {
        v.extend_from_slice(&it.spec);
    }
    Ok(Tensor::from_vec(v, (items.len(), N_MELS, N_FRAMES), &Device::Cpu)?.to_dtype(dtype)?)
}

/// (B, 34560) waveform tensor.
pub fn wave_tensor(items: &[&Item], dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(items.len() * NOTE_LENGTH);
    for it in items {
        v.extend_from_slice(&it.wave);
    }
    Ok(Tensor::from_vec(v, (items.len(), NOTE_LENGTH), &Device::Cpu)?.to_dtype(dtype)?)
}
