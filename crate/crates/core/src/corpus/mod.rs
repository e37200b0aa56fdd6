//! Note-sample libraries: tagged directory scans, a deterministic synthetic
//! corpus, per-style train/validation/test splits and fixed-length loading.

mod load;
mod scan;
mod split;
mod synth;
mod wav;

pub use load::{detect_onset, load_note, load_note_bytes, prepare_note, resample, ONSET_THRESHOLD, ONSET_WINDOW};
pub use scan::{scan_corpus, ScanReport, SkippedFile, TagSchema};
pub use split::{largest_remainder, split_corpus, DEFAULT_RATIOS};
pub use synth::{midi_number, note_frequency, render_note, synth_corpus, SynthSpec, SyntheticCorpus, STYLE_PALETTE};
pub use wav::{decode_wav, encode_wav_pcm16, write_wav_pcm16};

use crate::{Error, Result, NOTE_LENGTH, N_OCTAVES, N_SEMITONES, SAMPLE_RATE};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// `C`, `C#`, ... for a semitone class.
pub fn note_name(semitone: u8) -> &'static str {
    NOTE_NAMES[semitone as usize % 12]
}

/// Parses `C`, `C#`, `Db`, ... into a semitone class.
pub fn parse_note_name(name: &str) -> Option<u8> {
    let mut chars = name.chars();
    let base = match chars.next()?.to_ascii_uppercase() {
        'C' => 0i32,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let shift = match chars.as_str() {
        "" => 0,
        "#" | "s" => 1,
        "b" => -1,
        _ => return None,
    };
    Some((base + shift).rem_euclid(12) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

/// One tagged note clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEntry {
    /// Path of the clip relative to the corpus root.
    pub audio_ref: String,
    pub semitone: u8,
    pub octave: u8,
    pub style: String,
    /// Parsed and kept, never used as a conditioning attribute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl NoteEntry {
    pub fn validate(&self) -> Result<()> {
        if self.semitone as usize >= N_SEMITONES {
            return Err(Error::invalid(format!("semitone {} out of [0, 11]", self.semitone)));
        }
        if self.octave as usize >= N_OCTAVES {
            return Err(Error::invalid(format!("octave {} out of [0, 8]", self.octave)));
        }
        Ok(())
    }
}

/// The corpus document: entries, style vocabulary and split bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub entries: Vec<NoteEntry>,
    pub style_vocab: Vec<String>,
    pub sample_rate: u32,
    pub note_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<[f64; 3]>,
    /// Directory the `audio_ref`s are relative to; not serialized.
    #[serde(skip)]
    pub root: Option<PathBuf>,
}

impl CorpusIndex {
    pub fn new(entries: Vec<NoteEntry>, style_vocab: Vec<String>) -> Result<Self> {
        let index = Self {
            entries,
            style_vocab,
            sample_rate: SAMPLE_RATE,
            note_length: NOTE_LENGTH,
            split_seed: None,
            ratios: None,
            root: None,
        };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for style in &self.style_vocab {
            if !seen.insert(style) {
                return Err(Error::invalid(format!("duplicate style `{style}` in vocabulary")));
            }
        }
        for entry in &self.entries {
            entry.validate()?;
            if !seen.contains(&entry.style) {
                return Err(Error::invalid(format!(
                    "entry {} has style `{}` outside the vocabulary",
                    entry.audio_ref, entry.style
                )));
            }
        }
        Ok(())
    }

    pub fn n_style(&self) -> usize {
        self.style_vocab.len()
    }

    pub fn style_index(&self, style: &str) -> Option<usize> {
        self.style_vocab.iter().position(|s| s == style)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &NoteEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    /// Sorted octave classes present in the corpus.
    pub fn octaves(&self) -> Vec<u8> {
        let mut octaves: Vec<u8> = self.entries.iter().map(|e| e.octave).collect();
        octaves.sort_unstable();
        octaves.dedup();
        octaves
    }

    pub fn resolve(&self, entry: &NoteEntry) -> PathBuf {
        match &self.root {
            Some(root) => root.join(&entry.audio_ref),
            None => PathBuf::from(&entry.audio_ref),
        }
    }

    /// Loads an entry's clip with the fixed-length note rules.
    pub fn load(&self, entry: &NoteEntry) -> Result<Waveform> {
        load_note(&self.resolve(entry))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads an index document; `audio_ref`s resolve against its directory.
    pub fn open(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index: CorpusIndex = serde_json::from_str(&text)?;
        index.validate()?;
        index.root = path.parent().map(Path::to_path_buf);
        Ok(index)
    }
}

/// A fixed-length mono note at 22050 Hz with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() != NOTE_LENGTH {
            return Err(Error::shape(NOTE_LENGTH, samples.len()));
        }
        if !samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0) {
            return Err(Error::invalid("waveform samples must be finite and within [-1, 1]"));
        }
        Ok(Self { samples })
    }

    pub fn zeros() -> Self {
        Self {
            samples: vec![0.0; NOTE_LENGTH],
        }
    }

    /// Scales the signal down when its peak exceeds one.
    pub fn peak_limited(mut samples: Vec<f64>) -> Result<Self> {
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite waveform samples"));
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 1.0 {
            samples.iter_mut().for_each(|v| *v /= peak);
        }
        Self::new(samples)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}
