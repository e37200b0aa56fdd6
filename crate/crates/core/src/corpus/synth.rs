use super::{note_name, split_corpus, CorpusIndex, NoteEntry, Waveform, DEFAULT_RATIOS};
use crate::{Error, Result, NOTE_LENGTH, SAMPLE_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Synthetic playing styles, in the order they are assigned to `n_styles`.
pub const STYLE_PALETTE: [&str; 8] = [
    "plucked", "sustained", "tremolo", "bright", "vibrato", "staccato", "hollow", "swell",
];

const DYNAMICS: [(&str, f64); 3] = [("mf", 0.0), ("ff", 0.25), ("pp", -0.25)];

/// MIDI note number: `12 · (octave + 1) + semitone`.
pub fn midi_number(semitone: u8, octave: u8) -> u32 {
    12 * (octave as u32 + 1) + semitone as u32
}

/// Equal-tempered fundamental, A4 = 440 Hz.
pub fn note_frequency(semitone: u8, octave: u8) -> f64 {
    440.0 * 2f64.powf((midi_number(semitone, octave) as f64 - 69.0) / 12.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_styles: usize,
    pub notes_per_style: usize,
    /// Inclusive octave range.
    pub octave_range: (u8, u8),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_styles: 4,
            notes_per_style: 60,
            octave_range: (3, 4),
        }
    }
}

pub struct SyntheticCorpus {
    /// Split with the default 80/10/10 ratios and the corpus seed.
    pub index: CorpusIndex,
    /// Rendered clips, aligned with `index.entries`.
    pub audio: Vec<Waveform>,
}

impl SyntheticCorpus {
    /// Writes every clip as 16-bit WAV under `dir` plus `dir/index.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (entry, wave) in self.index.entries.iter().zip(&self.audio) {
            super::write_wav_pcm16(&dir.join(&entry.audio_ref), wave.samples())?;
        }
        let mut index = self.index.clone();
        index.root = Some(dir.to_path_buf());
        index.save(&dir.join("index.json"))
    }
}

fn style_seed(seed: u64, style: usize, semitone: u8, octave: u8, take: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [style as u64, semitone as u64, octave as u64, take as u64] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(23);
    }
    h
}

/// Renders one additive-synthesis note. Output depends only on the arguments.
pub fn render_note(style: &str, semitone: u8, octave: u8, take: usize, seed: u64) -> Result<Waveform> {
    let style_idx = STYLE_PALETTE
        .iter()
        .position(|s| *s == style)
        .ok_or_else(|| Error::invalid(format!("unknown synthetic style `{style}`")))?;
    if octave > 8 || semitone > 11 {
        return Err(Error::invalid(format!("note {semitone}/{octave} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed(seed, style_idx, semitone, octave, take));
    let (_, tilt_shift) = DYNAMICS[take % DYNAMICS.len()];
    let detune = 2f64.powf(rng.gen_range(-5.0..5.0) / 1200.0);
    let f0 = note_frequency(semitone, octave) * detune;
    let nyquist = SAMPLE_RATE as f64 / 2.0;

    let tilt = match style {
        "bright" => 0.35,
        _ => 1.3,
    } - tilt_shift;
    let partials: Vec<(usize, f64, f64)> = (1..=32usize)
        .filter(|&k| f0 * k as f64 * 1.04 < nyquist)
        .filter(|&k| style != "hollow" || k % 2 == 1)
        .map(|k| {
            let amp = (k as f64).powf(-tilt) * rng.gen_range(0.9..1.1);
            (k, amp, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();

    let rate = SAMPLE_RATE as f64;
    let samples: Vec<f64> = (0..NOTE_LENGTH)
        .map(|n| {
            let t = n as f64 / rate;
            let attack = (t / 0.01).min(1.0);
            let env = match style {
                "plucked" => (-t / 0.22).exp(),
                "tremolo" => 1.0 - 0.85 * (0.5 + 0.5 * (2.0 * PI * 6.0 * t).sin()),
                "staccato" => {
                    if t < 0.15 {
                        1.0
                    } else {
                        (-(t - 0.15) / 0.03).exp()
                    }
                }
                "swell" => 0.05 + (t / 1.6).powf(1.5),
                _ => 1.0,
            } * attack;
            // vibrato: 6 Hz, 3% frequency modulation folded into a time warp
            let warp = if style == "vibrato" {
                0.03 * (1.0 - (2.0 * PI * 6.0 * t).cos()) / (2.0 * PI * 6.0)
            } else {
                0.0
            };
            let mut v = 0.0;
            for &(k, amp, phase) in &partials {
                let kf = k as f64;
                let partial_env = if style == "plucked" {
                    (-t * kf * 0.6).exp()
                } else {
                    1.0
                };
                let arg = 2.0 * PI * f0 * kf * (t + warp) + phase;
                v += amp * partial_env * arg.sin();
            }
            v * env
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Waveform::new(samples.into_iter().map(|v| 0.9 * v / peak).collect())
}

/// Renders a desk-scale corpus: `notes_per_style` notes in each of `n_styles`
/// styles, cycling over every pitch of `octave_range`, then splits it.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus> {
    let (lo, hi) = spec.octave_range;
    if lo > hi || hi > 8 {
        return Err(Error::invalid(format!(
            "octave range {lo}..={hi} must lie within 0..=8"
        )));
    }
    if spec.n_styles < 2 || spec.n_styles > STYLE_PALETTE.len() {
        return Err(Error::invalid(format!(
            "n_styles must be in 2..={}, got {}",
            STYLE_PALETTE.len(),
            spec.n_styles
        )));
    }
    if spec.notes_per_style < 20 {
        return Err(Error::invalid("notes_per_style must be at least 20"));
    }
    let pitches: Vec<(u8, u8)> = (lo..=hi)
        .flat_map(|o| (0..12u8).map(move |s| (s, o)))
        .collect();
    let mut entries = Vec::new();
    let mut audio = Vec::new();
    for style in &STYLE_PALETTE[..spec.n_styles] {
        for i in 0..spec.notes_per_style {
            let (semitone, octave) = pitches[i % pitches.len()];
            let take = i / pitches.len();
            let (dynamics, _) = DYNAMICS[take % DYNAMICS.len()];
            audio.push(render_note(style, semitone, octave, take, seed)?);
            entries.push(NoteEntry {
                audio_ref: format!("{style}/{}{octave}_{dynamics}_{take:03}.wav", note_name(semitone)),
                semitone,
                octave,
                style: style.to_string(),
                dynamics: Some(dynamics.to_string()),
                split: None,
            });
        }
    }
    let vocab = STYLE_PALETTE[..spec.n_styles].iter().map(|s| s.to_string()).collect();
    let index = split_corpus(CorpusIndex::new(entries, vocab)?, DEFAULT_RATIOS, seed)?;
    Ok(SyntheticCorpus { index, audio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{scan_corpus, TagSchema};
    use crate::spectral::{log_scale, lsd, mel_project, stft_magnitude};

    #[test]
    fn reference_pitches() {
        assert_eq!(note_frequency(9, 4), 440.0);
        let c4 = 440.0 * 2f64.powf((60.0 - 69.0) / 12.0);
        assert!((note_frequency(0, 4) - c4).abs() < 1e-12);
        assert!((note_frequency(0, 4) - 261.63).abs() < 0.01);
    }

    #[test]
    fn counts_and_vocab() {
        let spec = SynthSpec {
            n_styles: 4,
            notes_per_style: 50,
            octave_range: (4, 4),
        };
        let corpus = synth_corpus(&spec, 1).unwrap();
        assert_eq!(corpus.index.entries.len(), 200);
        assert_eq!(corpus.audio.len(), 200);
        assert_eq!(corpus.index.style_vocab.len(), 4);
    }

    #[test]
    fn invalid_specs() {
        let bad_octave = SynthSpec {
            octave_range: (3, 9),
            ..SynthSpec::default()
        };
        assert!(synth_corpus(&bad_octave, 0).is_err());
        let one_style = SynthSpec {
            n_styles: 1,
            ..SynthSpec::default()
        };
        assert!(synth_corpus(&one_style, 0).is_err());
        let few = SynthSpec {
            notes_per_style: 10,
            ..SynthSpec::default()
        };
        assert!(synth_corpus(&few, 0).is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_styles_differ() {
        let a = render_note("plucked", 4, 3, 0, 7).unwrap();
        let b = render_note("plucked", 4, 3, 0, 7).unwrap();
        assert_eq!(a, b);
        let mel = |w: &Waveform| mel_project(&stft_magnitude(w).unwrap()).unwrap();
        let ma = mel(&a);
        let reference = ma.magnitude().iter().cloned().fold(0.0, f64::max);
        let na = log_scale(&ma, reference).unwrap();
        for other in &STYLE_PALETTE[1..] {
            let o = render_note(other, 4, 3, 0, 7).unwrap();
            let no = log_scale(&mel(&o), reference).unwrap();
            let d = lsd(na.values().view(), no.values().view()).unwrap();
            assert!(d > 0.0, "{other}");
        }
    }

    #[test]
    fn written_corpus_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_styles: 2,
            notes_per_style: 20,
            octave_range: (4, 4),
        };
        let corpus = synth_corpus(&spec, 3).unwrap();
        corpus.write(dir.path()).unwrap();
        let report = scan_corpus(dir.path(), &TagSchema::default()).unwrap();
        assert_eq!(report.index.entries.len(), 40);
        assert!(report.skipped.is_empty());
        let reopened = CorpusIndex::open(&dir.path().join("index.json")).unwrap();
        assert_eq!(reopened.entries, corpus.index.entries);
        let first = &reopened.entries[0];
        let loaded = reopened.load(first).unwrap();
        let err = loaded
            .samples()
            .iter()
            .zip(corpus.audio[0].samples())
            .map(|(a, b)| (a - b / 0.9).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}
