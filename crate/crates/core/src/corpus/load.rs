use super::wav::decode_wav;
use super::Waveform;
use crate::{Error, Result, NOTE_LENGTH, SAMPLE_RATE};
use rubato::{FftFixedInOut, Resampler};
use std::io::Cursor;
use std::path::Path;

/// Window length (samples at 22050 Hz) of the onset energy detector.
pub const ONSET_WINDOW: usize = 256;
/// Fraction of the peak window energy that marks the attack.
pub const ONSET_THRESHOLD: f64 = 0.1;

/// Band-limited rate conversion of a mono signal.
pub fn resample(signal: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == to || signal.is_empty() {
        return Ok(signal.to_vec());
    }
    let mut resampler = FftFixedInOut::<f64>::new(from as usize, to as usize, 1024, 1)
        .map_err(|e| Error::invalid(format!("resampler {from} -> {to}: {e}")))?;
    let chunk = resampler.input_frames_next();
    let delay = resampler.output_delay();
    let expected = (signal.len() as u64 * to as u64).div_ceil(from as u64) as usize;

    let mut out = Vec::with_capacity(expected + delay + chunk);
    let mut input = vec![0.0; chunk];
    let mut pos = 0;
    while out.len() < expected + delay {
        input.iter_mut().for_each(|v| *v = 0.0);
        if pos < signal.len() {
            let n = chunk.min(signal.len() - pos);
            input[..n].copy_from_slice(&signal[pos..pos + n]);
        }
        pos += chunk;
        let produced = resampler
            .process(&[&input], None)
            .map_err(|e| Error::invalid(format!("resampling failed: {e}")))?;
        out.extend_from_slice(&produced[0]);
    }
    Ok(out[delay..delay + expected].to_vec())
}

/// Start of the first [`ONSET_WINDOW`] block whose energy exceeds
/// [`ONSET_THRESHOLD`] of the loudest block; `None` for silence.
pub fn detect_onset(signal: &[f64]) -> Option<usize> {
    let energies: Vec<f64> = signal
        .chunks(ONSET_WINDOW)
        .map(|w| w.iter().map(|v| v * v).sum())
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return None;
    }
    energies
        .iter()
        .position(|&e| e > ONSET_THRESHOLD * peak)
        .map(|i| i * ONSET_WINDOW)
}

/// Crops from the onset to [`NOTE_LENGTH`], zero-pads short clips and
/// peak-normalizes. `signal` must already be at 22050 Hz.
pub fn prepare_note(signal: &[f64], locator: &Path) -> Result<Waveform> {
    let onset = detect_onset(signal).ok_or_else(|| Error::NoOnset {
        path: locator.to_path_buf(),
    })?;
    let mut samples = vec![0.0; NOTE_LENGTH];
    let available = (signal.len() - onset).min(NOTE_LENGTH);
    samples[..available].copy_from_slice(&signal[onset..onset + available]);
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak <= 0.0 || !peak.is_finite() {
        return Err(Error::NoOnset {
            path: locator.to_path_buf(),
        });
    }
    samples.iter_mut().for_each(|v| *v /= peak);
    Waveform::new(samples)
}

/// Loads a clip: mono mix-down, resampling to 22050 Hz, onset crop, padding and
/// peak normalization.
pub fn load_note(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (mono, rate) = decode_wav(file, path)?;
    let signal = resample(&mono, rate, SAMPLE_RATE)?;
    prepare_note(&signal, path)
}

/// [`load_note`] over in-memory WAV bytes.
pub fn load_note_bytes(bytes: &[u8], locator: &Path) -> Result<Waveform> {
    let (mono, rate) = decode_wav(Cursor::new(bytes), locator)?;
    let signal = resample(&mono, rate, SAMPLE_RATE)?;
    prepare_note(&signal, locator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn write_clip(path: &Path, rate: u32, samples: &[f64]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample((s * 32767.0).round() as i16).unwrap();
        }
        w.finalize().unwrap();
    }

    fn tone(rate: u32, seconds: f64, freq: f64) -> Vec<f64> {
        let n = (rate as f64 * seconds) as usize;
        (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect()
    }

    #[test]
    fn long_clip_at_44k_is_resampled_and_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_clip(&path, 44100, &tone(44100, 3.0, 440.0));
        let w = load_note(&path).unwrap();
        assert_eq!(w.samples().len(), NOTE_LENGTH);
        let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        // frequency preserved: zero crossings of a 440 Hz tone over 1 s
        let crossings = w.samples()[1000..23050]
            .windows(2)
            .filter(|p| p[0] < 0.0 && p[1] >= 0.0)
            .count();
        assert!((438..=442).contains(&crossings), "{crossings}");
    }

    #[test]
    fn short_clip_is_zero_padded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.wav");
        write_clip(&path, 22050, &tone(22050, 0.5, 220.0));
        let w = load_note(&path).unwrap();
        assert_eq!(w.samples().len(), NOTE_LENGTH);
        assert!(w.samples()[11025..].iter().all(|&v| v == 0.0));
        assert!(w.samples()[..11025].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn leading_silence_is_skipped() {
        let silence = 2205; // 100 ms
        let mut clip = vec![0.0; silence];
        clip.extend(tone(22050, 2.0, 330.0));
        let w = prepare_note(&clip, Path::new("mem")).unwrap();
        let onset = detect_onset(&clip).unwrap();
        assert_eq!(onset, 2048);
        assert!(w.samples()[..silence - onset].iter().all(|&v| v == 0.0));
        assert!(w.samples()[silence - onset + 1] != 0.0);
    }

    #[test]
    fn silent_clip_has_no_onset() {
        let err = prepare_note(&vec![0.0; 40000], Path::new("quiet.wav")).unwrap_err();
        assert!(matches!(err, Error::NoOnset { .. }));
    }

    #[test]
    fn loading_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.wav");
        write_clip(&path, 48000, &tone(48000, 1.0, 523.25));
        assert_eq!(load_note(&path).unwrap(), load_note(&path).unwrap());
    }

    #[test]
    fn corrupt_file_reports_locator() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF....garbage").unwrap();
        match load_note(&path).unwrap_err() {
            Error::Audio { path: p, .. } => assert_eq!(p, path),
            other => panic!("unexpected {other}"),
        }
    }
}
