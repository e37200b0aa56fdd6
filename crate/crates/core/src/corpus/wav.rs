use crate::{Error, Result, SAMPLE_RATE};
use std::io::{Cursor, Read, Seek};
use std::path::Path;

/// Decodes a RIFF WAV stream (integer PCM or float32) into a mono mix-down.
pub fn decode_wav<R: Read + Seek>(reader: R, locator: &Path) -> Result<(Vec<f64>, u32)> {
    let bad = |reason: String| Error::Audio {
        path: locator.to_path_buf(),
        reason,
    };
    let mut wav = hound::WavReader::new(std::io::BufReader::new(reader))
        .map_err(|e| bad(e.to_string()))?;
    let spec = wav.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => wav
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            wav.samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| bad(e.to_string()))?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

fn pcm16_spec() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

fn to_pcm16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// 22050 Hz mono 16-bit PCM WAV bytes.
pub fn encode_wav_pcm16(samples: &[f64]) -> Vec<u8> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, pcm16_spec()).expect("in-memory writer");
        for &s in samples {
            writer.write_sample(to_pcm16(s)).expect("in-memory write");
        }
        writer.finalize().expect("in-memory finalize");
    }
    cursor.into_inner()
}

pub fn write_wav_pcm16(path: &Path, samples: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_wav_pcm16(samples)).map_err(|e| Error::io(path, e))
}
