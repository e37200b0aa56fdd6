use super::stft::{istft, stft};
use super::LinearSpectrogram;
use crate::corpus::Waveform;
use crate::{Error, Result, FFT_SIZE, HOP_SIZE};
use ndarray::Array2;
use realfft::num_complex::Complex64;

/// Griffin-Lim phase recovery starting from zero phase.
///
/// Returns the final estimate together with the spectral convergence measured
/// before each projection: `trace[k]` is the SC of the estimate after `k`
/// iterations, for `k = 0..=iterations`. An all-zero target yields silence and
/// an empty trace.
pub fn griffin_lim_traced(s: &LinearSpectrogram, iterations: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let target = s.magnitude();
    let frames = target.ncols();
    if frames == 0 {
        return Err(Error::invalid("spectrogram has no frames"));
    }
    let len = (frames - 1) * HOP_SIZE + FFT_SIZE;
    let target_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if target_norm == 0.0 {
        return Ok((vec![0.0; len], Vec::new()));
    }

    let mut estimate: Array2<Complex64> = target.mapv(|m| Complex64::new(m, 0.0));
    let mut signal = istft(estimate.view(), len)?;
    let mut trace = Vec::with_capacity(iterations + 1);
    for k in 0..=iterations {
        let spec = stft(&signal)?;
        let mut dist = 0.0;
        for (c, &m) in spec.iter().zip(target.iter()) {
            let d = c.norm() - m;
            dist += d * d;
        }
        trace.push(dist.sqrt() / target_norm);
        if k == iterations {
            break;
        }
        ndarray::Zip::from(&mut estimate)
            .and(&spec)
            .and(target)
            .for_each(|e, c, &m| {
                let n = c.norm();
                *e = if n > 0.0 {
                    c * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                };
            });
        signal = istft(estimate.view(), len)?;
    }
    Ok((signal, trace))
}

/// Griffin-Lim inversion of a note-length magnitude spectrogram.
///
/// The estimate is peak-limited to `[-1, 1]`.
pub fn griffin_lim(s: &LinearSpectrogram, iterations: usize) -> Result<Waveform> {
    let (signal, _) = griffin_lim_traced(s, iterations)?;
    Waveform::peak_limited(signal)
}
