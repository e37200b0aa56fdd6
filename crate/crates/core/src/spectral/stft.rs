use super::LinearSpectrogram;
use crate::corpus::Waveform;
use crate::{Error, Result, FFT_SIZE, HOP_SIZE, NOTE_LENGTH, N_BINS};
use ndarray::{Array2, ArrayView2};
use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use std::sync::{Arc, OnceLock};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Cached 2048-point real FFT plans and the analysis window (hop 256, no padding).
pub struct StftPlan {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    window: Vec<f64>,
}

impl StftPlan {
    pub fn get() -> &'static StftPlan {
        static PLAN: OnceLock<StftPlan> = OnceLock::new();
        PLAN.get_or_init(|| {
            let mut planner = RealFftPlanner::<f64>::new();
            StftPlan {
                forward: planner.plan_fft_forward(FFT_SIZE),
                inverse: planner.plan_fft_inverse(FFT_SIZE),
                window: hann_window(FFT_SIZE),
            }
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frame_count(len: usize) -> Result<usize> {
        if len < FFT_SIZE {
            return Err(Error::shape(format!(">= {FFT_SIZE} samples"), len));
        }
        Ok((len - FFT_SIZE) / HOP_SIZE + 1)
    }

    /// Spectrum of one windowed frame starting at `start`, written into `out`.
    pub(crate) fn frame_spectrum(
        &self,
        signal: &[f64],
        start: usize,
        scratch: &mut [f64],
        out: &mut [Complex64],
    ) {
        for ((dst, &x), &w) in scratch
            .iter_mut()
            .zip(&signal[start..start + FFT_SIZE])
            .zip(&self.window)
        {
            *dst = x * w;
        }
        self.forward
            .process(scratch, out)
            .expect("buffer sizes match the plan");
    }

    /// Unnormalized inverse real FFT of one spectrum (the adjoint-friendly form).
    pub(crate) fn inverse_frame(&self, spectrum: &mut [Complex64], out: &mut [f64]) {
        spectrum[0].im = 0.0;
        spectrum[N_BINS - 1].im = 0.0;
        self.inverse
            .process(spectrum, out)
            .expect("buffer sizes match the plan");
    }
}

/// Complex STFT of `signal`, `(1025, frames)`.
pub fn stft(signal: &[f64]) -> Result<Array2<Complex64>> {
    let plan = StftPlan::get();
    let frames = StftPlan::frame_count(signal.len())?;
    let mut out = Array2::<Complex64>::zeros((N_BINS, frames));
    let mut scratch = vec![0.0; FFT_SIZE];
    let mut spectrum = vec![Complex64::default(); N_BINS];
    for t in 0..frames {
        plan.frame_spectrum(signal, t * HOP_SIZE, &mut scratch, &mut spectrum);
        out.column_mut(t).assign(&ndarray::ArrayView1::from(&spectrum));
    }
    Ok(out)
}

/// Least-squares inverse STFT (weighted overlap-add) producing `len` samples.
///
/// Samples not covered by any non-zero window weight come out as zero.
pub fn istft(spec: ArrayView2<Complex64>, len: usize) -> Result<Vec<f64>> {
    let plan = StftPlan::get();
    if spec.nrows() != N_BINS {
        return Err(Error::shape(format!("{N_BINS} bins"), spec.nrows()));
    }
    let frames = spec.ncols();
    if frames > 0 && (frames - 1) * HOP_SIZE + FFT_SIZE > len {
        return Err(Error::shape(
            format!("signal length >= {}", (frames - 1) * HOP_SIZE + FFT_SIZE),
            len,
        ));
    }
    let mut signal = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut spectrum = vec![Complex64::default(); N_BINS];
    let mut frame = vec![0.0; FFT_SIZE];
    let scale = 1.0 / FFT_SIZE as f64;
    for t in 0..frames {
        for (dst, src) in spectrum.iter_mut().zip(spec.column(t)) {
            *dst = *src;
        }
        plan.inverse_frame(&mut spectrum, &mut frame);
        let start = t * HOP_SIZE;
        for (n, (&x, &w)) in frame.iter().zip(&plan.window).enumerate() {
            signal[start + n] += x * scale * w;
            norm[start + n] += w * w;
        }
    }
    for (x, &n) in signal.iter_mut().zip(&norm) {
        *x = if n > 1e-12 { *x / n } else { 0.0 };
    }
    Ok(signal)
}

/// Magnitude STFT of an arbitrary-length signal.
pub fn stft_magnitude_of(signal: &[f64]) -> Result<LinearSpectrogram> {
    let spec = stft(signal)?;
    Ok(LinearSpectrogram(spec.mapv(|c| c.norm())))
}

/// Magnitude STFT of a fixed-length note: `1025 × 128`.
pub fn stft_magnitude(w: &Waveform) -> Result<LinearSpectrogram> {
    if w.samples().len() != NOTE_LENGTH {
        return Err(Error::shape(NOTE_LENGTH, w.samples().len()));
    }
    stft_magnitude_of(w.samples())
}
