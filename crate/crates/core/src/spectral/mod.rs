//! Deterministic signal math: STFT, Mel projection, log scaling, Griffin-Lim
//! phase recovery, spectral losses and reconstruction metrics.
//!
//! Grids are stored as `(bins, frames)` arrays of `f64`.

mod gla;
mod mel;
mod metrics;
mod scale;
mod stft;

pub use gla::{griffin_lim, griffin_lim_traced};
pub use mel::{hz_to_mel, mel_invert_approx, mel_project, mel_to_hz, MelFilterbank};
pub use metrics::{log_magnitude_loss, lsd, rmse, spectral_convergence, LSD_FLOOR};
pub use scale::{log_scale, unscale, MAGNITUDE_FLOOR};
pub use stft::{hann_window, istft, stft, stft_magnitude, stft_magnitude_of, StftPlan};

use crate::{Error, Result, N_BINS, N_FRAMES, N_MELS};
use ndarray::Array2;

fn check_non_negative(values: &Array2<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite() && *v >= 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} must hold finite non-negative values"
        )))
    }
}

fn check_shape(values: &Array2<f64>, rows: usize, what: &str) -> Result<()> {
    if values.nrows() != rows || values.ncols() == 0 {
        return Err(Error::shape(
            format!("{what} with {rows} rows"),
            format!("{:?}", values.dim()),
        ));
    }
    Ok(())
}

/// Linear-frequency STFT magnitudes, `1025 × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectrogram(Array2<f64>);

impl LinearSpectrogram {
    pub fn new(magnitude: Array2<f64>) -> Result<Self> {
        check_shape(&magnitude, N_BINS, "linear spectrogram")?;
        check_non_negative(&magnitude, "linear spectrogram")?;
        Ok(Self(magnitude))
    }

    pub fn zeros(frames: usize) -> Self {
        Self(Array2::zeros((N_BINS, frames)))
    }

    pub fn magnitude(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Mel-scale magnitudes, `500 × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram(Array2<f64>);

impl MelSpectrogram {
    pub fn new(magnitude: Array2<f64>) -> Result<Self> {
        check_shape(&magnitude, N_MELS, "mel spectrogram")?;
        check_non_negative(&magnitude, "mel spectrogram")?;
        Ok(Self(magnitude))
    }

    pub fn zeros(frames: usize) -> Self {
        Self(Array2::zeros((N_MELS, frames)))
    }

    pub fn magnitude(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Log-scaled Mel magnitudes in `[0, 1]`, the model's input and output unit.
///
/// Always `500 × 128`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSpectrogram(Array2<f64>);

impl NormalizedSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.dim() != (N_MELS, N_FRAMES) {
            return Err(Error::shape(
                format!("({N_MELS}, {N_FRAMES})"),
                format!("{:?}", values.dim()),
            ));
        }
        if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "normalized spectrogram values must lie in [0, 1]",
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Row-major `f32` copy, as fed to the networks.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    /// Builds a grid from network output, clamping rounding excursions into `[0, 1]`.
    pub fn from_f32_slice(values: &[f32]) -> Result<Self> {
        if values.len() != N_MELS * N_FRAMES {
            return Err(Error::shape(N_MELS * N_FRAMES, values.len()));
        }
        let grid = Array2::from_shape_fn((N_MELS, N_FRAMES), |(r, c)| {
            (values[r * N_FRAMES + c] as f64).clamp(0.0, 1.0)
        });
        Ok(Self(grid))
    }
}
