use super::{LinearSpectrogram, MelSpectrogram};
use crate::{Result, FFT_SIZE, N_BINS, N_MELS, SAMPLE_RATE};
use nalgebra::DMatrix;
use ndarray::Array2;
use std::sync::OnceLock;

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of non-negative projected-gradient refinement steps after the
/// pseudo-inverse initialization in [`MelFilterbank::invert_approx`].
const NNLS_STEPS: usize = 30;

/// Triangular 500-band filterbank over 0–11025 Hz. Each row sums to one
/// (rows that cover no FFT bin stay empty).
pub struct MelFilterbank {
    weights: Array2<f64>,
    inverse: OnceLock<(Array2<f64>, f64)>,
}

impl MelFilterbank {
    pub fn get() -> &'static MelFilterbank {
        static BANK: OnceLock<MelFilterbank> = OnceLock::new();
        BANK.get_or_init(|| MelFilterbank {
            weights: build_weights(N_MELS, N_BINS),
            inverse: OnceLock::new(),
        })
    }

    /// `500 × 1025` projection matrix.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Filters with non-zero weight on linear bin `bin`.
    pub fn support(&self, bin: usize) -> Vec<usize> {
        (0..N_MELS)
            .filter(|&m| self.weights[(m, bin)] > 0.0)
            .collect()
    }

    pub fn project(&self, s: &LinearSpectrogram) -> MelSpectrogram {
        let out = self.weights.dot(s.magnitude());
        MelSpectrogram(out.mapv(|v| v.max(0.0)))
    }

    /// Pseudo-inverse (`1025 × 500`) and the projected-gradient step `1 / ‖W‖₂²`.
    fn inverse_parts(&self) -> &(Array2<f64>, f64) {
        self.inverse.get_or_init(|| {
            let m = DMatrix::from_fn(N_MELS, N_BINS, |r, c| self.weights[(r, c)]);
            let svd = m.svd(true, true);
            let top = svd.singular_values.max();
            let pinv = svd.pseudo_inverse(1e-10).expect("epsilon is non-negative");
            (
                Array2::from_shape_fn((N_BINS, N_MELS), |(r, c)| pinv[(r, c)]),
                1.0 / (top * top),
            )
        })
    }

    /// Moore-Penrose pseudo-inverse of the filterbank.
    pub fn pseudo_inverse(&self) -> &Array2<f64> {
        &self.inverse_parts().0
    }

    /// Non-negative approximate inverse: pseudo-inverse solution clipped at zero,
    /// refined by a few projected-gradient steps of the non-negative least-squares
    /// problem.
    pub fn invert_approx(&self, m: &MelSpectrogram) -> LinearSpectrogram {
        let target = m.magnitude();
        let mut s = self.pseudo_inverse().dot(target).mapv(|v| v.max(0.0));
        let step = self.inverse_parts().1;
        let wt = self.weights.t();
        for _ in 0..NNLS_STEPS {
            let residual = self.weights.dot(&s) - target;
            let grad = wt.dot(&residual);
            s.zip_mut_with(&grad, |v, g| *v = (*v - step * g).max(0.0));
        }
        LinearSpectrogram(s)
    }
}

fn build_weights(n_mels: usize, n_bins: usize) -> Array2<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
    let mut weights = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = bin_hz(k);
            let w = if f > lo && f <= centre {
                (f - lo) / (centre - lo)
            } else if f > centre && f < hi {
                (hi - f) / (hi - centre)
            } else {
                0.0
            };
            weights[(m, k)] = w;
        }
        let area: f64 = weights.row(m).sum();
        if area > 0.0 {
            weights.row_mut(m).mapv_inplace(|w| w / area);
        }
    }
    weights
}

/// Projects linear magnitudes onto the Mel filterbank.
pub fn mel_project(s: &LinearSpectrogram) -> Result<MelSpectrogram> {
    Ok(MelFilterbank::get().project(s))
}

/// Approximate, non-negative return to the linear frequency scale.
pub fn mel_invert_approx(m: &MelSpectrogram) -> Result<LinearSpectrogram> {
    Ok(MelFilterbank::get().invert_approx(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 440.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn rows_are_area_normalized() {
        let bank = MelFilterbank::get();
        for row in bank.weights().rows() {
            let sum = row.sum();
            assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        // the upper part of the spectrum is covered by every filter
        let empty = bank.weights().rows().into_iter().filter(|r| r.sum() == 0.0).count();
        assert!(empty < 100, "{empty} empty filters");
    }

    #[test]
    fn projection_shapes_and_zero() {
        let mel = mel_project(&LinearSpectrogram::zeros(128)).unwrap();
        assert_eq!(mel.magnitude().dim(), (500, 128));
        assert!(mel.magnitude().iter().all(|&v| v == 0.0));
        let back = mel_invert_approx(&mel).unwrap();
        assert_eq!(back.magnitude().dim(), (1025, 128));
        assert!(back.magnitude().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_touches_only_covering_filters() {
        let bank = MelFilterbank::get();
        for k in [3, 40, 200, 700, 1020] {
            let mut lin = Array2::zeros((N_BINS, 1));
            lin[(k, 0)] = 1.0;
            let mel = bank.project(&LinearSpectrogram::new(lin).unwrap());
            let lit: Vec<usize> = (0..N_MELS).filter(|&m| mel.magnitude()[(m, 0)] > 0.0).collect();
            // oracle: triangles whose open support contains the bin frequency
            let top = hz_to_mel(11025.0);
            let f = k as f64 * 22050.0 / 2048.0;
            let expected: Vec<usize> = (0..N_MELS)
                .filter(|&m| {
                    let lo = mel_to_hz(top * m as f64 / 501.0);
                    let hi = mel_to_hz(top * (m + 2) as f64 / 501.0);
                    f > lo && f < hi
                })
                .collect();
            assert_eq!(lit, expected, "bin {k}");
            assert!((1..=2).contains(&lit.len()), "bin {k}: {lit:?}");
        }
    }
}
