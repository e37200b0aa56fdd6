use super::{MelSpectrogram, NormalizedSpectrogram};
use crate::{Error, Result};

/// Relative magnitude floor applied before log scaling.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

fn check_ref(ref_max: f64) -> Result<()> {
    if ref_max.is_finite() && ref_max > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("ref_max must be > 0, got {ref_max}")))
    }
}

/// `v = (log10(clip(m / ref_max, 1e-3, 1)) + 3) / 3`.
pub fn log_scale(m: &MelSpectrogram, ref_max: f64) -> Result<NormalizedSpectrogram> {
    check_ref(ref_max)?;
    let values = m.magnitude().mapv(|v| {
        let rel = (v / ref_max).clamp(MAGNITUDE_FLOOR, 1.0);
        ((rel.log10() + 3.0) / 3.0).clamp(0.0, 1.0)
    });
    NormalizedSpectrogram::new(values)
}

/// Inverse of [`log_scale`] on the in-range domain.
pub fn unscale(n: &NormalizedSpectrogram, ref_max: f64) -> Result<MelSpectrogram> {
    check_ref(ref_max)?;
    Ok(MelSpectrogram(
        n.values().mapv(|v| ref_max * 10f64.powf(3.0 * v - 3.0)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{N_FRAMES, N_MELS};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn mel_filled(value: f64) -> MelSpectrogram {
        MelSpectrogram::new(Array2::from_elem((N_MELS, N_FRAMES), value)).unwrap()
    }

    #[test]
    fn bounds() {
        let top = log_scale(&mel_filled(7.5), 7.5).unwrap();
        assert!(top.values().iter().all(|&v| v == 1.0));
        let floor = log_scale(&mel_filled(7.5e-3 * 0.5), 7.5).unwrap();
        assert!(floor.values().iter().all(|&v| v == 0.0));
        let at_floor = log_scale(&mel_filled(7.5e-3), 7.5).unwrap();
        assert!(at_floor.values().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn non_positive_reference_is_fatal() {
        assert!(log_scale(&mel_filled(1.0), 0.0).is_err());
        assert!(log_scale(&mel_filled(1.0), -2.0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_range(rel in 1e-3f64..=1.0, ref_max in 1e-2f64..1e3) {
            let m = mel_filled(rel * ref_max);
            let back = unscale(&log_scale(&m, ref_max).unwrap(), ref_max).unwrap();
            let err = (back.magnitude()[(0, 0)] - rel * ref_max).abs();
            prop_assert!(err < 1e-9 * ref_max.max(1.0), "err {}", err);
        }
    }
}
