use crate::{Error, Result};
use ndarray::{ArrayView2, Zip};

/// Magnitude floor applied to both arguments of [`lsd`].
pub const LSD_FLOOR: f64 = 1e-3;

fn same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// `‖|S| − |Ŝ|‖_F / ‖|S|‖_F`.
pub fn spectral_convergence(s: ArrayView2<f64>, s_hat: ArrayView2<f64>) -> Result<f64> {
    same_shape(&s, &s_hat)?;
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(&s).and(&s_hat).for_each(|&a, &b| {
        let d = a.abs() - b.abs();
        num += d * d;
        den += a * a;
    });
    if den == 0.0 {
        return Err(Error::invalid("spectral convergence of an all-zero reference"));
    }
    Ok(num.sqrt() / den.sqrt())
}

/// `‖log(|S| + ε) − log(|Ŝ| + ε)‖₁`, summed over all cells.
pub fn log_magnitude_loss(s: ArrayView2<f64>, s_hat: ArrayView2<f64>, eps: f64) -> Result<f64> {
    same_shape(&s, &s_hat)?;
    let mut total = 0.0;
    Zip::from(&s).and(&s_hat).for_each(|&a, &b| {
        total += ((a.abs() + eps).ln() - (b.abs() + eps).ln()).abs();
    });
    Ok(total)
}

/// Log-spectral distance in dB: per frame `sqrt(Σ_bins [10 log10(S/Ŝ)]²)`,
/// averaged over frames (columns). Both inputs are floored at [`LSD_FLOOR`].
pub fn lsd(s: ArrayView2<f64>, s_hat: ArrayView2<f64>) -> Result<f64> {
    same_shape(&s, &s_hat)?;
    let frames = s.ncols();
    if frames == 0 {
        return Ok(0.0);
    }
    let total: f64 = s
        .columns()
        .into_iter()
        .zip(s_hat.columns())
        .map(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .map(|(&x, &y)| {
                    let d = 10.0 * (x.max(LSD_FLOOR) / y.max(LSD_FLOOR)).log10();
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

/// Root-mean-squared error over all cells.
pub fn rmse(s: ArrayView2<f64>, s_hat: ArrayView2<f64>) -> Result<f64> {
    same_shape(&s, &s_hat)?;
    if s.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    Zip::from(&s).and(&s_hat).for_each(|&a, &b| total += (a - b) * (a - b));
    Ok((total / s.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn grid(seed: u64) -> Array2<f64> {
        Array2::from_shape_fn((20, 7), |(r, c)| {
            0.01 + ((r * 31 + c * 17 + seed as usize * 7) % 23) as f64 / 10.0
        })
    }

    #[test]
    fn spectral_convergence_cases() {
        let s = grid(1);
        assert_eq!(spectral_convergence(s.view(), s.view()).unwrap(), 0.0);
        let zero = Array2::zeros(s.dim());
        assert!((spectral_convergence(s.view(), zero.view()).unwrap() - 1.0).abs() < 1e-12);
        let twice = &s * 2.0;
        assert!((spectral_convergence(s.view(), twice.view()).unwrap() - 1.0).abs() < 1e-12);
        assert!(spectral_convergence(zero.view(), s.view()).is_err());
    }

    #[test]
    fn log_magnitude_cases() {
        let s = grid(2);
        assert_eq!(log_magnitude_loss(s.view(), s.view(), 1e-5).unwrap(), 0.0);
        let ones = Array2::<f64>::ones((10, 10));
        let scaled = &ones * std::f64::consts::E;
        let v = log_magnitude_loss(ones.view(), scaled.view(), 1e-12).unwrap();
        assert!((v - 100.0).abs() < 1e-8);
        let t = grid(3);
        assert_eq!(
            log_magnitude_loss(s.view(), t.view(), 1e-5).unwrap(),
            log_magnitude_loss(t.view(), s.view(), 1e-5).unwrap()
        );
    }

    #[test]
    fn lsd_and_rmse_cases() {
        let s = grid(4);
        assert_eq!(lsd(s.view(), s.view()).unwrap(), 0.0);
        assert_eq!(rmse(s.view(), s.view()).unwrap(), 0.0);
        let tenfold = &s * 10.0;
        let expected = 10.0 * (s.nrows() as f64).sqrt();
        assert!((lsd(s.view(), tenfold.view()).unwrap() - expected).abs() < 1e-9);
        let shifted = &s + 0.25;
        assert!((rmse(s.view(), shifted.view()).unwrap() - 0.25).abs() < 1e-12);
        assert!(rmse(s.view(), Array2::zeros((3, 3)).view()).is_err());
    }

    proptest! {
        #[test]
        fn metrics_non_negative_and_zero_iff_equal(
            a in proptest::collection::vec(0.0f64..5.0, 12),
            b in proptest::collection::vec(0.0f64..5.0, 12),
        ) {
            let s = Array2::from_shape_vec((3, 4), a).unwrap();
            let t = Array2::from_shape_vec((3, 4), b).unwrap();
            let r = rmse(s.view(), t.view()).unwrap();
            let l = lsd(s.view(), t.view()).unwrap();
            let g = log_magnitude_loss(s.view(), t.view(), 1e-5).unwrap();
            prop_assert!(r >= 0.0 && l >= 0.0 && g >= 0.0);
            prop_assert_eq!(r == 0.0, s == t);
            let floored_equal = s.iter().zip(t.iter()).all(|(x, y)| x.max(LSD_FLOOR) == y.max(LSD_FLOOR));
            prop_assert_eq!(l == 0.0, floored_equal);
        }
    }
}
