//! STFT magnitude as a differentiable tensor op.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};
use realfft::num_complex::Complex64;

use crate::spectral::{MelFilterbank, StftPlan};
use crate::{FFT_SIZE, HOP_SIZE, N_BINS, N_MELS};

fn to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let Some((a, b)) = l.contiguous_offsets() else { bail!("stft: operands must be contiguous") };
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|x| *x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => bail!("stft: unsupported dtype"),
    })
}

fn like(s: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match s {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn frames(len: usize) -> candle_core::Result<usize> {
    match StftPlan::frame_count(len) {
        Ok(t) => Ok(t),
        Err(e) => bail!("stft: {e}"),
    }
}

struct StftMag;
struct StftMagGrad;

impl CustomOp1 for StftMag {
    fn name(&self) -> &'static str {
        "stft-magnitude"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n) = l.shape().dims2()?;
        let t = frames(n)?;
        let x = to_f64(s, l)?;
        let plan = StftPlan::get();
        let mut scratch = vec![0.0; FFT_SIZE];
        let mut spec = vec![Complex64::default(); N_BINS];
        let mut out = vec![0.0; b * N_BINS * t];
        for bi in 0..b {
            let sig = &x[bi * n..][..n];
            let o = &mut out[bi * N_BINS * t..][..N_BINS * t];
            for f in 0..t {
                plan.frame_spectrum(sig, f * HOP_SIZE, &mut scratch, &mut spec);
                for (k, c) in spec.iter().enumerate() {
                    o[f * N_BINS + k] = c.norm();
                }
            }
        }
        Ok((like(s, out), Shape::from((b, t, N_BINS))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &StftMagGrad)?))
    }
}

impl CustomOp2 for StftMagGrad {
    fn name(&self) -> &'static str {
        "stft-magnitude-grad"
    }

    // d|S_k|/dx_n = Re(u_k* w_n e^{-2πikn/N}) with u_k = S_k/|S_k|, so the
    // frame gradient is Re Σ_k g_k u_k e^{2πikn/N}, one inverse real FFT.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n) = l1.shape().dims2()?;
        let t = frames(n)?;
        let x = to_f64(s1, l1)?;
        let g = to_f64(s2, l2)?;
        let plan = StftPlan::get();
        let mut scratch = vec![0.0; FFT_SIZE];
        let mut spec = vec![Complex64::default(); N_BINS];
        let mut frame = vec![0.0; FFT_SIZE];
        let mut dx = vec![0.0; b * n];
        for bi in 0..b {
            let sig = &x[bi * n..][..n];
            let gb = &g[bi * N_BINS * t..][..N_BINS * t];
            let d = &mut dx[bi * n..][..n];
            for f in 0..t {
                plan.frame_spectrum(sig, f * HOP_SIZE, &mut scratch, &mut spec);
                for (k, c) in spec.iter_mut().enumerate() {
                    let m = c.norm();
                    let u = if m > 0.0 { *c / m } else { Complex64::default() };
                    let edge = k == 0 || k == N_BINS - 1;
                    let gk = gb[f * N_BINS + k];
                    *c = u * if edge { gk } else { 0.5 * gk };
                    if edge {
                        c.im = 0.0;
                    }
                }
                plan.inverse_frame(&mut spec, &mut frame);
                let start = f * HOP_SIZE;
                for (i, (&v, &w)) in frame.iter().zip(plan.window()).enumerate() {
                    d[start + i] += v * w;
                }
            }
        }
        Ok((like(s1, dx), Shape::from((b, n))))
    }
}

/// Non-zero span of every Mel filter: (first bin, weights).
fn mel_rows() -> &'static [(usize, Vec<f64>)] {
    static ROWS: std::sync::OnceLock<Vec<(usize, Vec<f64>)>> = std::sync::OnceLock::new();
    ROWS.get_or_init(|| {
        let w = MelFilterbank::get().weights();
        w.outer_iter()
            .map(|row| {
                let first = row.iter().position(|v| *v != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|v| *v != 0.0).map_or(first, |l| l + 1);
                (first, row.iter().skip(first).take(last - first).copied().collect())
            })
            .collect()
    })
}

struct MelProject;
struct MelAdjoint;

impl CustomOp1 for MelProject {
    fn name(&self) -> &'static str {
        "mel-project"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims();
        if dims.last() != Some(&N_BINS) {
            bail!("mel projection expects {N_BINS} bins last, got {dims:?}");
        }
        let x = to_f64(s, l)?;
        let rows = mel_rows();
        let mut out = Vec::with_capacity(x.len() / N_BINS * N_MELS);
        for frame in x.chunks_exact(N_BINS) {
            for (first, w) in rows {
                out.push(w.iter().zip(&frame[*first..]).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let mut shape = dims.to_vec();
        *shape.last_mut().unwrap() = N_MELS;
        Ok((like(s, out), Shape::from(shape)))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&MelAdjoint)?))
    }
}

impl CustomOp1 for MelAdjoint {
    fn name(&self) -> &'static str {
        "mel-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims();
        let g = to_f64(s, l)?;
        let rows = mel_rows();
        let mut out = vec![0.0; g.len() / N_MELS * N_BINS];
        for (gf, of) in g.chunks_exact(N_MELS).zip(out.chunks_exact_mut(N_BINS)) {
            for ((first, w), gv) in rows.iter().zip(gf) {
                for (o, wv) in of[*first..].iter_mut().zip(w) {
                    *o += wv * gv;
                }
            }
        }
        let mut shape = dims.to_vec();
        *shape.last_mut().unwrap() = N_BINS;
        Ok((like(s, out), Shape::from(shape)))
    }
}

/// Projects (..., 1025) linear magnitudes onto the 500 Mel bands: (..., 500).
pub fn mel_project_tensor(s: &Tensor) -> candle_core::Result<Tensor> {
    s.contiguous()?.apply_op1(MelProject)
}

/// Magnitude STFT of a (B, N) batch of signals, frame-major: (B, frames, 1025).
pub fn stft_magnitude_tensor(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(StftMag)
}
