//! Multi-head convolutional vocoder (MCNN): Mel magnitudes to waveform.
//!
//! Every head is a stack of five 1-D convolutions, each followed by a pixel
//! shuffle that trades channels for time steps with factors 2·3·3·3·5 = 270.
//! A head ends in a scaled softsign; the heads are summed.

mod stft_op;
mod train;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use stft_op::{mel_project_tensor, stft_magnitude_tensor};
pub use train::{
    finetune_decoder, pretrain_mcnn, spectral_convergence_of, FinetuneConfig, FinetuneReport, McnnTrainConfig,
    PretrainReport,
};

use crate::error::{Error, Result};
use crate::nn::{celu, pixel_shuffle_1d, Conv1d, ParamStore};
use crate::N_MELS;

pub const N_HEADS: usize = 8;
pub const FACTORS: [usize; 5] = [2, 3, 3, 3, 5];
/// Output samples per input frame.
pub const UPSAMPLING: usize = 270;
pub const LAMBDA_SC: f64 = 1.0;
pub const LAMBDA_LOG: f64 = 6.0;
/// Offset inside the log-magnitude loss. Sits near the feature floor (60 dB
/// under a full-scale note), so inaudible bins do not dominate the gradient.
pub const LOG_EPS: f64 = 0.3;
pub const MCNN: &str = "mcnn.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McnnConfig {
    pub heads: usize,
    /// Output channels of each stage after the shuffle; the last is 1.
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for McnnConfig {
    fn default() -> Self {
        Self { heads: N_HEADS, channels: vec![16, 16, 8, 4, 1], kernels: vec![7, 5, 5, 5, 5] }
    }
}

impl McnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::invalid("mcnn needs at least one head"));
        }
        if self.channels.len() != FACTORS.len() || self.kernels.len() != FACTORS.len() {
            return Err(Error::invalid(format!("mcnn needs {} stages", FACTORS.len())));
        }
        if self.channels.last() != Some(&1) || self.channels.contains(&0) {
            return Err(Error::invalid("mcnn channels must be positive and end in 1"));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid("mcnn kernels must be odd"));
        }
        Ok(())
    }
}

struct Head {
    stages: Vec<Conv1d>,
    scale: Var,
}

pub struct Mcnn {
    config: McnnConfig,
    store: ParamStore,
    heads: Vec<Head>,
}

impl Mcnn {
    pub fn new(config: McnnConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let mut stages = Vec::new();
            let mut cin = N_MELS;
            for (i, ((&c, &k), &f)) in config.channels.iter().zip(&config.kernels).zip(&FACTORS).enumerate() {
                stages.push(Conv1d::new(&mut store, &format!("mcnn.head{h}.stage{i}"), cin, c * f, k)?);
                cin = c;
            }
            let scale = store.ones(&format!("mcnn.head{h}.scale"), &[1])?;
            heads.push(Head { stages, scale });
        }
        Ok(Self { config, store, heads })
    }

    pub fn config(&self) -> &McnnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.store.trainable(&[MCNN])
    }

    pub fn hash(&self) -> Result<String> {
        self.store.hash(MCNN)
    }

    /// (B, 500, T) normalized Mel frames to (B, 270·T) samples in [−1, 1].
    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let (_, mels, _) = m.dims3()?;
        if mels != N_MELS {
            return Err(Error::shape(format!("{N_MELS} mel bins"), mels));
        }
        let m = m.to_dtype(self.store.dtype())?;
        let n = self.heads.len() as f64;
        let mut sum: Option<Tensor> = None;
        for head in &self.heads {
            let mut h = m.clone();
            let last = head.stages.len() - 1;
            for (i, (conv, &f)) in head.stages.iter().zip(&FACTORS).enumerate() {
                h = pixel_shuffle_1d(&conv.forward(&h)?, f)?;
                if i < last {
                    h = celu(&h)?;
                }
            }
            let h = h.squeeze(1)?;
            let soft = (&h / (h.abs()? + 1.0)?)?;
            let out = soft.broadcast_mul(&(head.scale.tanh()? / n)?)?;
            sum = Some(match sum {
                Some(s) => (s + out)?,
                None => out,
            });
        }
        Ok(sum.expect("at least one head"))
    }
}

/// The four weighted loss components: SC and logSC on linear then Mel magnitudes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub sc_linear: f64,
    pub log_linear: f64,
    pub sc_mel: f64,
    pub log_mel: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.sc_linear + self.log_linear + self.sc_mel + self.log_mel
    }

    fn add(&mut self, o: &LossParts, w: f64) {
        self.sc_linear += w * o.sc_linear;
        self.log_linear += w * o.log_linear;
        self.sc_mel += w * o.sc_mel;
        self.log_mel += w * o.log_mel;
    }
}

/// Mean over the batch of per-item spectral convergence.
fn sc(s: &Tensor, s_hat: &Tensor) -> Result<Tensor> {
    let tiny = if s.dtype() == DType::F64 { 1e-24 } else { 1e-12 };
    let num = ((s - s_hat)?.sqr()?.sum((1, 2))? + tiny)?.sqrt()?;
    let den = (s.sqr()?.sum((1, 2))? + tiny)?.sqrt()?;
    Ok((num / den)?.mean_all()?)
}

/// Mean absolute log-magnitude difference over all cells.
fn log_sc(s: &Tensor, s_hat: &Tensor) -> Result<Tensor> {
    let a = (s + LOG_EPS)?.log()?;
    let b = (s_hat + LOG_EPS)?.log()?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Target magnitudes of reference signals, linear and Mel.
pub struct SpectralTarget {
    linear: Tensor,
    mel: Tensor,
}

impl SpectralTarget {
    pub fn new(wave: &Tensor) -> Result<Self> {
        let linear = stft_magnitude_tensor(&wave.detach())?;
        let mel = mel_project_tensor(&linear)?;
        Ok(Self { linear, mel })
    }
}

/// λ₀·SC + λ₁·logSC on linear and Mel scales; also returns the weighted parts.
pub fn mcnn_loss(y_hat: &Tensor, target: &SpectralTarget) -> Result<(Tensor, LossParts)> {
    let lin = stft_magnitude_tensor(y_hat)?;
    let mel = mel_project_tensor(&lin)?;
    let terms = [
        (sc(&target.linear, &lin)? * LAMBDA_SC)?,
        (log_sc(&target.linear, &lin)? * LAMBDA_LOG)?,
        (sc(&target.mel, &mel)? * LAMBDA_SC)?,
        (log_sc(&target.mel, &mel)? * LAMBDA_LOG)?,
    ];
    let v: Vec<f64> = terms
        .iter()
        .map(|t| Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?))
        .collect::<Result<_>>()?;
    let parts = LossParts { sc_linear: v[0], log_linear: v[1], sc_mel: v[2], log_mel: v[3] };
    let total = (((&terms[0] + &terms[1])? + &terms[2])? + &terms[3])?;
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small() -> McnnConfig {
        McnnConfig { heads: 2, channels: vec![2, 2, 2, 2, 1], kernels: vec![3, 3, 3, 3, 3] }
    }

    #[test]
    fn output_length_is_exact() {
        let m = Mcnn::new(small(), DType::F32, 0).unwrap();
        for frames in [32, 64, 128] {
            let x = Tensor::rand(0f32, 1.0, (2, N_MELS, frames), &Device::Cpu).unwrap();
            let y = m.forward(&x).unwrap();
            assert_eq!(y.dims(), &[2, UPSAMPLING * frames]);
            let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
        }
        assert!(m.forward(&Tensor::zeros((1, 499, 8), DType::F32, &Device::Cpu).unwrap()).is_err());
        assert_eq!(FACTORS.iter().product::<usize>(), UPSAMPLING);
    }

    #[test]
    fn zero_input_gives_silence() {
        let m = Mcnn::new(McnnConfig::default(), DType::F32, 1).unwrap();
        let y = m.forward(&Tensor::zeros((1, N_MELS, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_is_sum_of_parts_and_zero_on_target() {
        let wave = Tensor::randn(0f64, 0.3, (2, 4096), &Device::Cpu).unwrap();
        let target = SpectralTarget::new(&wave).unwrap();
        let (l, parts) = mcnn_loss(&(&wave * 0.5).unwrap(), &target).unwrap();
        let l = l.to_scalar::<f64>().unwrap();
        assert!((l - parts.total()).abs() < 1e-9);
        // halving the signal: SC = 0.5 on both scales, logSC below ln 2 per cell
        assert!((parts.sc_linear - 0.5 * LAMBDA_SC).abs() < 1e-6);
        assert!((parts.sc_mel - 0.5 * LAMBDA_SC).abs() < 1e-6);
        let s = stft_magnitude_tensor(&wave).unwrap();
        let a = (&s + LOG_EPS).unwrap().log().unwrap();
        let b = ((&s * 0.5).unwrap() + LOG_EPS).unwrap().log().unwrap();
        let want = (a - b).unwrap().abs().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((parts.log_linear / LAMBDA_LOG - want).abs() < 1e-9);
        assert!(want > 0.0 && want < std::f64::consts::LN_2);
        let (zero, _) = mcnn_loss(&wave, &target).unwrap();
        assert!(zero.to_scalar::<f64>().unwrap() < 1e-5);
    }
}
