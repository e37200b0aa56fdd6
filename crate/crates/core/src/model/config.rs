use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::{LATENT_DIM, N_FRAMES, N_MELS};

/// Network geometry. The model contract is always an `input`-shaped
/// spectrogram in and out; `pool` shrinks the working resolution inside
/// the networks for cheaper desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (mel bins, frames) of the spectrogram contract.
    pub input: (usize, usize),
    /// Average-pool factor applied on the way in, nearest upsampling on the way out.
    pub pool: usize,
    pub enc_channels: Vec<usize>,
    pub enc_kernel: usize,
    /// Hidden linear widths of the encoder; the latent layer is appended.
    pub enc_linears: Vec<usize>,
    /// Hidden linear widths of the decoder; the flatten-sized layer is appended.
    pub dec_linears: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub dec_kernels: Vec<usize>,
    pub upsample: usize,
    pub film_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size geometry on 500×128 spectrograms.
    pub fn paper() -> Self {
        Self {
            input: (N_MELS, N_FRAMES),
            pool: 1,
            enc_channels: vec![12, 24, 48, 96, 128],
            enc_kernel: 5,
            enc_linears: vec![1024, 512],
            dec_linears: vec![512, 1024],
            dec_channels: vec![96, 48, 24, 12, 1],
            dec_kernels: vec![5, 5, 7, 9, 7],
            upsample: 3,
            film_hidden: vec![512, 1024],
            disc_hidden: vec![1024, 1024],
            dropout: 0.3,
        }
    }

    /// Same layer structure with 4×4 pooling and narrow layers, sized for
    /// CPU training in minutes.
    pub fn desk() -> Self {
        Self {
            input: (N_MELS, N_FRAMES),
            pool: 4,
            enc_channels: vec![8, 16, 32, 32, 64],
            enc_kernel: 5,
            enc_linears: vec![128, 64],
            dec_linears: vec![64, 128],
            dec_channels: vec![32, 16, 8, 8, 1],
            dec_kernels: vec![3, 3, 3, 3, 3],
            upsample: 3,
            film_hidden: vec![64, 128],
            disc_hidden: vec![128, 128],
            dropout: 0.3,
        }
    }

    /// 8×8 replica used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            input: (8, 8),
            pool: 1,
            enc_channels: vec![2, 2],
            enc_kernel: 3,
            enc_linears: vec![4],
            dec_linears: vec![4],
            dec_channels: vec![2, 2, 1],
            dec_kernels: vec![3, 3, 3],
            upsample: 3,
            film_hidden: vec![4],
            disc_hidden: vec![4],
            dropout: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.pool == 0 || !self.input.0.is_multiple_of(self.pool) || !self.input.1.is_multiple_of(self.pool) {
            return bad("pool must divide the input dimensions");
        }
        if self.enc_channels.is_empty() || self.enc_kernel.is_multiple_of(2) {
            return bad("encoder needs at least one odd-kernel convolution");
        }
        if self.dec_channels.len() < 2 || self.dec_kernels.len() != self.dec_channels.len() {
            return bad("decoder needs at least two convolutions and one kernel per convolution");
        }
        if self.dec_channels.last() != Some(&1) {
            return bad("decoder must end with a single channel");
        }
        if self.dec_kernels.iter().any(|k| k % 2 == 0) || self.upsample == 0 {
            return bad("decoder kernels must be odd and upsampling non-zero");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Resolution the convolutional stacks operate at.
    pub fn working(&self) -> (usize, usize) {
        (self.input.0 / self.pool, self.input.1 / self.pool)
    }

    /// Spatial dims after each encoder convolution, starting with the working resolution.
    pub fn encoder_trace(&self) -> Vec<(usize, usize)> {
        let p = self.enc_kernel / 2;
        let mut dims = vec![self.working()];
        for _ in &self.enc_channels {
            let (h, w) = *dims.last().unwrap();
            dims.push(((h + 2 * p - self.enc_kernel) / 2 + 1, (w + 2 * p - self.enc_kernel) / 2 + 1));
        }
        dims
    }

    /// (channels, height, width) at the encoder/decoder bottleneck.
    pub fn bottleneck(&self) -> (usize, usize, usize) {
        let (h, w) = *self.encoder_trace().last().unwrap();
        (*self.enc_channels.last().unwrap(), h, w)
    }

    pub fn flatten_dim(&self) -> usize {
        let (c, h, w) = self.bottleneck();
        c * h * w
    }

    /// Widths of the AdaIN sites fed by the FiLM generator, in decoder order.
    pub fn film_sites(&self) -> Vec<usize> {
        let mut sites = self.dec_linears.clone();
        sites.push(self.bottleneck().0);
        sites.extend(&self.dec_channels[..self.dec_channels.len() - 1]);
        sites
    }

    /// Scales then biases for every site.
    pub fn film_dim(&self) -> usize {
        2 * self.film_sites().iter().sum::<usize>()
    }

    pub fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    /// Short stable digest of the geometry, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}
