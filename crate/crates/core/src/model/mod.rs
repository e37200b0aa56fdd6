//! Encoder Q, FiLM-conditioned decoder G, FiLM generator and Fader discriminator F.

mod condition;
mod config;
mod nets;

use candle_core::{DType, Tensor, Var};
use rand::Rng;

pub use condition::{Conditioning, NoteCondition};
pub use config::ModelConfig;
pub use nets::{Decoder, Discriminator, Encoder, FilmGenerator, ADAIN_EPS};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::spectral::NormalizedSpectrogram;
use crate::{LATENT_DIM, N_OCTAVES, N_SEMITONES};

pub const ENCODER: &str = "encoder.";
pub const DECODER: &str = "decoder.";
pub const FILM: &str = "film.";
pub const DISCRIMINATOR: &str = "discriminator.";

pub struct WaeModel {
    config: ModelConfig,
    n_style: usize,
    conditioning: Conditioning,
    seed: u64,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    film: FilmGenerator,
    disc: Discriminator,
}

impl WaeModel {
    /// Full-size model with every condition active.
    pub fn init_model(n_style: usize, seed: u64) -> Result<Self> {
        Self::new(ModelConfig::paper(), n_style, Conditioning::ALL, DType::F32, seed)
    }

    pub fn new(
        config: ModelConfig,
        n_style: usize,
        conditioning: Conditioning,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        if n_style < 2 {
            return Err(Error::invalid(format!("need at least 2 styles, got {n_style}")));
        }
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut store, "encoder", &config, LATENT_DIM)?;
        let decoder = Decoder::new(&mut store, "decoder", &config)?;
        let film = FilmGenerator::new(&mut store, "film", &config, N_SEMITONES + N_OCTAVES + n_style)?;
        let disc = Discriminator::new(&mut store, "discriminator", &config, LATENT_DIM, n_style)?;
        Ok(Self { config, n_style, conditioning, seed, store, encoder, decoder, film, disc })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_style(&self) -> usize {
        self.n_style
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Trainable variables of the named components ([`ENCODER`], [`DECODER`], ...).
    pub fn trainable(&self, components: &[&str]) -> Vec<Var> {
        self.store.trainable(components)
    }

    pub fn hash(&self, component: &str) -> Result<String> {
        self.store.hash(component)
    }

    /// Stack spectrograms into a (B, H, W) tensor of the model dtype.
    pub fn batch(&self, specs: &[&NormalizedSpectrogram]) -> Result<Tensor> {
        let (h, w) = self.config.input;
        let mut v = Vec::with_capacity(specs.len() * h * w);
        for s in specs {
            let f = s.to_f32_vec();
            if f.len() != h * w {
                return Err(Error::shape(h * w, f.len()));
            }
            v.extend(f);
        }
        Ok(Tensor::from_vec(v, (specs.len(), h, w), self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Masked (B, 21 + n_style) condition tensor.
    pub fn condition_tensor(&self, conds: &[NoteCondition]) -> Result<Tensor> {
        let width = N_SEMITONES + N_OCTAVES + self.n_style;
        let mut v = Vec::with_capacity(conds.len() * width);
        for c in conds {
            v.extend(self.conditioning.encode(c, self.n_style)?);
        }
        Ok(Tensor::from_vec(v, (conds.len(), width), self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Deterministic latent codes; `train` selects batch statistics and updates running averages.
    pub fn encode(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        ensure_finite(x, "encoder input")?;
        self.encoder.forward(x, train)
    }

    /// Encode while recording the spatial dims after every convolution.
    pub fn encode_trace(&self, x: &Tensor) -> Result<(Tensor, Vec<(usize, usize)>)> {
        self.encoder.trace(x, false)
    }

    pub fn film_generate(&self, cond: &Tensor, train: bool) -> Result<Tensor> {
        self.film.forward(cond, train)
    }

    pub fn decode(&self, z: &Tensor, cond: &Tensor, train: bool) -> Result<Tensor> {
        self.check_latent(z)?;
        let film = self.film.forward(cond, train)?;
        self.decoder.forward(z, &film)
    }

    /// Decoder logits at the working resolution; pair with [`crate::objectives::bce_logits`].
    pub fn decode_logits(&self, z: &Tensor, cond: &Tensor, train: bool) -> Result<Tensor> {
        self.check_latent(z)?;
        let film = self.film.forward(cond, train)?;
        self.decoder.logits(z, &film)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.dim(1)? != LATENT_DIM {
            return Err(Error::shape(LATENT_DIM, z.dim(1)?));
        }
        ensure_finite(z, "latent code")
    }

    /// Style probabilities; dropout is active only when a random stream is given.
    pub fn fader_discriminate<R: Rng>(&self, z: &Tensor, rng: Option<&mut R>) -> Result<Tensor> {
        self.disc.probs(z, rng)
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.detach().to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}
