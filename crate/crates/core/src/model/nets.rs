use candle_core::{Tensor, D};
use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{adain, celu, dropout, leaky_relu, resize_nearest, BatchNorm, Conv2d, Linear, ParamStore};

pub const ADAIN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

fn as_image(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => Ok(x.unsqueeze(1)?),
        4 => Ok(x.clone()),
        r => Err(Error::shape("(B, H, W) or (B, 1, H, W)", format!("rank {r}"))),
    }
}

/// Strided convolutional encoder; with `outputs = 3` it is the latent
/// encoder Q, with `outputs = n_classes` the reference classifier body.
pub struct Encoder {
    input: (usize, usize),
    pool: usize,
    convs: Vec<(Conv2d, BatchNorm)>,
    hidden: Vec<(Linear, BatchNorm)>,
    out: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, outputs: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            let conv = Conv2d::new(store, &format!("{prefix}.conv{i}"), cin, c, (cfg.enc_kernel, cfg.enc_kernel), 2)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.conv{i}.bn"), c)?;
            convs.push((conv, bn));
            cin = c;
        }
        let mut hidden = Vec::new();
        let mut width = cfg.flatten_dim();
        for (i, &f) in cfg.enc_linears.iter().enumerate() {
            let lin = Linear::new(store, &format!("{prefix}.fc{i}"), width, f)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.fc{i}.bn"), f)?;
            hidden.push((lin, bn));
            width = f;
        }
        let out = Linear::new(store, &format!("{prefix}.out"), width, outputs)?;
        Ok(Self { input: cfg.input, pool: cfg.pool, convs, hidden, out })
    }

    /// Spatial dims of every intermediate map, for shape tracing.
    pub fn trace(&self, x: &Tensor, train: bool) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let mut h = as_image(x)?;
        let (_, _, hh, ww) = h.dims4()?;
        if (hh, ww) != self.input {
            return Err(Error::shape(format!("{:?}", self.input), format!("({hh}, {ww})")));
        }
        if self.pool > 1 {
            h = h.avg_pool2d(self.pool)?;
        }
        let mut dims = vec![(h.dim(2)?, h.dim(3)?)];
        for (conv, bn) in &self.convs {
            h = celu(&bn.forward(&conv.forward(&h)?, train)?)?;
            dims.push((h.dim(2)?, h.dim(3)?));
        }
        let mut h = h.flatten_from(1)?;
        for (lin, bn) in &self.hidden {
            h = celu(&bn.forward(&lin.forward(&h)?, train)?)?;
        }
        Ok((self.out.forward(&h)?, dims))
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.trace(x, train)?.0)
    }
}

/// Conditional decoder G; every normalization is an AdaIN fed by FiLM parameters.
pub struct Decoder {
    input: (usize, usize),
    working: (usize, usize),
    bottleneck: (usize, usize, usize),
    upsample: usize,
    sites: Vec<usize>,
    linears: Vec<Linear>,
    convs: Vec<Conv2d>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut linears = Vec::new();
        let mut width = crate::LATENT_DIM;
        let mut widths = cfg.dec_linears.clone();
        widths.push(cfg.flatten_dim());
        for (i, &f) in widths.iter().enumerate() {
            linears.push(Linear::new(store, &format!("{prefix}.fc{i}"), width, f)?);
            width = f;
        }
        let bottleneck = cfg.bottleneck();
        let mut convs = Vec::new();
        let mut cin = bottleneck.0;
        for (i, (&c, &k)) in cfg.dec_channels.iter().zip(&cfg.dec_kernels).enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}.conv{i}"), cin, c, (k, k), 1)?);
            cin = c;
        }
        Ok(Self {
            input: cfg.input,
            working: cfg.working(),
            bottleneck,
            upsample: cfg.upsample,
            sites: cfg.film_sites(),
            linears,
            convs,
        })
    }

    /// Split (B, 2·Σsites) FiLM output into per-site (γ, β), with γ = 1 + raw scale.
    fn split_film(&self, film: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let total: usize = self.sites.iter().sum();
        if film.dim(1)? != 2 * total {
            return Err(Error::shape(2 * total, film.dim(1)?));
        }
        let mut out = Vec::with_capacity(self.sites.len());
        let mut off = 0;
        for &s in &self.sites {
            let gamma = (film.narrow(1, off, s)? + 1.0)?;
            let beta = film.narrow(1, total + off, s)?;
            out.push((gamma, beta));
            off += s;
        }
        Ok(out)
    }

    /// (B, 3) latents and (B, film_dim) modulation to (B, H, W) in (0, 1).
    pub fn forward(&self, z: &Tensor, film: &Tensor) -> Result<Tensor> {
        let mut h = self.logits(z, film)?.unsqueeze(1)?;
        if self.working != self.input {
            h = resize_nearest(&h, self.input.0, self.input.1)?;
        }
        Ok(candle_nn::ops::sigmoid(&h)?.squeeze(1)?)
    }

    /// Pre-sigmoid output at the working resolution, (B, h, w).
    pub fn logits(&self, z: &Tensor, film: &Tensor) -> Result<Tensor> {
        let params = self.split_film(film)?;
        let mut site = params.iter();
        let mut next = || site.next().expect("one FiLM site per normalization");
        let b = z.dim(0)?;
        let mut h = z.clone();
        for lin in &self.linears[..self.linears.len() - 1] {
            let (g, bt) = next();
            h = celu(&adain(&lin.forward(&h)?, g, bt, ADAIN_EPS)?)?;
        }
        let (c, bh, bw) = self.bottleneck;
        h = self.linears.last().unwrap().forward(&h)?.reshape((b, c, bh, bw))?;
        let (g, bt) = next();
        h = celu(&adain(&h, g, bt, ADAIN_EPS)?)?;
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            if i + 2 < n {
                let (hh, ww) = (h.dim(2)?, h.dim(3)?);
                h = resize_nearest(&h, hh * self.upsample, ww * self.upsample)?;
            } else if i + 2 == n {
                h = resize_nearest(&h, self.working.0, self.working.1)?;
            }
            h = conv.forward(&h)?;
            if i + 1 < n {
                let (g, bt) = next();
                h = celu(&adain(&h, g, bt, ADAIN_EPS)?)?;
            }
        }
        Ok(h.squeeze(1)?)
    }
}

/// Maps condition vectors to FiLM scales and biases.
pub struct FilmGenerator {
    hidden: Vec<(Linear, BatchNorm)>,
    out: Linear,
    inputs: usize,
}

impl FilmGenerator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, inputs: usize) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut width = inputs;
        for (i, &f) in cfg.film_hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("{prefix}.fc{i}"), width, f)?;
            let bn = BatchNorm::new(store, &format!("{prefix}.fc{i}.bn"), f)?;
            hidden.push((lin, bn));
            width = f;
        }
        let out = Linear::new(store, &format!("{prefix}.out"), width, cfg.film_dim())?;
        Ok(Self { hidden, out, inputs })
    }

    pub fn forward(&self, cond: &Tensor, train: bool) -> Result<Tensor> {
        if cond.dim(1)? != self.inputs {
            return Err(Error::shape(self.inputs, cond.dim(1)?));
        }
        let mut h = cond.clone();
        for (lin, bn) in &self.hidden {
            h = celu(&bn.forward(&lin.forward(&h)?, train)?)?;
        }
        self.out.forward(&h)
    }
}

/// MLP classifier on latent codes: the Fader discriminator F and the post-hoc latent classifiers.
pub struct Discriminator {
    hidden: Vec<Linear>,
    out: Linear,
    dropout: f64,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, inputs: usize, classes: usize) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut width = inputs;
        for (i, &f) in cfg.disc_hidden.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{prefix}.fc{i}"), width, f)?);
            width = f;
        }
        let out = Linear::new(store, &format!("{prefix}.out"), width, classes)?;
        Ok(Self { hidden, out, dropout: cfg.dropout })
    }

    /// Logits; dropout is applied only when a random stream is given.
    pub fn logits<R: Rng>(&self, z: &Tensor, mut rng: Option<&mut R>) -> Result<Tensor> {
        let mut h = z.clone();
        for lin in &self.hidden {
            h = leaky_relu(&lin.forward(&h)?, LEAKY_SLOPE)?;
            if let Some(r) = rng.as_deref_mut() {
                h = dropout(&h, self.dropout, r)?;
            }
        }
        self.out.forward(&h)
    }

    pub fn probs<R: Rng>(&self, z: &Tensor, rng: Option<&mut R>) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(z, rng)?, D::Minus1)?)
    }
}
