//! A loaded checkpoint plus everything needed to turn requests into audio.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use fadersynth::checkpoint::{self, Preprocessing};
use fadersynth::corpus::{load_note_bytes, Waveform};
use fadersynth::model::{Conditioning, NoteCondition, WaeModel};
use fadersynth::objectives::Variant;
use fadersynth::spectral::{
    griffin_lim, log_scale, lsd, mel_invert_approx, mel_project, stft_magnitude, unscale, NormalizedSpectrogram,
};
use fadersynth::vocoder::Mcnn;
use fadersynth::{LATENT_DIM, NOTE_LENGTH, N_OCTAVES, N_SEMITONES, SAMPLE_RATE};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DEFAULT_GLA_ITERATIONS: usize = 150;
/// Upper bound on requested Griffin-Lim iterations.
pub const MAX_GLA_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Renderer {
    #[default]
    Gla,
    Mcnn,
}

impl std::str::FromStr for Renderer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gla" => Ok(Renderer::Gla),
            "mcnn" => Ok(Renderer::Mcnn),
            _ => Err(format!("unknown renderer `{s}` (expected gla or mcnn)")),
        }
    }
}

/// Field name to problem.
pub type FieldErrors = BTreeMap<String, String>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid request")]
    Invalid(FieldErrors),
    #[error("{0}")]
    Unavailable(String),
    #[error(transparent)]
    Internal(#[from] fadersynth::Error),
}

impl PipelineError {
    fn field(name: &str, msg: impl Into<String>) -> Self {
        PipelineError::Invalid(FieldErrors::from([(name.to_string(), msg.into())]))
    }
}

impl From<candle_core::Error> for PipelineError {
    fn from(e: candle_core::Error) -> Self {
        PipelineError::Internal(e.into())
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn default_gla_iterations() -> usize {
    DEFAULT_GLA_ITERATIONS
}

/// Target note and rendering options shared by generation and transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub semitone: u8,
    pub octave: u8,
    /// One weight in [0, 1] per loaded style.
    pub style_mix: Vec<f64>,
    #[serde(default)]
    pub renderer: Renderer,
    #[serde(default = "default_gla_iterations")]
    pub gla_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    /// Latent point; sampled from N(0, 1) when absent.
    #[serde(default)]
    pub z: Option<[f64; LATENT_DIM]>,
    /// Seed for the sampled latent point.
    #[serde(default)]
    pub seed: Option<u64>,
    pub semitone: u8,
    pub octave: u8,
    pub style_mix: Vec<f64>,
    #[serde(default)]
    pub renderer: Renderer,
    #[serde(default = "default_gla_iterations")]
    pub gla_iterations: usize,
}

impl GenerateRequest {
    pub fn target(&self) -> Target {
        Target {
            semitone: self.semitone,
            octave: self.octave,
            style_mix: self.style_mix.clone(),
            renderer: self.renderer,
            gla_iterations: self.gla_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub latent_dim: usize,
    pub styles: Vec<String>,
    pub n_style: usize,
    pub variant: Option<Variant>,
    pub conditioning: Conditioning,
    /// Octave classes seen in training.
    pub octaves: Vec<u8>,
    pub renderers: Vec<Renderer>,
    pub sample_rate: u32,
    pub note_length: usize,
    pub default_gla_iterations: usize,
}

pub struct Generated {
    pub z: [f64; LATENT_DIM],
    pub wave: Waveform,
}

pub struct Encoded {
    pub z: [f64; LATENT_DIM],
    pub input: NormalizedSpectrogram,
}

pub struct Pipeline {
    model: WaeModel,
    mcnn: Option<Mcnn>,
    pre: Preprocessing,
    variant: Option<Variant>,
}

pub fn sample_z<R: Rng>(rng: &mut R) -> [f64; LATENT_DIM] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

impl Pipeline {
    /// A vocoder is only used when it was fine-tuned together with the decoder.
    pub fn new(model: WaeModel, mcnn: Option<Mcnn>, pre: Preprocessing, variant: Option<Variant>) -> Result<Self> {
        if model.n_style() != pre.style_vocab.len() {
            return Err(fadersynth::Error::InvalidArgument(format!(
                "model has {} styles but the vocabulary {}",
                model.n_style(),
                pre.style_vocab.len()
            ))
            .into());
        }
        Ok(Self { model, mcnn, pre, variant })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = checkpoint::load(path.as_ref())?;
        let pre = ck.preprocessing();
        let variant = ck.variant();
        let mcnn = if ck.header.finetuned { ck.mcnn } else { None };
        let Some(model) = ck.model else {
            return Err(fadersynth::Error::Checkpoint(format!("{} holds no auto-encoder", path.as_ref().display())).into());
        };
        Self::new(model, mcnn, pre, variant)
    }

    pub fn model(&self) -> &WaeModel {
        &self.model
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.pre
    }

    pub fn info(&self) -> Info {
        let mut renderers = vec![Renderer::Gla];
        if self.mcnn.is_some() {
            renderers.push(Renderer::Mcnn);
        }
        Info {
            latent_dim: LATENT_DIM,
            styles: self.pre.style_vocab.clone(),
            n_style: self.model.n_style(),
            variant: self.variant,
            conditioning: self.model.conditioning(),
            octaves: self.pre.octaves.clone(),
            renderers,
            sample_rate: SAMPLE_RATE,
            note_length: NOTE_LENGTH,
            default_gla_iterations: DEFAULT_GLA_ITERATIONS,
        }
    }

    /// One-hot mix of a named style.
    pub fn style_mix(&self, style: &str) -> Result<Vec<f64>> {
        let i = self.pre.style_vocab.iter().position(|s| s == style).ok_or_else(|| {
            PipelineError::field("style", format!("unknown style `{style}`, expected one of {:?}", self.pre.style_vocab))
        })?;
        let mut mix = vec![0.0; self.pre.style_vocab.len()];
        mix[i] = 1.0;
        Ok(mix)
    }

    /// Every problem with `t`, keyed by field.
    pub fn check_target(&self, t: &Target) -> FieldErrors {
        let mut errs = FieldErrors::new();
        if t.semitone as usize >= N_SEMITONES {
            errs.insert("semitone".into(), format!("must be below {N_SEMITONES}"));
        }
        if t.octave as usize >= N_OCTAVES {
            errs.insert("octave".into(), format!("must be below {N_OCTAVES}"));
        }
        let n = self.model.n_style();
        if t.style_mix.len() != n {
            errs.insert("style_mix".into(), format!("expected {n} weights, got {}", t.style_mix.len()));
        } else if t.style_mix.iter().any(|w| !(0.0..=1.0).contains(w)) {
            errs.insert("style_mix".into(), "weights must lie in [0, 1]".into());
        }
        if t.renderer == Renderer::Gla && t.gla_iterations > MAX_GLA_ITERATIONS {
            errs.insert("gla_iterations".into(), format!("at most {MAX_GLA_ITERATIONS}"));
        }
        errs
    }

    fn validate(&self, t: &Target, mut errs: FieldErrors) -> Result<NoteCondition> {
        errs.extend(self.check_target(t));
        if !errs.is_empty() {
            return Err(PipelineError::Invalid(errs));
        }
        if t.renderer == Renderer::Mcnn && self.mcnn.is_none() {
            return Err(PipelineError::Unavailable(
                "the mcnn renderer needs a pipeline fine-tuned with its vocoder".into(),
            ));
        }
        Ok(NoteCondition::new(t.semitone, t.octave, t.style_mix.clone())?)
    }

    /// Decoded spectrogram as a (1, 500, 128) tensor.
    fn decode(&self, z: &[f64; LATENT_DIM], cond: &NoteCondition) -> Result<Tensor> {
        let z = Tensor::from_slice(z, (1, LATENT_DIM), &Device::Cpu)?.to_dtype(self.model.dtype())?;
        Ok(self.model.decode(&z, &self.model.condition_tensor(std::slice::from_ref(cond))?, false)?)
    }

    fn render(&self, y: &Tensor, renderer: Renderer, gla_iterations: usize) -> Result<Waveform> {
        match renderer {
            Renderer::Gla => {
                let spec = to_spectrogram(y)?;
                let mel = unscale(&spec, self.pre.ref_max)?;
                Ok(griffin_lim(&mel_invert_approx(&mel)?, gla_iterations)?)
            }
            Renderer::Mcnn => {
                let mcnn = self.mcnn.as_ref().expect("checked by validate");
                let v: Vec<f64> = mcnn.forward(y)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
                Ok(Waveform::new(v)?)
            }
        }
    }

    /// Decodes the request's latent point (or one drawn from `rng`) under its condition.
    pub fn generate<R: Rng>(&self, req: &GenerateRequest, rng: &mut R) -> Result<Generated> {
        let mut errs = FieldErrors::new();
        if req.z.is_some_and(|z| z.iter().any(|v| !v.is_finite())) {
            errs.insert("z".into(), "coordinates must be finite".into());
        }
        let target = req.target();
        let cond = self.validate(&target, errs)?;
        let z = match (req.z, req.seed) {
            (Some(z), _) => z,
            (None, Some(seed)) => sample_z(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)),
            (None, None) => sample_z(rng),
        };
        let y = self.decode(&z, &cond)?;
        Ok(Generated { z, wave: self.render(&y, target.renderer, target.gla_iterations)? })
    }

    /// Latent code of a WAV clip, prepared with the corpus loading rules.
    pub fn encode_wav(&self, bytes: &[u8]) -> Result<Encoded> {
        let wave = load_note_bytes(bytes, Path::new("upload")).map_err(|e| PipelineError::field("audio", e.to_string()))?;
        let mel = mel_project(&stft_magnitude(&wave)?)?;
        let input = log_scale(&mel, self.pre.ref_max)?;
        let x = self.model.batch(&[&input])?;
        let z: Vec<f64> = self.model.encode(&x, false)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(Encoded { z: [z[0], z[1], z[2]], input })
    }

    /// Re-decodes an encoded clip under `target`; returns the audio and the
    /// decoded spectrogram.
    pub fn decode_target(&self, z: &[f64; LATENT_DIM], target: &Target) -> Result<(Waveform, NormalizedSpectrogram)> {
        let cond = self.validate(target, FieldErrors::new())?;
        let y = self.decode(z, &cond)?;
        let wave = self.render(&y, target.renderer, target.gla_iterations)?;
        Ok((wave, to_spectrogram(&y)?))
    }

    /// Encodes a clip and decodes it under new note and style targets.
    pub fn transform(&self, bytes: &[u8], target: &Target) -> Result<Waveform> {
        self.validate(target, FieldErrors::new())?;
        let enc = self.encode_wav(bytes)?;
        Ok(self.decode_target(&enc.z, target)?.0)
    }
}

fn to_spectrogram(y: &Tensor) -> Result<NormalizedSpectrogram> {
    let v: Vec<f32> = y.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    Ok(NormalizedSpectrogram::from_f32_slice(&v)?)
}

/// Mean squared error and log-spectral distance between two normalized grids,
/// the second on unscaled Mel magnitudes.
pub fn spectrogram_distance(a: &NormalizedSpectrogram, b: &NormalizedSpectrogram, ref_max: f64) -> Result<(f64, f64)> {
    let mse = (a.values() - b.values()).mapv(|d| d * d).mean().unwrap_or(0.0);
    let (ma, mb) = (unscale(a, ref_max)?, unscale(b, ref_max)?);
    Ok((mse, lsd(ma.magnitude().view(), mb.magnitude().view())?))
}
