//! Command line front end: one subcommand per pipeline stage.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fadersynth::checkpoint::{self, Preprocessing};
use fadersynth::corpus::{synth_corpus, write_wav_pcm16, CorpusIndex, SynthSpec, STYLE_PALETTE};
use fadersynth::objectives::Variant;
use fadersynth::training::{
    build_model, evaluate, export_latent_map, train, train_reference_classifier, Attribute, ClassifierConfig,
    ClassifierSet, EvalConfig, EvalReport, LatentPoint, TrainConfig, BEST_CHECKPOINT,
};
use fadersynth::training::data::Dataset;
use fadersynth::vocoder::{finetune_decoder, pretrain_mcnn, FinetuneConfig, Mcnn, McnnConfig, McnnTrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api::{self, AppState};
use crate::pipeline::{GenerateRequest, Pipeline, Renderer, DEFAULT_GLA_ITERATIONS};

/// Directory searched for a checkpoint when `--checkpoint` is not given.
pub const CHECKPOINT_DIR_ENV: &str = "FADERSYNTH_CHECKPOINT_DIR";
/// File name of an exported auto-encoder + vocoder pipeline.
pub const PIPELINE_CHECKPOINT: &str = "pipeline.safetensors";

#[derive(Debug, Parser)]
#[command(name = "fadersynth", version, about = "Train and play conditional note auto-encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus to WAV files plus index.json.
    SynthCorpus(SynthCorpusArgs),
    /// Train one auto-encoder variant.
    Train(TrainArgs),
    /// Train the semitone, octave and style reference classifiers.
    TrainClassifiers(ClassifierArgs),
    /// Score a checkpoint against reference classifiers; prints JSON.
    Eval(EvalArgs),
    /// Pretrain the neural vocoder on corpus audio.
    PretrainVocoder(PretrainArgs),
    /// Fine-tune a decoder jointly with a pretrained vocoder.
    Finetune(FinetuneArgs),
    /// Render one note to a WAV file.
    Generate(GenerateArgs),
    /// Encode a corpus and write its latent points as JSON.
    LatentMap(LatentMapArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub styles: usize,
    #[arg(long, default_value_t = 60)]
    pub notes_per_style: usize,
    /// Inclusive octave range, e.g. `3-4`.
    #[arg(long, default_value = "3-4", value_parser = parse_octaves)]
    pub octaves: (u8, u8),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Optional overrides of a training run, read from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<Variant>,
    /// `desk` (default) or `paper`.
    pub preset: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub warmup_start: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Command-line values win over the file.
    pub fn resolve(&self, args: &TrainArgs) -> Result<TrainConfig> {
        let variant = args.variant.or(self.variant).context("no variant given (--variant or `variant` in the config)")?;
        let mut cfg = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => TrainConfig::desk(variant),
            "paper" => TrainConfig::paper(variant),
            other => bail!("unknown preset `{other}` (expected desk or paper)"),
        };
        if let Some(v) = args.epochs.or(self.epochs) {
            cfg.epochs = v;
        }
        if let Some(v) = args.batch_size.or(self.batch_size) {
            cfg.batch_size = v;
        }
        if let Some(v) = args.learning_rate.or(self.learning_rate) {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.warmup_start {
            cfg.warmup_start = Some(v);
        }
        if let Some(v) = args.seed.or(self.seed) {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus index.json, or the directory holding it.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for metrics.csv and best.safetensors.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub classifiers: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Prior samples for the conditioning scores.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Trained auto-encoder checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pretrained vocoder checkpoint.
    #[arg(long)]
    pub vocoder: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file; a directory gets pipeline.safetensors.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub semitone: u8,
    #[arg(long)]
    pub octave: u8,
    /// Style name from the checkpoint vocabulary.
    #[arg(long, conflicts_with = "style_mix")]
    pub style: Option<String>,
    /// Comma-separated weights, one per style.
    #[arg(long, value_delimiter = ',')]
    pub style_mix: Option<Vec<f64>>,
    /// Latent point `x,y,z`; sampled from the seed when absent.
    #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    pub z: Option<Vec<f64>>,
    #[arg(long, default_value = "gla")]
    pub renderer: Renderer,
    #[arg(long, default_value_t = DEFAULT_GLA_ITERATIONS)]
    pub gla_iterations: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct LatentMapArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; encoding is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Service options, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    /// Precomputed latent map JSON.
    pub latent_map: Option<PathBuf>,
    /// Corpus to encode for the latent map when no JSON is given.
    pub corpus: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { checkpoint: None, host: "127.0.0.1".into(), port: 8080, latent_map: None, corpus: None, seed: 0 }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub latent_map: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ServeArgs {
    pub fn resolve(&self) -> Result<ServeConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ServeConfig::default(),
        };
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        if let Some(h) = &self.host {
            cfg.host = h.clone();
        }
        if let Some(p) = self.port {
            cfg.port = p;
        }
        if self.latent_map.is_some() {
            cfg.latent_map = self.latent_map.clone();
        }
        if self.corpus.is_some() {
            cfg.corpus = self.corpus.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn parse_octaves(s: &str) -> Result<(u8, u8), String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let lo = a.trim().parse::<u8>().map_err(|e| format!("`{a}`: {e}"))?;
    let hi = b.trim().parse::<u8>().map_err(|e| format!("`{b}`: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}-{hi}"));
    }
    Ok((lo, hi))
}

/// Resolves `--checkpoint` or the environment default. A directory resolves
/// to its exported pipeline, else to its best training checkpoint.
pub fn resolve_checkpoint(arg: Option<&Path>) -> Result<PathBuf> {
    let path = match arg {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(CHECKPOINT_DIR_ENV)
            .map(PathBuf::from)
            .with_context(|| format!("no --checkpoint given and {CHECKPOINT_DIR_ENV} is not set"))?,
    };
    if !path.is_dir() {
        return Ok(path);
    }
    [PIPELINE_CHECKPOINT, BEST_CHECKPOINT]
        .iter()
        .map(|f| path.join(f))
        .find(|p| p.is_file())
        .with_context(|| format!("{} holds neither {PIPELINE_CHECKPOINT} nor {BEST_CHECKPOINT}", path.display()))
}

fn open_corpus(path: &Path) -> Result<Dataset> {
    let index_path = if path.is_dir() { path.join("index.json") } else { path.to_path_buf() };
    let index = CorpusIndex::open(&index_path)?;
    tracing::info!(entries = index.entries.len(), path = %index_path.display(), "loading corpus");
    Ok(Dataset::from_index(&index)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn preprocessing(data: &Dataset) -> Preprocessing {
    Preprocessing { style_vocab: data.style_vocab.clone(), ref_max: data.ref_max, octaves: data.octaves() }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthCorpus(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::TrainClassifiers(a) => classifiers(a),
        Command::Eval(a) => eval(a).map(|_| ()),
        Command::PretrainVocoder(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Generate(a) => generate(a),
        Command::LatentMap(a) => latent_map(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthCorpusArgs) -> Result<()> {
    if a.styles == 0 || a.styles > STYLE_PALETTE.len() {
        bail!("--styles must be between 1 and {}", STYLE_PALETTE.len());
    }
    let spec = SynthSpec { n_styles: a.styles, notes_per_style: a.notes_per_style, octave_range: a.octaves };
    let corpus = synth_corpus(&spec, a.seed)?;
    corpus.write(&a.out)?;
    println!("wrote {} notes to {}", corpus.audio.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = file.resolve(&a)?;
    let data = open_corpus(&a.corpus)?;
    let model = build_model(&cfg, data.n_style())?;
    let report = train(&model, &data, &cfg, Some(&a.out))?;
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "{}: best epoch {} with validation reconstruction {:.5}",
        cfg.variant, report.best_epoch, report.best_val_recon
    );
    Ok(())
}

fn classifiers(a: ClassifierArgs) -> Result<()> {
    let data = open_corpus(&a.corpus)?;
    let cfg = ClassifierConfig { epochs: a.epochs, seed: a.seed, ..ClassifierConfig::desk() };
    let mut set = Vec::new();
    for attribute in Attribute::ALL {
        let (clf, report) = train_reference_classifier(&data, attribute, &cfg)?;
        println!(
            "{attribute}: train F1 {:.3}, test F1 {}",
            report.f1_train,
            report.f1_test.map_or("NA".into(), |f| format!("{f:.3}"))
        );
        set.push(clf);
    }
    ClassifierSet { model: cfg.model, style_vocab: data.style_vocab.clone(), classifiers: set }.save(&a.out)?;
    Ok(())
}

fn na(v: Option<f64>) -> String {
    v.map_or("NA".into(), |v| format!("{v:.3}"))
}

pub fn eval(a: EvalArgs) -> Result<EvalReport> {
    let ck = checkpoint::load(resolve_checkpoint(a.checkpoint.as_deref())?)?;
    let variant = ck.variant();
    let model = ck.into_model()?;
    let set = ClassifierSet::load(&a.classifiers)?;
    let data = open_corpus(&a.corpus)?;
    let cfg = EvalConfig { n_samples: a.samples, seed: a.seed, ..Default::default() };
    let report = evaluate(&model, variant, &set, &data, &cfg)?;
    let c = &report.conditioning_34;
    eprintln!(
        "mse {:.5}  lsd {:.3} dB  semitone {}  octave {}  style {}",
        report.reconstruction.mse,
        report.reconstruction.lsd,
        na(c.semitone),
        na(c.octave),
        na(c.style)
    );
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let data = open_corpus(&a.corpus)?;
    let mcnn = Mcnn::new(McnnConfig::default(), candle_core::DType::F32, a.seed)?;
    let cfg = McnnTrainConfig { epochs: a.epochs, batch_size: a.batch_size, learning_rate: a.learning_rate, seed: a.seed };
    let report = pretrain_mcnn(&mcnn, &data, &cfg)?;
    checkpoint::save(&a.out, &preprocessing(&data), None, None, Some(&mcnn), false)?;
    println!(
        "vocoder loss {:.3} -> {:.3}",
        report.initial.total(),
        report.epochs.last().map_or(report.initial.total(), |p| p.total())
    );
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let ck = checkpoint::load(resolve_checkpoint(a.checkpoint.as_deref())?)?;
    let variant = ck.variant();
    let model = ck.into_model()?;
    let mcnn = checkpoint::load(&a.vocoder)?.mcnn.context("vocoder checkpoint holds no vocoder")?;
    let data = open_corpus(&a.corpus)?;
    let cfg = FinetuneConfig { epochs: a.epochs, batch_size: a.batch_size, learning_rate: a.learning_rate, seed: a.seed };
    let report = finetune_decoder(&model, &mcnn, &data, &cfg)?;
    let out = if a.out.is_dir() { a.out.join(PIPELINE_CHECKPOINT) } else { a.out.clone() };
    checkpoint::save(&out, &preprocessing(&data), variant, Some(&model), Some(&mcnn), true)?;
    println!(
        "test spectral convergence {:.4} -> {:.4}, wrote {}",
        report.test_sc_before,
        report.test_sc_after,
        out.display()
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let pipeline = Pipeline::load(resolve_checkpoint(a.checkpoint.as_deref())?)?;
    let style_mix = match (&a.style, &a.style_mix) {
        (Some(name), _) => pipeline.style_mix(name).map_err(pipeline_error)?,
        (None, Some(mix)) => mix.clone(),
        (None, None) => bail!("give --style or --style-mix"),
    };
    let z = match &a.z {
        Some(v) => Some(<[f64; 3]>::try_from(v.as_slice()).map_err(|_| anyhow::anyhow!("--z needs 3 values"))?),
        None => None,
    };
    let req = GenerateRequest {
        z,
        seed: Some(a.seed),
        semitone: a.semitone,
        octave: a.octave,
        style_mix,
        renderer: a.renderer,
        gla_iterations: a.gla_iterations,
    };
    let g = pipeline.generate(&req, &mut ChaCha8Rng::seed_from_u64(a.seed)).map_err(pipeline_error)?;
    write_wav_pcm16(&a.out, g.wave.samples())?;
    println!("z = {:?}, wrote {}", g.z, a.out.display());
    Ok(())
}

fn pipeline_error(e: crate::pipeline::PipelineError) -> anyhow::Error {
    match e {
        crate::pipeline::PipelineError::Invalid(fields) => {
            let list: Vec<String> = fields.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            anyhow::anyhow!("invalid request: {}", list.join("; "))
        }
        other => other.into(),
    }
}

fn load_latent_map(pipeline: &Pipeline, data: &Dataset) -> Result<Vec<LatentPoint>> {
    if data.style_vocab != pipeline.preprocessing().style_vocab {
        bail!("corpus styles {:?} differ from the checkpoint's {:?}", data.style_vocab, pipeline.preprocessing().style_vocab);
    }
    Ok(export_latent_map(pipeline.model(), data)?)
}

fn latent_map(a: LatentMapArgs) -> Result<()> {
    let pipeline = Pipeline::load(resolve_checkpoint(a.checkpoint.as_deref())?)?;
    let points = load_latent_map(&pipeline, &open_corpus(&a.corpus)?)?;
    write_json(&a.out, &points)?;
    println!("wrote {} points to {}", points.len(), a.out.display());
    Ok(())
}

/// Loads everything `serve` needs without binding a socket.
pub fn build_state(cfg: &ServeConfig) -> Result<AppState> {
    let path = resolve_checkpoint(cfg.checkpoint.as_deref())?;
    let pipeline = Pipeline::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let map = match (&cfg.latent_map, &cfg.corpus) {
        (Some(json), _) => {
            let text = std::fs::read_to_string(json).with_context(|| format!("reading {}", json.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", json.display()))?
        }
        (None, Some(corpus)) => load_latent_map(&pipeline, &open_corpus(corpus)?)?,
        (None, None) => Vec::new(),
    };
    Ok(AppState::new(pipeline, map, cfg.seed))
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let state = Arc::new(build_state(&cfg)?);
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .with_context(|| format!("bad address {}:{}", cfg.host, cfg.port))?;
    tokio::runtime::Runtime::new()?.block_on(api::serve(state, addr))
}
