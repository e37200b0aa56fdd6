//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The ablation and vocoder checks train on the full synthetic corpus and
//! take several minutes each.

use std::io::Write;
use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor, Var};
use fadersynth::corpus::{render_note, synth_corpus, Split, SynthSpec, STYLE_PALETTE};
use fadersynth::model::{Conditioning, ModelConfig, NoteCondition, WaeModel, DECODER, DISCRIMINATOR, ENCODER, FILM};
use fadersynth::objectives::{bce, mmd_rbf, Variant};
use fadersynth::spectral::{
    griffin_lim_traced, log_scale, lsd, rmse, spectral_convergence, stft_magnitude, stft_magnitude_of, unscale,
    MelSpectrogram, NormalizedSpectrogram,
};
use fadersynth::training::data::Dataset;
use fadersynth::training::{
    build_model, evaluate, train, train_reference_classifier, Attribute, Batch, ClassifierConfig, ClassifierSet,
    EvalConfig, TrainConfig, TrainState,
};
use fadersynth::vocoder::{finetune_decoder, pretrain_mcnn, FinetuneConfig, Mcnn, McnnConfig, McnnTrainConfig};
use fadersynth::{NOTE_LENGTH, N_FRAMES, N_MELS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Collects the sub-checks of one criterion and reports them on one line.
struct Criterion {
    name: &'static str,
    checks: Vec<(String, bool)>,
}

impl Criterion {
    fn new(name: &'static str) -> Self {
        Self { name, checks: Vec::new() }
    }

    fn check(&mut self, pass: bool, detail: impl Into<String>) {
        self.checks.push((detail.into(), pass));
    }

    /// Prints straight to stderr so the line shows even when output is captured.
    fn finish(self) {
        let pass = self.checks.iter().all(|(_, p)| *p);
        let detail: Vec<String> =
            self.checks.iter().map(|(d, p)| if *p { d.clone() } else { format!("{d} [FAILED]") }).collect();
        let line = format!("[acceptance] {} {}: {}\n", if pass { "PASS" } else { "FAIL" }, self.name, detail.join("; "));
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        assert!(pass, "{}", line.trim_end());
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn corpus() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let c = synth_corpus(&SynthSpec::default(), 0).unwrap();
        Dataset::from_waveforms(&c.index, &c.audio).unwrap()
    })
}

fn brute_force_mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigma2: f64) -> f64 {
    let k = |x: &[f64], y: &[f64]| (-x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * sigma2)).exp();
    let mean = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in u {
            for y in v {
                s += k(x, y);
            }
        }
        s / (u.len() * v.len()) as f64
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

#[test]
fn exact_math_oracles() {
    let mut c = Criterion::new("exact-math oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut worst: f64 = 0.0;
    let mut self_zero = true;
    for _ in 0..20 {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..5).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
        };
        let (a, b) = (pts(&mut rng), pts(&mut rng));
        let sigma2 = rng.gen_range(0.3..3.0);
        let ta = Tensor::new(a.clone(), &Device::Cpu).unwrap();
        let tb = Tensor::new(b.clone(), &Device::Cpu).unwrap();
        let got = scalar(&mmd_rbf(&ta, &tb, sigma2).unwrap());
        let want = brute_force_mmd(&a, &b, sigma2);
        worst = worst.max((got - want).abs() / want.abs());
        self_zero &= scalar(&mmd_rbf(&ta, &ta, sigma2).unwrap()) == 0.0;
    }
    c.check(worst < 1e-10, format!("mmd vs double loop rel err {worst:.2e} < 1e-10"));
    c.check(self_zero, "mmd(A, A) == 0 exactly");

    let half = Tensor::full(0.5f64, (2, 3), &Device::Cpu).unwrap();
    let b = scalar(&bce(&half, &half).unwrap());
    c.check((b - std::f64::consts::LN_2).abs() < 1e-9, format!("bce(0.5, 0.5) = {b:.12}"));

    let s = Array2::from_shape_fn((20, 7), |_| rng.gen_range(0.0..5.0));
    let sc = spectral_convergence(s.view(), Array2::zeros((20, 7)).view()).unwrap();
    c.check((sc - 1.0).abs() < 1e-12, format!("sc(S, 0) = {sc}"));

    let t = s.mapv(|v| v + 0.1);
    let (l0, r0) = (lsd(s.view(), s.view()).unwrap(), rmse(s.view(), s.view()).unwrap());
    let mut differs = true;
    for (i, j) in [(0, 0), (19, 6), (7, 3)] {
        let mut u = t.clone();
        u[[i, j]] += 0.5;
        differs &= lsd(t.view(), u.view()).unwrap() > 0.0 && rmse(t.view(), u.view()).unwrap() > 0.0;
    }
    c.check(l0 == 0.0 && r0 == 0.0 && differs, "lsd and rmse are zero iff equal");

    let values = Array2::from_shape_fn((N_MELS, N_FRAMES), |_| rng.gen_range(0.0..=1.0));
    let n = NormalizedSpectrogram::new(values).unwrap();
    let back = log_scale(&unscale(&n, 344.0).unwrap(), 344.0).unwrap();
    let err_n = (back.values() - n.values()).mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b));
    let m = MelSpectrogram::new(Array2::from_shape_fn((N_MELS, N_FRAMES), |_| 344.0 * 10f64.powf(rng.gen_range(-3.0..0.0))))
        .unwrap();
    let m2 = unscale(&log_scale(&m, 344.0).unwrap(), 344.0).unwrap();
    let err_m = ((m2.magnitude() - m.magnitude()) / m.magnitude()).mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b));
    c.check(err_n < 1e-9 && err_m < 1e-9, format!("scale round trip {:.1e} / {:.1e} < 1e-9", err_n, err_m));
    c.finish();
}

#[test]
fn architecture_arithmetic() {
    let mut c = Criterion::new("architecture arithmetic");
    let m = WaeModel::init_model(4, 0).unwrap();
    let x = Tensor::rand(0f32, 1.0, (2, N_MELS, 128), &Device::Cpu).unwrap();
    let (z, trace) = m.encode_trace(&x).unwrap();
    let last = *trace.last().unwrap();
    c.check(last == (16, 4), format!("encoder trace ends at {}x{}", last.0, last.1));
    let flat = m.config().flatten_dim();
    c.check(flat == 8192, format!("flatten {flat}"));

    let widths: Vec<usize> = [2, 4, 8]
        .iter()
        .map(|&n| {
            let mm = WaeModel::init_model(n, 1).unwrap();
            let cond = mm.condition_tensor(&[NoteCondition::one_hot(0, 3, 0, n).unwrap()]).unwrap();
            mm.film_generate(&cond, false).unwrap().dim(1).unwrap()
        })
        .collect();
    c.check(widths.iter().all(|w| *w == 3688), format!("FiLM width {widths:?} for 2/4/8 styles"));

    let cond = m.condition_tensor(&[NoteCondition::one_hot(9, 4, 1, 4).unwrap(), NoteCondition::one_hot(0, 3, 3, 4).unwrap()]);
    let y = m.decode(&z, &cond.unwrap(), false).unwrap();
    let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
    let inside = v.iter().all(|p| *p > 0.0 && *p < 1.0);
    c.check(y.dims() == [2, N_MELS, 128] && inside, format!("decoder output {:?} in (0, 1)", y.dims()));

    let frames = stft_magnitude_of(&vec![0.0; NOTE_LENGTH]).unwrap().frames();
    c.check(frames == 128, format!("STFT of {NOTE_LENGTH} samples has {frames} frames"));
    c.finish();
}

/// Worst relative error between analytic and central-difference gradients
/// over a sample of entries of every variable.
fn gradient_error(vars: &[Var], loss: impl Fn() -> Tensor, per_var: usize) -> f64 {
    let grads = loss().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for var in vars {
        let Some(g) = grads.get(var) else { continue };
        let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let base = var.as_tensor().copy().unwrap();
        let flat: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        for _ in 0..per_var.min(flat.len()) {
            let i = rng.gen_range(0..flat.len());
            let eval = |d: f64| {
                let mut v = flat.clone();
                v[i] += d;
                var.set(&Tensor::from_vec(v, base.shape(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss())
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&base).unwrap();
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-7 {
                worst = worst.max((fd - g[i]).abs() / scale);
            }
        }
    }
    worst
}

#[test]
fn gradient_checks() {
    let mut c = Criterion::new("gradient checks");
    let m = WaeModel::new(ModelConfig::tiny(), 3, Conditioning::ALL, DType::F64, 11).unwrap();
    let x = Tensor::rand(0f64, 1.0, (4, 8, 8), &Device::Cpu).unwrap();
    let conds: Vec<_> = (0..4).map(|i| NoteCondition::one_hot(i as u8 * 2, 3 + (i % 2) as u8, i % 3, 3).unwrap()).collect();
    let cond = m.condition_tensor(&conds).unwrap();
    let recon = || bce(&x, &m.decode(&m.encode(&x, true).unwrap(), &cond, true).unwrap()).unwrap();
    let e = gradient_error(&m.trainable(&[ENCODER, DECODER, FILM]), recon, 4);
    c.check(e < 1e-4, format!("bce(decode(encode)) rel err {e:.2e} < 1e-4"));

    let prior = Tensor::randn(0f64, 1.0, (4, 3), &Device::Cpu).unwrap();
    let mmd = || mmd_rbf(&m.encode(&x, true).unwrap(), &prior, 1.3).unwrap();
    let e = gradient_error(&m.trainable(&[ENCODER]), mmd, 6);
    c.check(e < 1e-4, format!("mmd term rel err {e:.2e} < 1e-4"));
    c.finish();
}

fn small_corpus() -> Dataset {
    let spec = SynthSpec { n_styles: 2, notes_per_style: 20, octave_range: (4, 4) };
    let c = synth_corpus(&spec, 9).unwrap();
    Dataset::from_waveforms(&c.index, &c.audio).unwrap()
}

#[test]
fn freeze_and_alternation_contracts() {
    let mut c = Criterion::new("freeze/alternation");
    let data = small_corpus();
    let cfg = TrainConfig { batch_size: 8, ..TrainConfig::desk(Variant::WaeFader) };
    let m = build_model(&cfg, 2).unwrap();
    let mut state = TrainState::new(&m, &cfg).unwrap();
    let items = data.split(Split::Train);
    let hashes = |parts: &[&str]| parts.iter().map(|p| m.hash(p).unwrap()).collect::<Vec<_>>();
    let ae = [ENCODER, DECODER, FILM];
    let (mut disc_ok, mut ae_ok) = (true, true);
    for step in 0..3 {
        let batch = Batch::new(&m, &items[step * 8..step * 8 + 8]).unwrap();
        let z = m.encode(&batch.x, true).unwrap();
        let (ae0, d0) = (hashes(&ae), m.hash(DISCRIMINATOR).unwrap());
        state.discriminator_step(&m, &z, &batch.styles).unwrap();
        let d1 = m.hash(DISCRIMINATOR).unwrap();
        disc_ok &= hashes(&ae) == ae0 && d1 != d0;
        state.autoencoder_step(&m, &batch, &z, 40.0, 4.0, true).unwrap();
        ae_ok &= m.hash(DISCRIMINATOR).unwrap() == d1 && hashes(&ae).iter().zip(&ae0).all(|(a, b)| a != b);
    }
    c.check(disc_ok, "discriminator steps leave encoder/decoder/FiLM unchanged");
    c.check(ae_ok, "auto-encoder steps leave the discriminator unchanged");

    let style = build_model(&TrainConfig::desk(Variant::WaeStyle), 2).unwrap();
    let small_mcnn = McnnConfig { heads: 2, channels: vec![8, 8, 4, 4, 1], kernels: vec![3, 3, 3, 3, 3] };
    let mcnn = Mcnn::new(small_mcnn, DType::F32, 0).unwrap();
    let enc = style.hash(ENCODER).unwrap();
    let dec = style.hash(DECODER).unwrap();
    let r = finetune_decoder(&style, &mcnn, &data, &FinetuneConfig { epochs: 1, ..Default::default() }).unwrap();
    let frozen = r.encoder_hash_before == enc && r.encoder_hash_after == enc && style.hash(ENCODER).unwrap() == enc;
    c.check(frozen && style.hash(DECODER).unwrap() != dec, "fine-tuning leaves the encoder unchanged");
    c.finish();
}

#[test]
fn desk_scale_ablation() {
    let mut c = Criterion::new("desk-scale ablation");
    let data = corpus();
    let ccfg = ClassifierConfig::desk();
    let mut classifiers = Vec::new();
    let mut f1 = Vec::new();
    for a in Attribute::ALL {
        let (clf, report) = train_reference_classifier(data, a, &ccfg).unwrap();
        f1.push((a, report.f1_test.unwrap()));
        classifiers.push(clf);
    }
    let set = ClassifierSet { model: ccfg.model.clone(), style_vocab: data.style_vocab.clone(), classifiers };
    let f1_text: Vec<String> = f1.iter().map(|(a, f)| format!("{a} {f:.3}")).collect();
    c.check(f1.iter().all(|(_, f)| *f >= 0.95), format!("(a) classifier test F1 {} >= 0.95", f1_text.join(", ")));

    let ecfg = EvalConfig::default();
    let mut reports = std::collections::HashMap::new();
    for v in Variant::ALL {
        let cfg = TrainConfig::desk(v);
        let m = build_model(&cfg, data.n_style()).unwrap();
        train(&m, data, &cfg, None).unwrap();
        reports.insert(v, evaluate(&m, Some(v), &set, data, &ecfg).unwrap());
    }
    let style_acc = |v| reports[&v].conditioning_34.style.unwrap();
    let (fader, style) = (style_acc(Variant::WaeFader), style_acc(Variant::WaeStyle));
    c.check(
        fader - style >= 0.2 && fader >= 0.8,
        format!("(b) style accuracy wae_fader {fader:.3} vs wae_style {style:.3}: gap >= 0.2 and >= 0.8"),
    );
    let post = |v: Variant| reports[&v].latent.post_accuracy.style;
    let (pf, pn) = (post(Variant::WaeFader), post(Variant::WaeNote));
    c.check(pf < pn, format!("(c) latent style post-accuracy wae_fader {pf:.3} < wae_note {pn:.3}"));
    let mse = |v: Variant| reports[&v].reconstruction.mse;
    let (mn, mm) = (mse(Variant::WaeNote), mse(Variant::WaeMmd));
    c.check(mn <= mm, format!("(d) test MSE wae_note {mn:.4} <= wae_mmd {mm:.4}"));
    c.finish();
}

#[test]
fn griffin_lim_property() {
    let mut c = Criterion::new("GLA property");
    let mut worst_rise: f64 = 0.0;
    let mut improved = true;
    let mut finals = Vec::new();
    for (k, style) in STYLE_PALETTE.iter().take(4).enumerate() {
        let note = render_note(style, (k * 3) as u8, 3 + (k % 2) as u8, 0, 2).unwrap();
        let (_, trace) = griffin_lim_traced(&stft_magnitude(&note).unwrap(), 100).unwrap();
        for w in trace.windows(2) {
            worst_rise = worst_rise.max(w[1] - w[0]);
        }
        improved &= trace[100] < trace[0];
        finals.push(format!("{:.3}->{:.3}", trace[0], trace[100]));
    }
    c.check(worst_rise <= 1e-9, format!("largest SC rise between iterations {worst_rise:.1e} <= 1e-9"));
    c.check(improved, format!("100 iterations beat 0 ({})", finals.join(", ")));
    c.finish();
}

#[test]
fn vocoder() {
    let mut c = Criterion::new("vocoder");
    let mcnn = Mcnn::new(McnnConfig::default(), DType::F32, 0).unwrap();
    let lengths: Vec<(usize, usize)> = [32, 64, 128]
        .iter()
        .map(|&f| {
            let x = Tensor::rand(0f32, 1.0, (1, N_MELS, f), &Device::Cpu).unwrap();
            (f, mcnn.forward(&x).unwrap().dim(1).unwrap())
        })
        .collect();
    c.check(lengths.iter().all(|(f, n)| *n == 270 * f), format!("output lengths {lengths:?} = 270 x frames"));

    let data = corpus();
    let cfg = McnnTrainConfig::default();
    let report = pretrain_mcnn(&mcnn, data, &cfg).unwrap();
    let quarter = (cfg.epochs / 4).max(1);
    let initial = report.initial.total();
    let early = report.epochs[..quarter].iter().map(|p| p.total()).fold(f64::INFINITY, f64::min);
    let last = report.epochs.last().unwrap().total();
    c.check(
        early <= 0.5 * initial,
        format!("pretrain loss {initial:.3} -> {early:.3} after {quarter}/{} epochs (final {last:.3}), needs <= half", cfg.epochs),
    );

    let ae_cfg = TrainConfig { epochs: 10, ..TrainConfig::desk(Variant::WaeStyle) };
    let model = build_model(&ae_cfg, data.n_style()).unwrap();
    train(&model, data, &ae_cfg, None).unwrap();
    let ft = finetune_decoder(&model, &mcnn, data, &FinetuneConfig { epochs: 1, ..Default::default() }).unwrap();
    c.check(
        ft.test_sc_after <= ft.test_sc_before,
        format!("fine-tuned test SC {:.4} <= {:.4}", ft.test_sc_after, ft.test_sc_before),
    );
    c.finish();
}
