use std::path::Path;
use std::process::{Command, Output};

use fadersynth::checkpoint::{self, Preprocessing};
use fadersynth::corpus::load_note;
use fadersynth::objectives::Variant;
use fadersynth::training::{build_model, LatentPoint, TrainConfig};
use fadersynth::NOTE_LENGTH;
use fadersynth_service::cli::{resolve_checkpoint, RunConfig, ServeArgs, ServeConfig, TrainArgs};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fadersynth"));
    c.env_remove("FADERSYNTH_CHECKPOINT_DIR").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn untrained(dir: &Path, variant: Variant) -> std::path::PathBuf {
    let model = build_model(&TrainConfig::desk(variant), 2).unwrap();
    let pre = Preprocessing { style_vocab: vec!["plucked".into(), "sustained".into()], ref_max: 300.0, octaves: vec![4] };
    let path = dir.join("best.safetensors");
    checkpoint::save(&path, &pre, Some(variant), Some(&model), None, false).unwrap();
    path
}

#[test]
fn unknown_command_prints_usage_and_exits_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn generate_writes_a_playable_wav() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained(dir.path(), Variant::WaeFader);
    let wav = dir.path().join("a.wav");
    let args = ["generate", "--checkpoint", ck.to_str().unwrap(), "--semitone", "9", "--octave", "4"];
    let base: Vec<&str> = args.iter().copied().chain(["--gla-iterations", "3", "--out", wav.to_str().unwrap()]).collect();
    ok(&[base.as_slice(), &["--style", "plucked"]].concat());
    assert_eq!(load_note(&wav).unwrap().samples().len(), NOTE_LENGTH);
    let first = std::fs::read(&wav).unwrap();

    // same seed, same note; explicit negative coordinates parse
    ok(&[base.as_slice(), &["--style", "plucked"]].concat());
    assert_eq!(std::fs::read(&wav).unwrap(), first);
    ok(&[base.as_slice(), &["--style-mix", "0.5,0.5", "--z", "-1,0.5,2"]].concat());
    assert_ne!(std::fs::read(&wav).unwrap(), first);

    let bad = run(&[base.as_slice(), &["--style", "ordinario"]].concat());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown style"));
    let bad = run(&[base.as_slice(), &["--style", "plucked", "--renderer", "mcnn"]].concat());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn checkpoint_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let best = untrained(dir.path(), Variant::WaeNote);
    assert_eq!(resolve_checkpoint(Some(dir.path())).unwrap(), best);
    std::fs::copy(&best, dir.path().join("pipeline.safetensors")).unwrap();
    assert_eq!(resolve_checkpoint(Some(dir.path())).unwrap(), dir.path().join("pipeline.safetensors"));
    assert!(resolve_checkpoint(Some(tempfile::tempdir().unwrap().path())).is_err());

    let wav = dir.path().join("b.wav");
    let out = bin()
        .env("FADERSYNTH_CHECKPOINT_DIR", dir.path())
        .args(["generate", "--semitone", "0", "--octave", "4", "--style", "sustained", "--gla-iterations", "2"])
        .args(["--out", wav.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(wav.is_file());
    let missing = run(&["generate", "--semitone", "0", "--octave", "4", "--style", "x", "--out", "x.wav"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("FADERSYNTH_CHECKPOINT_DIR"));
}

#[test]
fn config_files_merge_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let run_cfg = dir.path().join("run.toml");
    std::fs::write(&run_cfg, "variant = \"wae_style\"\nepochs = 7\nbatch_size = 5\nseed = 3\n").unwrap();
    let file = RunConfig::load(&run_cfg).unwrap();
    let args = TrainArgs {
        corpus: "c".into(),
        out: "o".into(),
        config: Some(run_cfg.clone()),
        variant: None,
        epochs: Some(2),
        batch_size: None,
        learning_rate: None,
        seed: None,
    };
    let cfg = file.resolve(&args).unwrap();
    assert_eq!((cfg.variant, cfg.epochs, cfg.batch_size, cfg.seed), (Variant::WaeStyle, 2, 5, 3));
    std::fs::write(&run_cfg, "varient = \"wae_style\"\n").unwrap();
    assert!(RunConfig::load(&run_cfg).is_err());

    let serve_cfg = dir.path().join("serve.toml");
    std::fs::write(&serve_cfg, "port = 9000\ncheckpoint = \"/models/a\"\nseed = 4\n").unwrap();
    let args = ServeArgs {
        config: Some(serve_cfg),
        checkpoint: None,
        host: None,
        port: Some(9100),
        latent_map: None,
        corpus: None,
        seed: None,
    };
    let cfg = args.resolve().unwrap();
    assert_eq!(
        cfg,
        ServeConfig { checkpoint: Some("/models/a".into()), port: 9100, seed: 4, ..ServeConfig::default() }
    );
}

#[test]
fn every_stage_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let seed = ["--seed", "1"];
    ok(&[&["synth-corpus", "--out", &d("corpus"), "--styles", "2", "--notes-per-style", "20", "--octaves", "3-4"][..], &seed].concat());
    assert!(dir.path().join("corpus/index.json").is_file());

    ok(&[&["train", "--corpus", &d("corpus"), "--out", &d("mmd"), "--variant", "wae_mmd", "--epochs", "2"][..], &seed].concat());
    assert!(dir.path().join("mmd/best.safetensors").is_file());
    assert!(dir.path().join("mmd/metrics.csv").is_file());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mmd/report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);

    ok(&[&["train-classifiers", "--corpus", &d("corpus"), "--out", &d("clf.safetensors"), "--epochs", "1"][..], &seed].concat());
    let stdout = ok(&[
        &["eval", "--checkpoint", &d("mmd"), "--classifiers", &d("clf.safetensors"), "--corpus", &d("corpus")][..],
        &["--samples", "8", "--out", &d("eval.json")],
        &seed,
    ]
    .concat());
    let eval: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(eval["variant"], "wae_mmd");
    for key in ["semitone", "octave", "style"] {
        assert!(eval["conditioning_34"][key].is_null(), "{key} should be NA");
    }
    for key in ["mse", "rmse", "lsd"] {
        assert!(eval["reconstruction"][key].is_f64());
    }
    assert!(eval["latent"]["post_accuracy"]["style"].is_f64());
    assert!(dir.path().join("eval.json").is_file());

    ok(&[&["latent-map", "--checkpoint", &d("mmd"), "--corpus", &d("corpus"), "--out", &d("map.json")][..], &seed].concat());
    let map: Vec<LatentPoint> = serde_json::from_str(&std::fs::read_to_string(d("map.json")).unwrap()).unwrap();
    assert_eq!(map.len(), 40);

    ok(&[
        &["pretrain-vocoder", "--corpus", &d("corpus"), "--out", &d("voc.safetensors"), "--epochs", "1"][..],
        &["--batch-size", "8"],
        &seed,
    ]
    .concat());
    ok(&[
        &["finetune", "--checkpoint", &d("mmd"), "--vocoder", &d("voc.safetensors"), "--corpus", &d("corpus")][..],
        &["--out", &d("mmd"), "--epochs", "1", "--batch-size", "8"],
        &seed,
    ]
    .concat());
    assert!(dir.path().join("mmd/pipeline.safetensors").is_file());
    ok(&[
        &["generate", "--checkpoint", &d("mmd"), "--semitone", "3", "--octave", "3", "--style", "plucked"][..],
        &["--renderer", "mcnn", "--out", &d("m.wav")],
        &seed,
    ]
    .concat());
    let bytes = std::fs::File::open(d("m.wav")).unwrap();
    let (samples, rate) = fadersynth::corpus::decode_wav(std::io::BufReader::new(bytes), Path::new("m.wav")).unwrap();
    assert_eq!((samples.len(), rate), (NOTE_LENGTH, fadersynth::SAMPLE_RATE));
}

#[test]
fn serve_state_loads_checkpoint_and_map() {
    let dir = tempfile::tempdir().unwrap();
    untrained(dir.path(), Variant::WaeFader);
    let map = vec![LatentPoint {
        z: [0.1, 0.2, 0.3],
        semitone: 0,
        octave: 4,
        style: "plucked".into(),
        split: fadersynth::corpus::Split::Train,
    }];
    let json = dir.path().join("map.json");
    std::fs::write(&json, serde_json::to_string(&map).unwrap()).unwrap();
    let cfg = ServeConfig { checkpoint: Some(dir.path().to_path_buf()), latent_map: Some(json), ..ServeConfig::default() };
    let state = fadersynth_service::cli::build_state(&cfg).unwrap();
    assert_eq!(state.pipeline().info().styles, ["plucked", "sustained"]);

    let bad = ServeConfig { checkpoint: Some(dir.path().join("nope.safetensors")), ..ServeConfig::default() };
    assert!(fadersynth_service::cli::build_state(&bad).is_err());
}
