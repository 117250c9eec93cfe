use std::path::{Path, PathBuf};

use cospeech_cli::{run, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RESOLVED_CONFIG, RUN_MANIFEST};
use cospeech_core::dataset::ToyRecipe;
use cospeech_core::features::Waveform;
use cospeech_core::metrics::MetricsReport;
use cospeech_core::sampler::SampleSidecar;
use cospeech_core::Config;

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.data.n_clips = 12;
    c.data.recipe = ToyRecipe { min_frames: 40, max_frames: 60, ..ToyRecipe::default() };
    c.model.d_speech = 8;
    c.model.d_motion = 8;
    c.model.n_specific_layers = 1;
    c.model.m_shared_layers = 1;
    c.model.heads = 2;
    c.model.ff_mult = 2;
    c.model.time_embed_dim = 8;
    c.diffusion.steps = 5;
    c.training.steps = 4;
    c.training.batch_size = 4;
    c.training.clip_max_frames = 30;
    c.training.lr = 1e-3;
    c.sampling.clip_len = 30;
    c.sampling.overlap_frames = 5;
    c.metrics.latent_dim = 2;
    c.metrics.hidden_dim = 8;
    c.metrics.ae_steps = 20;
    c.metrics.ae_batch = 32;
    c.metrics.eval_window_frames = 20;
    c.metrics.eval_max_windows = 8;
    c
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["cospeech".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(&argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, tiny_config().to_toml_string()).unwrap();
    let data = root.join("data");
    assert_eq!(cli(&["gen-data", "--config", s(&config), "--seed", "3", "--out", s(&data)]), EXIT_OK);
    let train = root.join("train");
    assert_eq!(cli(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&train)]), EXIT_OK);
    Fixture { _dir: dir, model: train.join("model.ckpt"), root, config, data }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(cli(&["gen-data", "--bogus", "--out", "/tmp/x"]), EXIT_USAGE);
    assert_eq!(cli(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(cli(&["gen-data", "--out", "/tmp/x", "--set", "training.nope=1"]), EXIT_USAGE);
    assert_eq!(cli(&["gen-data", "--out", "/tmp/x", "--set", "sampling.overlap_frames=400"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]), EXIT_DATA);
}

#[test]
fn full_workflow() {
    let f = fixture();
    // Manifests and resolved config are written by every command.
    for sub in ["data", "train"] {
        assert!(f.root.join(sub).join(RUN_MANIFEST).exists());
        assert!(f.root.join(sub).join(RESOLVED_CONFIG).exists());
    }
    let log = std::fs::read_to_string(f.root.join("train/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // One clip's worth of speech gives a single un-blended clip.
    let clip = f.data.join("clips/clip_00000.bin");
    let one = f.root.join("one");
    let code = cli(&[
        "sample",
        "--checkpoint",
        s(&f.model),
        "--features",
        s(&clip),
        "--duration-seconds",
        "1",
        "--identity",
        "1",
        "--emotion",
        "2",
        "--out",
        s(&one),
    ]);
    assert_eq!(code, EXIT_OK);
    let side: SampleSidecar = serde_json::from_slice(&std::fs::read(one.join("sample.json")).unwrap()).unwrap();
    assert_eq!((side.frames, side.clips), (30, 1));
    assert_eq!(side.style.emotion_id, 2);

    // Longer requests are blended and exact in length: round(1.55 s x 30) = 47.
    let long = f.root.join("long");
    let code = cli(&[
        "sample",
        "--checkpoint",
        s(&f.model),
        "--features",
        s(&clip),
        "--duration-seconds",
        "1.55",
        "--overlap-frames",
        "4",
        "--omega",
        "1",
        "--out",
        s(&long),
    ]);
    assert_eq!(code, EXIT_OK);
    let side: SampleSidecar = serde_json::from_slice(&std::fs::read(long.join("sample.json")).unwrap()).unwrap();
    assert_eq!((side.frames, side.clips, side.overlap_frames), (47, 2, 4));
    assert_eq!(side.denoiser_evaluations.unconditional, 0);

    // Rerunning from the written config reproduces the output bytes.
    let again = f.root.join("again");
    let code = cli(&[
        "sample",
        "--checkpoint",
        s(&f.model),
        "--features",
        s(&clip),
        "--duration-seconds",
        "1.55",
        "--config",
        s(&long.join(RESOLVED_CONFIG)),
        "--out",
        s(&again),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read(long.join("sample.clip")).unwrap(), std::fs::read(again.join("sample.clip")).unwrap());

    // Raw audio input.
    let wav = f.root.join("speech.wav");
    let samples = (0..16000).map(|i| (0.3 * (i as f32 * 0.05).sin()) as f32).collect();
    Waveform::new(samples, 16000).unwrap().write_wav(&wav).unwrap();
    let from_wav = f.root.join("wav");
    assert_eq!(cli(&["sample", "--checkpoint", s(&f.model), "--audio", s(&wav), "--out", s(&from_wav)]), EXIT_OK);
    let side: SampleSidecar = serde_json::from_slice(&std::fs::read(from_wav.join("sample.json")).unwrap()).unwrap();
    assert_eq!(side.frames, 30);
    assert_eq!(cli(&["sample", "--checkpoint", s(&f.model), "--out", s(&from_wav)]), EXIT_USAGE);

    // Cartesian style edits.
    let edits = f.root.join("edits");
    let code = cli(&[
        "style-edit",
        "--checkpoint",
        s(&f.model),
        "--features",
        s(&clip),
        "--identity",
        "0,3",
        "--emotion",
        "1,2",
        "--out",
        s(&edits),
    ]);
    assert_eq!(code, EXIT_OK);
    let clips = std::fs::read_dir(&edits).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "clip")).count();
    assert_eq!(clips, 4);
    assert!(edits.join("id3_emo1.clip").exists());

    // Evaluation with generation, then reference against itself.
    let eval = f.root.join("eval");
    let code = cli(&["evaluate", "--config", s(&f.config), "--data", s(&f.data), "--checkpoint", s(&f.model), "--out", s(&eval)]);
    assert_eq!(code, EXIT_OK);
    let report: MetricsReport = serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert!(report.fgd.is_finite() && report.n_generated >= 3);
    let same = f.root.join("same");
    let reference = eval.join("reference");
    let code = cli(&[
        "evaluate",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--generated",
        s(&reference),
        "--reference",
        s(&reference),
        "--out",
        s(&same),
    ]);
    assert_eq!(code, EXIT_OK);
    let report: MetricsReport = serde_json::from_slice(&std::fs::read(same.join("report.json")).unwrap()).unwrap();
    assert!(report.fgd < 1e-6);
    assert_eq!(report.srgr, 1.0);

    // Latent export covers every corpus clip plus generated files.
    let lat = f.root.join("latents");
    assert_eq!(
        cli(&["export-latents", "--config", s(&f.config), "--data", s(&f.data), "--generated", s(&edits), "--out", s(&lat)]),
        EXIT_OK
    );
    let csv = std::fs::read_to_string(lat.join("latents.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12 + 4);
    assert!(csv.starts_with("clip_id,split,identity_id,emotion_id,z0,z1\n"));

    // Resuming continues the step count.
    let more = f.root.join("more");
    let code = cli(&["train", "--data", s(&f.data), "--resume", s(&f.model), "--set", "training.steps=6", "--out", s(&more)]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read_to_string(more.join("train_log.jsonl")).unwrap().lines().count(), 2);

    // A corrupted clip is a data error.
    let bad = f.data.join("clips/clip_00001.bin");
    let mut bytes = std::fs::read(&bad).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(cli(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&more)]), EXIT_DATA);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, tiny_config().to_toml_string()).unwrap();
    let data = dir.path().join("data");
    assert_eq!(cli(&["gen-data", "--config", s(&config), "--out", s(&data)]), EXIT_OK);
    let code = cli(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--set",
        "training.lr=1e38",
        "--set",
        "training.steps=40",
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code, EXIT_NUMERIC);
}
