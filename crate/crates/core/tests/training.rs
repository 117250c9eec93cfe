use cospeech_core::checkpoint::load_checkpoint;
use cospeech_core::dataset::{generate_toy_corpus, load_corpus, Corpus, ToyRecipe};
use cospeech_core::trainer::{checkpoint_path, fit, fit_from, TrainState, FINAL_CHECKPOINT, LOG_FILE};
use cospeech_core::Config;

fn tiny() -> Config {
    let mut c = Config::default();
    c.data.n_clips = 16;
    c.data.recipe = ToyRecipe { min_frames: 40, max_frames: 60, ..ToyRecipe::default() };
    c.model.d_speech = 8;
    c.model.d_motion = 8;
    c.model.n_specific_layers = 1;
    c.model.m_shared_layers = 1;
    c.model.heads = 2;
    c.model.ff_mult = 2;
    c.model.time_embed_dim = 8;
    c.diffusion.steps = 10;
    c.training.batch_size = 3;
    c.training.clip_max_frames = 30;
    c.training.lr = 1e-3;
    c.sampling.clip_len = 30;
    c.sampling.overlap_frames = 5;
    c
}

fn corpus(c: &Config, dir: &std::path::Path) -> Corpus {
    generate_toy_corpus(&c.data.recipe, &c.features, c.data.n_clips, c.seed, dir).unwrap();
    load_corpus(dir).unwrap()
}

#[test]
fn zero_steps_leave_the_state_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    let corpus = corpus(&c, dir.path());
    c.training.steps = 0;
    let init = TrainState::new(&c);
    let out = fit_from(init.clone(), &corpus, &c, None, |_| {}).unwrap();
    assert_eq!(out.step, 0);
    assert!(out.history.is_empty());
    assert_eq!(out.params.store, init.params.store);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    let corpus = corpus(&c, &dir.path().join("data"));
    c.training.steps = 12;
    c.training.checkpoint_every = 5;
    let full_dir = dir.path().join("full");
    let full = fit(&corpus, &c, Some(&full_dir), |_| {}).unwrap();
    assert_eq!(full.history.len(), 12);
    assert!(full.history.iter().all(|r| r.loss.total.is_finite()));
    assert!(checkpoint_path(&full_dir, 5).exists() && checkpoint_path(&full_dir, 10).exists());
    assert!(!checkpoint_path(&full_dir, 12).exists());
    let log = std::fs::read_to_string(full_dir.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 12);

    let ck = load_checkpoint(&checkpoint_path(&full_dir, 5)).unwrap();
    assert_eq!(ck.step, 5);
    let resumed = fit_from(TrainState::from_checkpoint(&ck), &corpus, &c, None, |_| {}).unwrap();
    let tail: Vec<f64> = full.history[5..].iter().map(|r| r.loss.total).collect();
    let again: Vec<f64> = resumed.history.iter().map(|r| r.loss.total).collect();
    assert_eq!(tail, again);
    assert_eq!(resumed.params.store, full.params.store);

    let last = load_checkpoint(&full_dir.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(last.step, 12);
    assert_eq!(last.params.store, full.params.store);
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    let corpus = corpus(&c, dir.path());
    c.training.steps = 4;
    let a = fit(&corpus, &c, None, |_| {}).unwrap();
    let b = fit(&corpus, &c, None, |_| {}).unwrap();
    assert_eq!(a.params.store, b.params.store);
    c.seed += 1;
    let d = fit(&corpus, &c, None, |_| {}).unwrap();
    assert_ne!(a.params.store, d.params.store);
}
