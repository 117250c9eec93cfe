//! End-to-end helpers shared by the command line and the acceptance suite:
//! evaluation windows, batched generation over many windows, noise
//! baselines and the metrics autoencoder.

use cospeech_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, FeatureConfig};
use crate::dataset::{fixed_windows, Corpus, Split};
use crate::diffusion::{gaussian, make_schedule, NoiseSchedule};
use crate::error::Result;
use crate::features::{onset_peaks, AudioFeatureSpec, Descriptor};
use crate::metrics::{AutoencoderSpec, MotionAutoencoder};
use crate::sampler::{sample_batch, Denoiser, EvalCounter, Guidance};
use crate::types::{ClipRecord, MotionSequence, SpeechFeatureSequence, StyleLabel};
use crate::util::mix_seed;

const AE_STREAM: u64 = 0x6165;

pub fn schedule(config: &Config) -> Result<NoiseSchedule> {
    let d = &config.diffusion;
    make_schedule(d.steps, d.schedule, d.beta_start, d.beta_end)
}

/// Up to `max` windows of `len` frames from `split`, spread evenly over all
/// available windows in manifest order.
pub fn eval_windows(corpus: &Corpus, split: Split, len: usize, max: usize) -> Vec<ClipRecord> {
    let all = fixed_windows(&corpus.split_clips(split), len);
    if all.len() <= max {
        return all;
    }
    (0..max).map(|k| all[k * all.len() / max].clone()).collect()
}

/// Generates one motion per window with the given styles, `chunk` windows
/// per batched denoising loop.
pub fn generate_windows(
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    windows: &[ClipRecord],
    styles: &[StyleLabel],
    guidance: Guidance,
    seed: u64,
    chunk: usize,
) -> Result<(Vec<MotionSequence>, EvalCounter)> {
    let mut out = Vec::with_capacity(windows.len());
    let mut total = EvalCounter::default();
    for (k, (w, s)) in windows.chunks(chunk.max(1)).zip(styles.chunks(chunk.max(1))).enumerate() {
        let speech: Vec<Tensor<f32>> = w.iter().map(|c| c.speech.assembled().clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
        let (clips, c) = sample_batch(den, sched, &speech, s, guidance, &mut rng)?;
        total.conditional += c.conditional;
        total.unconditional += c.unconditional;
        total.batched_calls += c.batched_calls;
        for (frames, src) in clips.into_iter().zip(w) {
            out.push(MotionSequence::new(frames, src.motion.joints(), src.motion.fps())?);
        }
    }
    Ok((out, total))
}

/// Standard normal motion with the shapes of `like`.
pub fn noise_motion(like: &[ClipRecord], seed: u64) -> Result<Vec<MotionSequence>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    like.iter()
        .map(|c| MotionSequence::new(gaussian(c.motion.len(), c.motion.channels(), &mut rng), c.motion.joints(), c.motion.fps()))
        .collect()
}

/// Metrics autoencoder trained on the train split, seeded from the config.
pub fn train_metric_autoencoder(corpus: &Corpus, config: &Config) -> Result<MotionAutoencoder> {
    let train: Vec<&MotionSequence> = corpus.split_clips(Split::Train).into_iter().map(|c| &c.motion).collect();
    MotionAutoencoder::train(&train, &AutoencoderSpec::from_config(&config.metrics), mix_seed(config.seed, AE_STREAM))
}

/// Audio beats of a window cut from a corpus clip (id `"<clip>@<start>"`),
/// relative to the window start.
pub fn window_beats(corpus: &Corpus, window: &ClipRecord) -> Vec<f64> {
    let (id, start) = match window.clip_id.rsplit_once('@') {
        Some((id, s)) => (id, s.parse::<usize>().unwrap_or(0)),
        None => (window.clip_id.as_str(), 0),
    };
    let fps = corpus.manifest.fps;
    let (t0, t1) = (start as f64 / fps, (start + window.motion.len()) as f64 / fps);
    corpus
        .manifest
        .clips
        .iter()
        .find(|c| c.clip_id == id)
        .map(|c| c.audio_beats.iter().filter(|&&b| b >= t0 && b < t1).map(|b| b - t0).collect())
        .unwrap_or_default()
}

/// Beats from the onset column of frame-rate speech features.
pub fn speech_beats(speech: &SpeechFeatureSequence, features: &FeatureConfig) -> Vec<f64> {
    match AudioFeatureSpec::from_config(features).column_of(Descriptor::OnsetStrength) {
        Some(c) if c < speech.d_audio() => {
            let onset: Vec<f32> = (0..speech.len()).map(|r| speech.audio().get(r, c)).collect();
            onset_peaks(&onset, features.fps, 0.1)
        }
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_corpus, load_corpus, ToyRecipe};

    #[test]
    fn windows_and_their_beats() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Config::default();
        c.data.recipe = ToyRecipe { min_frames: 60, max_frames: 90, ..ToyRecipe::default() };
        generate_toy_corpus(&c.data.recipe, &c.features, 10, 1, dir.path()).unwrap();
        let corpus = load_corpus(dir.path()).unwrap();
        let all = eval_windows(&corpus, Split::Train, 30, 1000);
        let few = eval_windows(&corpus, Split::Train, 30, 3);
        assert_eq!(few.len(), 3);
        assert!(few.iter().all(|w| w.motion.len() == 30 && all.contains(w)));
        for w in &all {
            let beats = window_beats(&corpus, w);
            assert!(beats.iter().all(|&b| (0.0..1.0).contains(&b)));
        }
        let whole = &corpus.clips[0];
        let from_manifest = window_beats(&corpus, &ClipRecord { clip_id: format!("{}@0", whole.clip_id), ..whole.clone() });
        assert_eq!(from_manifest, corpus.audio_beats(0));
        let noise = noise_motion(&few, 3).unwrap();
        assert_eq!(noise[0].len(), 30);
    }
}
